"""Timing sweeps for each attention variant and their log-log slopes."""

from spikeiaa import bench

for comp in bench.COMPONENTS:
    axis, shapes = bench.default_grid(comp)
    rows = bench.bench_attention(comp, shapes)
    print(f"{comp}: slope {bench.slope_of(rows, axis):.2f} over {axis} =",
          [getattr(r, axis) for r in rows])
    for r in rows:
        print(f"    {axis}={getattr(r, axis):5d}  {r.wall_ns / 1e6:8.3f} ms  {r.flops / 1e6:9.1f} MFLOP")

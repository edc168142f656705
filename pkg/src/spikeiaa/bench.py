"""Attention cost benchmarks and the embedding-space expansion diagnostic."""

from __future__ import annotations

import ctypes
import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .config import ModelConfig
from .encoder import full_attention, global_attention, ila, sliding_window_attention
from .objective import prepare
from .tokenizer import assemble_tokens, embed_channels

COMPONENTS = ("ila", "full_attn", "aswa", "global_attn")
CSV_COLUMNS = ("component", "N", "A", "t", "d", "S", "w", "wall_ns", "flops")


class IllConditionedWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# analytic multiply-add counts (one multiply-add = 2 flops)


def macs_ila(N: int, A: int, t: int, d: int, n_heads: int = 1) -> int:
    """Q/K/V projections plus ``K^T V`` and ``Q (K^T V)`` per head, per slice."""
    return N * A * (3 * t * d * d + 2 * t * d * d // n_heads)


def flops_ila(N: int, A: int, t: int, d: int, n_heads: int = 1) -> int:
    return 2 * macs_ila(N, A, t, d, n_heads)


def flops_full_attn(N: int, A: int, t: int, d: int) -> int:
    return 2 * N * A * (3 * t * d * d + 2 * t * t * d)


def flops_aswa(S: int, w: int, d: int) -> int:
    w = min(w, S)
    return 2 * (3 * S * d * d + 2 * S * w * d)


def flops_global_attn(S: int, d: int) -> int:
    return 2 * (3 * S * d * d + 2 * S * S * d)


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingRow:
    component: str
    N: int
    A: int
    t: int
    d: int
    S: int
    w: int
    wall_ns: int
    flops: int
    reps: int = 31
    warmups: int = 5

    def csv_row(self) -> list:
        return [getattr(self, k) for k in CSV_COLUMNS]


@dataclass
class Shape:
    N: int = 1
    A: int = 1
    t: int = 1
    d: int = 16
    w: int = 0
    batch: int = 1

    @property
    def S(self) -> int:
        return self.N * self.A


def _kernel(component: str, shape: Shape, rng: np.random.Generator):
    """Build inputs once; return a zero-argument callable and its flop count."""
    d = shape.d
    W = [rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(3)]
    if component == "ila":
        H = rng.standard_normal((shape.batch, shape.N, shape.A, shape.t, d))
        return (lambda: ila(H, *W)), shape.batch * flops_ila(shape.N, shape.A, shape.t, d)
    if component == "full_attn":
        H = rng.standard_normal((shape.batch, shape.N, shape.A, shape.t, d))
        return (lambda: full_attention(H, *W)), shape.batch * flops_full_attn(shape.N, shape.A, shape.t, d)
    Ht = rng.standard_normal((shape.batch, shape.S, d))
    if component == "aswa":
        return ((lambda: sliding_window_attention(Ht, *W, shape.w)),
                shape.batch * flops_aswa(shape.S, shape.w, d))
    if component == "global_attn":
        return (lambda: global_attention(Ht, *W, causal=True)), shape.batch * flops_global_attn(shape.S, d)
    raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")


def time_call(fn, reps: int = 31, warmups: int = 5) -> int:
    """Median wall time in nanoseconds."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return max(1, int(np.median(samples)))


_ALLOCATOR_PINNED = False


def pin_allocator() -> bool:
    """Keep freed heap memory mapped (glibc only) so large temporaries do not
    page-fault on every call; a no-op elsewhere.  Affects the whole process."""
    global _ALLOCATOR_PINNED
    if _ALLOCATOR_PINNED:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        ok = libc.mallopt(M_MMAP_THRESHOLD, 1 << 30) == 1
        ok = libc.mallopt(M_TRIM_THRESHOLD, (1 << 31) - 1) == 1 and ok
    except (OSError, AttributeError):
        return False
    _ALLOCATOR_PINNED = ok
    return ok


def inversions(values) -> int:
    return int(sum(b < a for a, b in zip(values, values[1:])))


def bench_attention(component: str, shapes: list[Shape], reps: int = 31, warmups: int = 5,
                    seed: int = 0, threads: int = 1, retries: int = 1) -> list[TimingRow]:
    """Median timing per shape, single-threaded by default.

    If the medians along the grid show more than one inversion, the sweep is
    re-run (up to ``retries`` times) and the last run is kept.
    """
    pin_allocator()
    rows: list[TimingRow] = []
    for _ in range(retries + 1):
        rng = np.random.default_rng(seed)
        rows = []
        with threadpool_limits(threads), nx.precision("float64"):
            for sh in shapes:
                fn, flops = _kernel(component, sh, rng)
                ns = time_call(fn, reps, warmups)
                w = min(sh.w, sh.S) if component == "aswa" else 0
                rows.append(TimingRow(component, sh.N, sh.A, sh.t, sh.d, sh.S, w, ns,
                                      flops, reps, warmups))
        if inversions([r.wall_ns for r in rows]) <= 1:
            break
    return rows


def fit_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def default_grid(component: str, axis: str | None = None) -> tuple[str, list[Shape]]:
    """Reference sweeps.

    ILA sweeps ``t`` at fixed ``N, A, d``; full attention sweeps ``t`` well past
    ``d`` so the score matrix dominates; ASWA and global attention sweep ``S``
    through ``N`` at fixed ``A, w, d``.
    """
    if component == "ila":
        return "t", [Shape(N=16, A=8, t=t, d=64) for t in (8, 16, 32, 64, 128)]
    if component == "full_attn":
        return "t", [Shape(N=2, A=2, t=t, d=16) for t in (64, 128, 256, 512, 1024)]
    if component == "aswa":
        return "S", [Shape(N=S // 8, A=8, t=1, d=64, w=10, batch=4) for S in (64, 128, 256, 512, 1024)]
    if component == "global_attn":
        return "S", [Shape(N=S // 8, A=8, t=1, d=64, batch=2) for S in (64, 128, 256, 512, 1024)]
    raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")


def slope_of(rows: list[TimingRow], axis: str) -> float:
    return fit_slope([getattr(r, axis) for r in rows], [r.wall_ns for r in rows])


def write_timing_csv(path, rows: list[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


# ---------------------------------------------------------------------------
# expansion diagnostic


@dataclass
class ExpansionReport:
    logdet_spike: float
    logdet_joint: float
    effective_rank_spike: float
    effective_rank_joint: float
    eps: float
    n_samples: int
    dim: int
    eps_bound: float

    def rows(self) -> list[tuple[str, float]]:
        return list(asdict(self).items())


def logdet_reg(cov: np.ndarray, eps: float) -> float:
    sign, val = np.linalg.slogdet(cov + eps * np.eye(len(cov)))
    if sign <= 0:
        raise FloatingPointError("regularized covariance is not positive definite")
    return float(val)


def effective_rank(cov: np.ndarray) -> float:
    """``exp`` of the Shannon entropy of the normalized eigenvalue spectrum."""
    lam = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = lam.sum()
    if total <= 0:
        return 0.0
    p = lam[lam > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def expansion_from_tokens(spike_tokens, context_shift, eps: float = 1e-6) -> ExpansionReport:
    """Compare token covariance with and without an additive context term.

    ``spike_tokens`` is ``[n, d]``; ``context_shift`` is ``[n, d]`` or ``[d]``
    and is added row-wise to form the joint tokens.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    S = np.asarray(spike_tokens, dtype=np.float64)
    J = S + np.asarray(context_shift, dtype=np.float64)
    n, d = S.shape
    if n < 2:
        raise ValueError("need at least two token samples")
    if n < d:
        warnings.warn(f"{n} samples for dimension {d}: covariance is rank deficient; "
                      "log-determinants rely on eps", IllConditionedWarning, stacklevel=2)
    cov_s = np.cov(S, rowvar=False).reshape(d, d)
    cov_j = np.cov(J, rowvar=False).reshape(d, d)
    # first-order perturbation bound on |logdet(cov_j + eps) - logdet(cov_s + eps)|
    bound = d * float(np.linalg.norm(cov_j - cov_s, 2)) / eps
    return ExpansionReport(logdet_reg(cov_s, eps), logdet_reg(cov_j, eps),
                           effective_rank(cov_s), effective_rank(cov_j), eps, n, d, bound)


def token_samples(params, corpus, cfg: ModelConfig, embedder=None, max_tokens: int | None = None,
                  seed: int = 0):
    """Spike-only and context-injected tokens, ``[n_tokens, d]`` each."""
    with nx.precision("float64"):
        X, M = prepare(corpus, cfg, embedder)
        p = {k: np.asarray(v, np.float64) for k, v in params.items()}
        emb = embed_channels(X, p["tok.W_e"], p["tok.b_e"])
        spike = assemble_tokens(emb, None, p["tok.W_proj"], p["tok.T_pos"], p["tok.A_pos"]).data
        joint = assemble_tokens(emb, M, p["tok.W_proj"], p["tok.T_pos"], p["tok.A_pos"]).data
    spike = spike.reshape(-1, cfg.d)
    joint = joint.reshape(-1, cfg.d)
    if max_tokens is not None and len(spike) > max_tokens:
        idx = np.sort(np.random.default_rng(seed).choice(len(spike), max_tokens, replace=False))
        spike, joint = spike[idx], joint[idx]
    return spike, joint


def expansion_diag(params, corpus, cfg: ModelConfig, embedder=None, eps: float = 1e-6,
                   max_tokens: int | None = 20000, seed: int = 0) -> ExpansionReport:
    spike, joint = token_samples(params, corpus, cfg, embedder, max_tokens, seed)
    return expansion_from_tokens(spike, joint - spike, eps)


def write_expansion_csv(path, report: ExpansionReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in report.rows():
            w.writerow([k, repr(v) if isinstance(v, float) else v])

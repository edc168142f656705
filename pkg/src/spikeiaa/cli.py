"""Command-line entry point: ``spikeiaa <command> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric-contract failure.
Every error goes to stderr as a single line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, downstream
from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .objective import pipeline_gradcheck, pretrain, write_loss_csv
from .spike_io import ContainerError, InfeasibleSplitError, SplitSpec, gen_center_out, \
    gen_kinematics, read_corpus, split, write_corpus
from .tokenizer import FileEmbedder


class ValidationError(Exception):
    pass


class NumericError(Exception):
    pass


SPLIT_MODES = {"multi-day": "multi_day", "cross-day": "cross_day",
               "within-session": "within_session", "few-shot": "few_shot"}
BENCH_COMPONENTS = {"ila": "ila", "full": "full_attn", "aswa": "aswa", "global": "global_attn"}


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Base (defaults or checkpoint) < file < ``--set`` pairs < ``UNI_SEED`` < explicit flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_text(Path(args.config).read_text())
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.update(**{k.strip(): v.strip()})
    if "UNI_SEED" in os.environ:
        cfg.update(seed=os.environ["UNI_SEED"])
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("ft_epochs", "ft_epochs"),
                      ("threads", "threads"), ("dtype", "dtype")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.update(**{key: v})
    if cfg.dtype not in ("float32", "float64"):
        raise ValidationError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    if cfg.threads < 1:
        raise ValidationError("threads must be >= 1")
    cfg.model()
    return cfg


def _config_from_checkpoint(meta: dict) -> RunConfig:
    run = meta.get("run")
    if not isinstance(run, dict):
        raise ValidationError("checkpoint carries no run config")
    return RunConfig().update(**{k: str(v) if isinstance(v, bool) else v for k, v in run.items()})


def _run_dict(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.keys()}


def _embedder(args):
    return FileEmbedder(args.embeddings) if getattr(args, "embeddings", None) else None


def _load_corpus(directory):
    corpus = read_corpus(directory)
    if not corpus:
        raise ValidationError(f"no trials in {directory}")
    return corpus


def _split(corpus, cfg: RunConfig, mode: str | None = None):
    mode = mode or cfg.split_mode
    frac = 0.2 if mode == "few_shot" else cfg.train_fraction
    return split(corpus, SplitSpec(mode, frac, cfg.seed))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("UNI_SEED", 0))
    if args.trials < 1 or args.units < 1 or args.t_raw < 1:
        raise ValidationError("trials, units and t-raw must be positive")
    if args.kind == "center-out":
        corpus = gen_center_out(args.trials, args.units, args.t_raw, n_classes=args.classes,
                                seed=seed, n_sessions=args.sessions)
    else:
        corpus = gen_kinematics(args.trials, args.units, args.t_raw, seed=seed,
                                n_sessions=args.sessions)
    names = write_corpus(corpus, args.out)
    print(f"wrote {len(names)} trials to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".cfg").write_text(cfg.to_text())
    with nx.precision(cfg.dtype):
        try:
            res = pretrain(corpus, cfg.model(), cfg.train(), _embedder(args),
                           on_epoch=lambda e, v: print(f"epoch {e} loss {v:.6g}", flush=True),
                           shuffle_channels=cfg.shuffle_channels)
        except FloatingPointError as e:
            raise NumericError(str(e)) from None
    write_loss_csv(str(out) + ".loss.csv", res.losses)
    save_checkpoint(out, res.params, {"run": _run_dict(cfg), "stage": "pretrain"})
    return 0


def cmd_finetune(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    cfg = resolve_config(args, _config_from_checkpoint(meta))
    corpus = _load_corpus(args.data)
    task = downstream.TaskSpec.infer(corpus, args.task)
    train, _ = _split(corpus, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".cfg").write_text(cfg.to_text())
    with nx.precision(cfg.dtype):
        res = downstream.finetune(params, train, task, cfg.model(), cfg.finetune(), _embedder(args),
                                  on_epoch=lambda e, v: print(f"epoch {e} loss {v:.6g}", flush=True))
    if not all(np.isfinite(res.losses)):
        raise NumericError("non-finite fine-tuning loss")
    write_loss_csv(str(out) + ".loss.csv", res.losses)
    save_checkpoint(out, res.params, {"run": _run_dict(cfg), "stage": "finetune",
                                      "task": task.to_dict()})
    return 0


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    cfg = _config_from_checkpoint(meta)
    if "task" not in meta:
        raise ValidationError("checkpoint has no task head; run finetune first")
    task = downstream.TaskSpec(**meta["task"])
    corpus = _load_corpus(args.data)
    # default to the fine-tuning split so test trials never overlap training trials
    mode = SPLIT_MODES[args.split] if args.split else cfg.split_mode
    train, test = _split(corpus, cfg, mode)
    prefix = args.out or str(Path(args.ckpt).with_suffix("")) + "." + mode.replace("_", "-")
    rows = []
    with nx.precision(cfg.dtype):
        for name, part in (("train", train), ("test", test)):
            if not part:
                continue
            rep = downstream.evaluate(params, part, task, cfg.model(), _embedder(args))
            rows += rep.rows(name)
            if rep.confusion is not None:
                downstream.write_confusion_csv(f"{prefix}.{name}.confusion.csv", rep.confusion)
    downstream.write_metrics_csv(prefix + ".metrics.csv", rows)
    for split_name, metric, value in rows:
        print(f"{split_name},{metric},{value:.6f}")
    return 0


def cmd_bench(args) -> int:
    component = BENCH_COMPONENTS[args.component]
    axis, grid = bench.default_grid(component)
    if args.sweep != axis:
        raise ValidationError(f"component {args.component} sweeps axis {axis!r}, not {args.sweep!r}")
    rows = bench.bench_attention(component, grid, reps=args.reps, warmups=args.warmups,
                                 threads=args.threads or 1)
    bench.write_timing_csv(args.emit_csv, rows)
    print(f"slope {axis}: {bench.slope_of(rows, axis):.4f}")
    return 0


def cmd_diag(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    cfg = _config_from_checkpoint(meta)
    corpus = _load_corpus(args.data)
    rep = bench.expansion_diag(params, corpus, cfg.model(), _embedder(args), eps=args.eps)
    bench.write_expansion_csv(args.out, rep)
    print(f"logdet_spike {rep.logdet_spike:.6f} logdet_joint {rep.logdet_joint:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        N, A, t, d = (int(v) for v in args.shape.split(","))
    except ValueError:
        raise ValidationError(f"--shape expects N,A,t,d, got {args.shape!r}") from None
    if min(N, A, t, d) < 1 or d % args.heads:
        raise ValidationError("shape extents must be positive and d divisible by heads")
    rep = pipeline_gradcheck(N, A, t, d, n_heads=args.heads, n_layers=args.layers,
                             tol=args.tol, n_samples=args.samples, seed=args.seed or 0)
    status = "pass" if rep.passed else "fail"
    print(f"gradcheck {status} max_rel_error={rep.max_rel_error:.3e} checked={rep.n_checked}")
    if not rep.passed:
        raise NumericError(f"gradcheck max relative error {rep.max_rel_error:.3e} > tol {args.tol:g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="flat key=value run file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--embeddings", help="JSON map of template text to context vector")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikeiaa", description="spike-train encoder pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--kind", choices=("center-out", "kinematics"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--units", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-raw", type=int, default=1000)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--classes", type=int, default=8)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="attach a task head and train all parameters")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("cls", "reg"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", dest="ft_epochs", type=int)
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="metrics of a fine-tuned checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=tuple(SPLIT_MODES), default=None)
    p.add_argument("--out", help="output prefix for metric CSVs")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="attention timing sweep")
    p.add_argument("--component", choices=tuple(BENCH_COMPONENTS), required=True)
    p.add_argument("--sweep", required=True, help="t for ila/full, S for aswa/global")
    p.add_argument("--emit-csv", required=True)
    p.add_argument("--reps", type=int, default=31)
    p.add_argument("--warmups", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diag", help="diagnostics")
    dsub = p.add_subparsers(dest="diag", required=True)
    q = dsub.add_parser("expansion", help="token covariance with and without context")
    q.add_argument("--data", required=True)
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--eps", type=float, default=1e-6)
    q.add_argument("--embeddings")
    q.set_defaults(func=cmd_diag)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--shape", default="2,2,4,8", help="N,A,t,d")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; map its status 2 to a validation error
        return 0 if e.code == 0 else 1
    threads = getattr(args, "threads", None) or 1
    try:
        with threadpool_limits(threads):
            return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, ContainerError, CheckpointError, InfeasibleSplitError,
            OSError, KeyError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Masked-token reconstruction pretraining."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .encoder import encode, init_encoder, linear
from .normalize import normalize
from .tokenizer import ContextCache, StubEmbedder, init_tokenizer, spike_embedding, tokenize


@dataclass
class MaskPlan:
    flags: np.ndarray   # bool [J]
    ratio: float
    seed: int

    @property
    def n_masked(self) -> int:
        return int(self.flags.sum())


def n_masked_for(J: int, ratio: float) -> int:
    # exact floor of the rational value of ``ratio``; a float product can round up
    return math.floor(Fraction(ratio) * J)


def sample_mask(J: int, ratio: float, seed: int) -> MaskPlan:
    """Mask exactly ``floor(ratio * J)`` positions chosen by a seeded permutation."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    perm = np.random.default_rng(seed).permutation(J)
    flags = np.zeros(J, dtype=bool)
    flags[perm[:n_masked_for(J, ratio)]] = True
    return MaskPlan(flags, ratio, seed)


def _flags(plan) -> np.ndarray:
    return np.asarray(plan.flags if isinstance(plan, MaskPlan) else plan, dtype=bool)


def apply_mask(tokens, plan) -> nx.Tensor:
    """Zero the token vectors flagged in ``plan`` (flat ``[N, A, t]`` order)."""
    tokens = nx.as_tensor(tokens)
    flags = _flags(plan)
    lead = tokens.shape[:-4]
    J = int(np.prod(tokens.shape[-4:-1]))
    if flags.shape[-1] != J or flags.size != J * int(np.prod(lead, dtype=int)):
        raise ValueError(f"mask of shape {flags.shape} does not match {J} tokens")
    m = flags.reshape(*lead, *tokens.shape[-4:-1], 1)
    return nx.masked_fill(tokens, m, 0.0)


def masked_loss(pred, target, plan) -> nx.Tensor:
    """Sum over masked tokens of ``||pred_j - target_j||^2`` divided by the masked count.

    ``target`` is treated as a constant (gradient severed).
    """
    flags = _flags(plan)
    n = int(flags.sum())
    if n == 0:
        raise ZeroDivisionError("masked loss needs at least one masked token")
    pred = nx.as_tensor(pred)
    diff = nx.sub(pred, nx.detach(target))
    per_tok = nx.sum(nx.mul(diff, diff), axis=-1)        # [..., N, A, t]
    w = flags.reshape(per_tok.shape).astype(nx.get_dtype()) / n
    return nx.sum(nx.mul(per_tok, w))


# ---------------------------------------------------------------------------
# optimizer / schedule


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-2

    @classmethod
    def for_params(cls, params: dict, **kw) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float | None = None):
    """One decoupled-weight-decay Adam update, in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= (lr * upd).astype(p.dtype)
    return params, state


def cosine_lr(epoch: float, total: int = 40, lr_max: float = 5e-4, lr_min: float = 1e-5) -> float:
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# model assembly


def init_recon_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h = cfg.d, cfg.recon_hidden
    return {"recon.W1": rng.standard_normal((d, h)) / np.sqrt(d), "recon.b1": np.zeros(h),
            "recon.W2": rng.standard_normal((h, d)) / np.sqrt(h), "recon.b2": np.zeros(d)}


def recon_head(H, p: dict) -> nx.Tensor:
    return linear(nx.gelu(linear(H, p["recon.W1"], p["recon.b1"])), p["recon.W2"], p["recon.b2"])


def init_params(cfg: ModelConfig, seed: int = 0, recon: bool = True) -> dict[str, np.ndarray]:
    """Tokenizer + encoder (+ reconstruction head) parameters in the global dtype."""
    rng = np.random.default_rng(seed)
    p = {**init_tokenizer(cfg, rng), **init_encoder(cfg, rng)}
    if recon:
        p.update(init_recon_head(cfg, rng))
    dt = nx.get_dtype()
    return {k: np.asarray(v, dtype=dt) for k, v in p.items()}


def prepare(corpus, cfg: ModelConfig, embedder=None, shuffle_channels: bool = False,
            seed: int = 0):
    """Normalize every trial and embed its context: ``(X, M)``.

    ``X`` is ``[n, T_norm, A, C_norm]`` and ``M`` is ``[n, d_text]``.
    """
    ctx = ContextCache(embedder or StubEmbedder(cfg.d_text))
    shuffle = seed if shuffle_channels else None
    X = np.stack([normalize(r, cfg.T_norm, cfg.A, cfg.C_norm, shuffle).values for r in corpus])
    M = np.stack([ctx(r.meta) for r in corpus])
    if M.shape[1] != cfg.d_text:
        raise ValueError(f"context embedder width {M.shape[1]} != d_text {cfg.d_text}")
    dt = nx.get_dtype()
    return X.astype(dt), M.astype(dt)


def reconstruction_target(p, X, M, cfg: ModelConfig) -> nx.Tensor:
    if cfg.target == "spike":
        return nx.detach(spike_embedding(p, X, cfg))
    return nx.detach(tokenize(p, X, M, cfg))


def pretrain_loss(p, X, M, flags, cfg: ModelConfig, training: bool = False,
                  rng: np.random.Generator | None = None, target=None) -> nx.Tensor:
    """tokenize -> mask -> encode -> reconstruction head -> masked MSE."""
    tokens = tokenize(p, X, M, cfg)
    if target is None:
        target = spike_embedding(p, X, cfg) if cfg.target == "spike" else tokens
    H = encode(apply_mask(tokens, flags), p, cfg, training, rng)
    return masked_loss(recon_head(H, p), target, flags)


def batch_masks(n: int, J: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return np.stack([sample_mask(J, ratio, int(s)).flags for s in seeds])


@dataclass
class PretrainResult:
    params: dict
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


def pretrain(corpus, cfg: ModelConfig, tcfg: TrainConfig, embedder=None, params=None,
             on_epoch: Callable | None = None, shuffle_channels: bool = False) -> PretrainResult:
    """Masked-reconstruction pretraining with AdamW and per-epoch cosine annealing.

    All randomness (init, order, masks, dropout) flows from ``tcfg.seed``.
    Returns the trained parameters and per-epoch mean batch loss.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    X, M = prepare(corpus, cfg, embedder, shuffle_channels, tcfg.seed)
    params = init_params(cfg, tcfg.seed) if params is None else dict(params)
    params = {k: np.array(v, dtype=nx.get_dtype()) for k, v in params.items()}
    state = OptimState.for_params(params, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                  eps=tcfg.adam_eps, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng([tcfg.seed, 1])
    J = cfg.N * cfg.A * cfg.t
    n = len(X)
    result = PretrainResult(params)
    for epoch in range(tcfg.epochs):
        lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr, tcfg.lr_min)
        order = rng.permutation(n)
        losses = []
        for b0 in range(0, n, tcfg.batch_size):
            idx = order[b0:b0 + tcfg.batch_size]
            flags = batch_masks(len(idx), J, tcfg.mask_ratio, rng)
            drop_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
            xb, mb = X[idx], M[idx]
            loss, grads = nx.grad(
                lambda q: pretrain_loss(q, xb, mb, flags, cfg, True, drop_rng), params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            if tcfg.clip_norm > 0:
                clip_grads(grads, tcfg.clip_norm)
            adamw_step(params, grads, state, lr)
            losses.append(loss)
        result.losses.append(float(np.mean(losses)))
        result.lrs.append(lr)
        if on_epoch is not None:
            on_epoch(epoch, result.losses[-1])
    return result


def eval_loss(params, corpus, cfg: ModelConfig, ratio: float = 0.5, seed: int = 0,
              embedder=None) -> float:
    X, M = prepare(corpus, cfg, embedder)
    flags = batch_masks(len(X), cfg.N * cfg.A * cfg.t, ratio, np.random.default_rng(seed))
    return float(pretrain_loss(params, X, M, flags, cfg).data)


def write_loss_csv(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for e, v in enumerate(losses):
            fh.write(f"{e},{v!r}\n")


def pipeline_gradcheck(N: int = 2, A: int = 2, t: int = 4, d: int = 8, n_heads: int = 2,
                       n_layers: int = 2, C_norm: int = 4, d_text: int = 6, batch: int = 2,
                       ratio: float = 0.5, tol: float = 1e-5, n_samples: int = 200,
                       seed: int = 0) -> nx.GradcheckReport:
    """Finite-difference check of tokenize -> encoder -> recon head -> masked loss.

    Runs in 64-bit with dropout off.  The reconstruction target is evaluated
    once at the base point and held fixed, matching the detached target of the
    analytic gradient.
    """
    cfg = ModelConfig(T_norm=N * t, A=A, C_norm=C_norm, t=t, d=d, d_text=d_text,
                      n_layers=n_layers, n_heads=n_heads, window=max(2, N * A // 2),
                      d_ff=2 * d, recon_hidden=d)
    rng = np.random.default_rng(seed)
    with nx.precision("float64"):
        params = init_params(cfg, seed)
        X = rng.poisson(2.0, (batch, cfg.T_norm, A, C_norm)).astype(np.float64)
        M = rng.standard_normal((batch, d_text))
        flags = batch_masks(batch, N * A * t, ratio, rng)
        target = reconstruction_target(params, X, M, cfg).data
    return nx.gradcheck(lambda q: pretrain_loss(q, X, M, flags, cfg, target=target),
                        params, tol=tol, n_samples=n_samples, seed=seed)

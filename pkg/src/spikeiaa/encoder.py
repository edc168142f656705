"""Interval-area attention blocks.

Per layer, on ``H`` of shape ``[..., N, A, t, d]``:

1. interval linear attention (ILA) inside every ``(i, a)`` slice:
   ``(H W_q) ((H W_k)^T (H W_v))``, no softmax, no normalizer, per head;
2. mean over ``t`` + layernorm, flattened to ``S = N*A`` rows (``s = i*A + a``);
3. area-wise sliding-window softmax attention (ASWA) where row ``s`` sees
   ``[s - w + 1, s]``;
4. ``Z = ILA + broadcast_t(ASWA) + H`` and ``H' = FFN(LN(Z)) + Z``.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig


def linear(x, W, b=None) -> nx.Tensor:
    """``x @ W (+ b)`` over the last axis, as a single 2-D product."""
    x = nx.as_tensor(x)
    lead = x.shape[:-1]
    y = nx.matmul(nx.reshape(x, (-1, x.shape[-1])), W)
    if b is not None:
        y = nx.add(y, b)
    return nx.reshape(y, (*lead, y.shape[-1]))


def _split_heads(x, h: int) -> nx.Tensor:
    """``[..., L, d]`` -> ``[..., h, L, d/h]``."""
    *lead, L, d = x.shape
    x = nx.reshape(x, (*lead, L, h, d // h))
    nl = len(lead)
    return nx.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x) -> nx.Tensor:
    """``[..., h, L, dh]`` -> ``[..., L, h*dh]``."""
    *lead, h, L, dh = x.shape
    nl = len(lead)
    x = nx.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return nx.reshape(x, (*lead, L, h * dh))


def _swap_last(x) -> nx.Tensor:
    nd = x.ndim
    return nx.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


# ---------------------------------------------------------------------------
# interval linear attention


def ila(H, W_q, W_k, W_v, n_heads: int = 1) -> nx.Tensor:
    """Unnormalized associative linear attention on ``[..., t, d]`` slices.

    Each head computes ``Q_h (K_h^T V_h)``; heads are concatenated, so the
    result is ``[..., t, n_heads * d_h]``.
    """
    q, k, v = linear(H, W_q), linear(H, W_k), linear(H, W_v)
    if n_heads > 1:
        q, k, v = (_split_heads(z, n_heads) for z in (q, k, v))
    kv = nx.matmul(_swap_last(k), v)          # [..., (h,) dh, dh]
    out = nx.matmul(q, kv)                     # [..., (h,) t, dh]
    return _merge_heads(out) if n_heads > 1 else out


def ila_layer(H, p: dict, prefix: str, cfg: ModelConfig) -> nx.Tensor:
    out = ila(H, p[prefix + "ila.W_q"], p[prefix + "ila.W_k"], p[prefix + "ila.W_v"], cfg.n_heads)
    return linear(out, p[prefix + "ila.W_o"])


def full_attention(H, W_q, W_k, W_v, n_heads: int = 1, scale: bool = True) -> nx.Tensor:
    """Softmax attention over all ``t`` positions of each slice (benchmark baseline)."""
    q, k, v = linear(H, W_q), linear(H, W_k), linear(H, W_v)
    if n_heads > 1:
        q, k, v = (_split_heads(z, n_heads) for z in (q, k, v))
    s = nx.matmul(q, _swap_last(k))
    if scale:
        s = nx.mul(s, 1.0 / np.sqrt(q.shape[-1]))
    out = nx.matmul(nx.softmax(s), v)
    return _merge_heads(out) if n_heads > 1 else out


# ---------------------------------------------------------------------------
# pooling and area-wise sliding-window attention


def pool_and_norm(ila_out, gamma, beta, eps: float = 1e-5) -> nx.Tensor:
    """Mean over ``t``, layernorm, flatten ``[N, A]`` to ``S`` (interval-major)."""
    x = nx.avgpool_axis(ila_out, -2)                # [..., N, A, d]
    x = nx.layernorm(x, gamma, beta, eps)
    *lead, N, A, d = x.shape
    return nx.reshape(x, (*lead, N * A, d))


def window_mask(S: int, w: int) -> np.ndarray:
    """``[S, w]`` boolean, True where window slot ``j`` of row ``s`` falls before 0."""
    s = np.arange(S)[:, None]
    j = np.arange(w)[None, :]
    return (s - w + 1 + j) < 0


def window_keys(s: int, w: int) -> list[int]:
    return list(range(max(0, s - w + 1), s + 1))


def sliding_window_attention(Ht, W_Q, W_K, W_V, w: int, n_heads: int = 1,
                             scale: bool = True) -> nx.Tensor:
    """Banded causal softmax attention, ``O(S * w * d)``; heads concatenated."""
    S = Ht.shape[-2]
    w = min(w, S)
    q, k, v = linear(Ht, W_Q), linear(Ht, W_K), linear(Ht, W_V)
    q, k, v = (_split_heads(z, n_heads) for z in (q, k, v))   # [..., h, S, dh]
    dh = q.shape[-1]
    kw = nx.gather_windows(k, w)                               # [..., h, S, w, dh]
    vw = nx.gather_windows(v, w)
    scores = nx.matmul(kw, nx.reshape(q, (*q.shape, 1)))       # [..., h, S, w, 1]
    scores = nx.reshape(scores, scores.shape[:-1])
    if scale:
        scores = nx.mul(scores, 1.0 / np.sqrt(dh))
    scores = nx.masked_fill(scores, window_mask(S, w), -np.inf)
    prob = nx.softmax(scores)
    out = nx.matmul(nx.reshape(prob, (*prob.shape[:-1], 1, w)), vw)  # [..., h, S, 1, dh]
    out = nx.reshape(out, (*out.shape[:-2], dh))
    return _merge_heads(out)


def global_attention(Ht, W_Q, W_K, W_V, n_heads: int = 1, scale: bool = True,
                     causal: bool = False) -> nx.Tensor:
    """Dense ``S x S`` attention (benchmark baseline)."""
    S = Ht.shape[-2]
    q, k, v = linear(Ht, W_Q), linear(Ht, W_K), linear(Ht, W_V)
    q, k, v = (_split_heads(z, n_heads) for z in (q, k, v))
    s = nx.matmul(q, _swap_last(k))
    if scale:
        s = nx.mul(s, 1.0 / np.sqrt(q.shape[-1]))
    if causal:
        s = nx.masked_fill(s, np.triu(np.ones((S, S), dtype=bool), 1), -np.inf)
    return _merge_heads(nx.matmul(nx.softmax(s), v))


def aswa(Ht, p: dict, prefix: str, cfg: ModelConfig, w: int | None = None) -> nx.Tensor:
    w = cfg.window if w is None else w
    out = sliding_window_attention(Ht, p[prefix + "aswa.W_Q"], p[prefix + "aswa.W_K"],
                                   p[prefix + "aswa.W_V"], w, cfg.n_heads, cfg.scale_scores)
    return linear(out, p[prefix + "aswa.W_O"])


# ---------------------------------------------------------------------------
# block / stack


def layer_keys(layer: int) -> list[str]:
    pre = f"enc.{layer}."
    return [pre + k for k in (
        "ln0.g", "ln0.b", "ila.W_q", "ila.W_k", "ila.W_v", "ila.W_o", "ln1.g", "ln1.b",
        "aswa.W_Q", "aswa.W_K", "aswa.W_V", "aswa.W_O", "ln2.g", "ln2.b",
        "ffn.W1", "ffn.b1", "ffn.W2", "ffn.b2")]


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f = cfg.d, cfg.d_ff
    p = {}
    for layer in range(cfg.n_layers):
        pre = f"enc.{layer}."
        for name in ("ila.W_q", "ila.W_k", "ila.W_v", "ila.W_o",
                     "aswa.W_Q", "aswa.W_K", "aswa.W_V", "aswa.W_O"):
            p[pre + name] = rng.standard_normal((d, d)) / np.sqrt(d)
        # the unnormalized ILA sum grows like t * d_h; start its projection small
        p[pre + "ila.W_o"] /= np.sqrt(cfg.t * cfg.d_head)
        p[pre + "ln0.g"], p[pre + "ln0.b"] = np.ones(d), np.zeros(d)
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p[pre + "ffn.W1"] = rng.standard_normal((d, f)) / np.sqrt(d)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.W2"] = rng.standard_normal((f, d)) / np.sqrt(f)
        p[pre + "ffn.b2"] = np.zeros(d)
    return p


def iaa_block(H, p: dict, layer: int, cfg: ModelConfig, training: bool = False,
              rng: np.random.Generator | None = None) -> nx.Tensor:
    pre = f"enc.{layer}."
    H = nx.as_tensor(H)
    x = nx.layernorm(H, p[pre + "ln0.g"], p[pre + "ln0.b"], cfg.ln_eps) if cfg.ila_norm else H
    ila_out = ila_layer(x, p, pre, cfg)
    Ht = pool_and_norm(ila_out, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
    o = aswa(Ht, p, pre, cfg)
    ila_out = nx.dropout(ila_out, cfg.dropout, rng, training)
    o = nx.dropout(o, cfg.dropout, rng, training)
    *lead, N, A, t, d = H.shape
    o = nx.reshape(o, (*lead, N, A, 1, d))
    Z = nx.add(nx.add(ila_out, o), H)
    hidden = nx.gelu(linear(nx.layernorm(Z, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps),
                            p[pre + "ffn.W1"], p[pre + "ffn.b1"]))
    hidden = nx.dropout(hidden, cfg.dropout, rng, training)
    return nx.add(linear(hidden, p[pre + "ffn.W2"], p[pre + "ffn.b2"]), Z)


def encode(tokens, p: dict, cfg: ModelConfig, training: bool = False,
           rng: np.random.Generator | None = None) -> nx.Tensor:
    H = nx.as_tensor(tokens)
    for layer in range(cfg.n_layers):
        H = iaa_block(H, p, layer, cfg, training, rng)
    return H

"""Context-conditioned spatio-temporal tokenization.

Shapes (single trial; any leading batch axes are carried through):

* normalized spikes   ``[T_norm, A, C_norm]``
* channel embedding   ``[A, T_norm, d]``
* assembled tokens    ``[T_norm, A, d]``
* interval tokens     ``[N, A, t, d]``
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Protocol

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .spike_io import MetadataRecord

TEMPLATE = ("Invasive spike signals of {species} species ({dataset} {subject}) in the "
            "{region} brain region during the {task} task under session {session}.")

TOKENIZER_KEYS = ("tok.W_e", "tok.b_e", "tok.T_pos", "tok.A_pos", "tok.W_proj")


class PartitionError(ValueError):
    pass


def render_template(meta: MetadataRecord) -> str:
    for k, v in meta.to_dict().items():
        if not v:
            raise ValueError(f"metadata field {k!r} is empty")
    return TEMPLATE.format(**meta.to_dict())


class ContextEmbedder(Protocol):
    d_text: int

    def embed(self, text: str) -> np.ndarray: ...


class StubEmbedder:
    """Hash-seeded unit vectors; a network-free stand-in for a text encoder."""

    def __init__(self, d_text: int = 384):
        self.d_text = d_text

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.d_text)
        return v / np.linalg.norm(v)


def stub_embed(text: str, d_text: int = 384) -> np.ndarray:
    return StubEmbedder(d_text).embed(text)


class FileEmbedder:
    """Lookup-table embedder backed by a JSON ``{text: [floats]}`` sidecar."""

    def __init__(self, path):
        table = json.loads(Path(path).read_text())
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in self._table.values()}
        if len(dims) != 1:
            raise ValueError("embedding table has inconsistent vector widths")
        (shape,) = dims
        self.d_text = shape[0]

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._table[text].copy()
        except KeyError:
            raise KeyError(f"no embedding for context {text!r}") from None


def init_tokenizer(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.d
    return {
        "tok.W_e": rng.standard_normal((cfg.C_norm, d)) / np.sqrt(cfg.C_norm),
        "tok.b_e": np.zeros(d),
        "tok.T_pos": 0.02 * rng.standard_normal((cfg.T_norm, d)),
        "tok.A_pos": 0.02 * rng.standard_normal((cfg.A, d)),
        "tok.W_proj": rng.standard_normal((cfg.d_text, d)) / np.sqrt(cfg.d_text),
    }


def embed_channels(x, W_e, b_e) -> nx.Tensor:
    """Shared per-area channel embedding ``X_a W_e + b_e``.

    ``x`` is ``[..., T_norm, A, C_norm]`` (a :class:`NormalizedSpikes` is
    accepted); returns ``[..., A, T_norm, d]``.
    """
    if hasattr(x, "values") and hasattr(x, "channel_map"):
        x = x.values
    x = nx.as_tensor(x)
    if x.shape[-1] != nx.as_tensor(W_e).shape[0]:
        raise ValueError(f"C_norm mismatch: input {x.shape}, W_e {nx.as_tensor(W_e).shape}")
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    xa = nx.transpose(x, axes)
    return nx.add(nx.matmul(xa, W_e), b_e)


def assemble_tokens(emb, meta_vec, W_proj, T_pos, A_pos) -> nx.Tensor:
    """``token[tau, a] = emb[a, tau] + meta_vec W_proj + T_pos[tau] + A_pos[a]``.

    ``emb`` is ``[..., A, T_norm, d]``, ``meta_vec`` is ``[..., d_text]`` or
    ``None`` (no context term).  Returns ``[..., T_norm, A, d]``.
    """
    emb = nx.as_tensor(emb)
    nd = emb.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    tok = nx.transpose(emb, axes)
    tok = nx.add(tok, nx.reshape(T_pos, (T_pos.shape[0], 1, T_pos.shape[1])))
    tok = nx.add(tok, A_pos)
    if meta_vec is not None:
        mv = nx.as_tensor(meta_vec)
        proj = nx.matmul(nx.reshape(mv, (*mv.shape[:-1], 1, mv.shape[-1])), W_proj)  # [..., 1, d]
        proj = nx.reshape(proj, (*mv.shape[:-1], 1, 1, proj.shape[-1]))
        tok = nx.add(tok, proj)
    return tok


def partition_intervals(tokens, t: int) -> nx.Tensor:
    """``[..., T_norm, A, d]`` -> ``[..., N, A, t, d]`` with interval ``i`` = rows ``[i*t, (i+1)*t)``."""
    tokens = nx.as_tensor(tokens)
    *lead, T, A, d = tokens.shape
    if t < 1 or T % t:
        raise PartitionError(f"T_norm={T} is not divisible by interval length t={t}")
    N = T // t
    x = nx.reshape(tokens, (*lead, N, t, A, d))
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    return nx.transpose(x, axes)


def flatten_intervals(tokens) -> nx.Tensor:
    """Inverse of :func:`partition_intervals`."""
    tokens = nx.as_tensor(tokens)
    *lead, N, A, t, d = tokens.shape
    nl = len(lead)
    x = nx.transpose(tokens, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3))
    return nx.reshape(x, (*lead, N * t, A, d))


def tokenize(params, x, meta_vec, cfg: ModelConfig, with_context: bool = True) -> nx.Tensor:
    """Full tokenizer: ``[..., T_norm, A, C_norm]`` -> ``[..., N, A, t, d]``."""
    emb = embed_channels(x, params["tok.W_e"], params["tok.b_e"])
    tok = assemble_tokens(emb, meta_vec if with_context else None, params["tok.W_proj"],
                          params["tok.T_pos"], params["tok.A_pos"])
    return partition_intervals(tok, cfg.t)


def spike_embedding(params, x, cfg: ModelConfig) -> nx.Tensor:
    """``X_emb`` in interval layout, without positional or context terms."""
    emb = embed_channels(x, params["tok.W_e"], params["tok.b_e"])
    nd = emb.ndim
    tok = nx.transpose(emb, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return partition_intervals(tok, cfg.t)


class ContextCache:
    """Memoizes rendered-template embeddings per metadata record."""

    def __init__(self, embedder: ContextEmbedder):
        self.embedder = embedder
        self._cache: dict[MetadataRecord, np.ndarray] = {}

    def __call__(self, meta: MetadataRecord) -> np.ndarray:
        v = self._cache.get(meta)
        if v is None:
            v = np.asarray(self.embedder.embed(render_template(meta)), dtype=np.float64)
            self._cache[meta] = v
        return v

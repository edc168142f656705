"""Temporal binning and uniform area grouping of raw spike matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spike_io import SpikeRecording

PAD = -1


class ResolutionError(ValueError):
    pass


@dataclass
class NormalizedSpikes:
    values: np.ndarray        # [T_norm, A, C_norm]
    channel_map: np.ndarray   # [A, C_norm], source channel or PAD
    bin_edges: np.ndarray     # [T_norm + 1]

    @property
    def shape(self):
        return self.values.shape


def bin_edges(T_raw: int, T_norm: int) -> np.ndarray:
    t = np.arange(T_norm + 1, dtype=np.int64)
    return (t * T_raw) // T_norm


def bin_temporal(rec, T_norm: int):
    """Sum raw rows into ``T_norm`` equal segments.

    Bin ``t`` covers raw rows ``[floor(t*T_raw/T_norm), floor((t+1)*T_raw/T_norm))``.
    Accepts a :class:`SpikeRecording` or a bare count matrix and returns
    ``(binned, edges)``.
    """
    counts = rec.counts if isinstance(rec, SpikeRecording) else np.asarray(rec)
    T_raw = counts.shape[0]
    if T_norm < 1:
        raise ValueError("T_norm must be >= 1")
    if T_raw < T_norm:
        raise ResolutionError(f"T_raw={T_raw} is shorter than T_norm={T_norm}")
    edges = bin_edges(T_raw, T_norm)
    binned = np.add.reduceat(counts.astype(np.int64), edges[:-1], axis=0)
    return binned, edges


def group_sizes(C_raw: int, A: int) -> list[int]:
    base, extra = divmod(C_raw, A)
    return [base + 1 if a < extra else base for a in range(A)]


def group_areas(binned: np.ndarray, A: int, C_norm: int, edges=None,
                shuffle_seed: int | None = None) -> NormalizedSpikes:
    """Split channels into ``A`` contiguous groups, pad/truncate each to ``C_norm``.

    The first ``C_raw % A`` groups hold one extra channel.  Truncation keeps the
    lowest-index channels of a group.  With ``shuffle_seed`` the channel order
    is permuted (seeded) before grouping.
    """
    if A < 1 or C_norm < 1:
        raise ValueError("A and C_norm must be >= 1")
    T_norm, C_raw = binned.shape
    order = np.arange(C_raw)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(C_raw)
    cmap = np.full((A, C_norm), PAD, dtype=np.int64)
    start = 0
    for a, size in enumerate(group_sizes(C_raw, A)):
        keep = order[start:start + min(size, C_norm)]
        cmap[a, :len(keep)] = keep
        start += size
    values = np.zeros((T_norm, A, C_norm), dtype=binned.dtype)
    mapped = cmap != PAD
    values[:, mapped] = binned[:, cmap[mapped]]
    if edges is None:
        edges = np.arange(T_norm + 1)
    return NormalizedSpikes(values, cmap, np.asarray(edges))


def normalize(rec: SpikeRecording, T_norm: int = 100, A: int = 8, C_norm: int = 32,
              shuffle_seed: int | None = None) -> NormalizedSpikes:
    binned, edges = bin_temporal(rec, T_norm)
    return group_areas(binned, A, C_norm, edges, shuffle_seed)


def bin_labels(label: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Average a ``[T_raw, k]`` label sequence within each bin."""
    sums = np.add.reduceat(np.asarray(label, dtype=np.float64), edges[:-1], axis=0)
    return sums / np.diff(edges)[:, None]

"""Spike containers (``.spkt``), synthetic corpora and dataset splits.

Container layout, all integers little-endian::

    b"SPKT" | u16 version=1 | u32 T_raw | u32 C_raw | f64 sample_rate
    | u32 n_meta | n_meta bytes UTF-8 JSON
    | T_raw*C_raw u32 counts (time-major)
    | [u32 n_label | n_label f64]          # only for sequence labels

The JSON block carries ``species, dataset, subject, region, task, session,
label``.  ``label`` is an integer class, ``null``, or the string
``"sequence"`` when a float payload follows (its width is
``n_label / T_raw``).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MAGIC = b"SPKT"
VERSION = 1
MANIFEST = "manifest.txt"
_META_KEYS = ("species", "dataset", "subject", "region", "task", "session")


class ContainerError(ValueError):
    pass


class FormatError(ContainerError):
    pass


class LengthError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class InfeasibleSplitError(ValueError):
    pass


@dataclass(frozen=True)
class MetadataRecord:
    species: str
    dataset: str
    subject: str
    region: str
    task: str
    session: str

    def __post_init__(self):
        for k in _META_KEYS:
            v = getattr(self, k)
            if not isinstance(v, str) or not v:
                raise ValueError(f"metadata field {k!r} must be a non-empty string")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _META_KEYS}


@dataclass
class SpikeRecording:
    counts: np.ndarray
    sample_rate_hz: float
    meta: MetadataRecord
    label: int | np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise ValueError("counts must be a T_raw x C_raw matrix")
        if np.any(c < 0):
            raise ValueError("spike counts must be non-negative")
        self.counts = c
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if isinstance(self.label, np.ndarray):
            lab = np.asarray(self.label, dtype=np.float64)
            if lab.ndim == 1:
                lab = lab[:, None]
            if lab.shape[0] != c.shape[0]:
                raise ValueError("label sequence must have leading extent T_raw")
            self.label = lab
        elif self.label is not None:
            self.label = int(self.label)

    @property
    def T_raw(self) -> int:
        return self.counts.shape[0]

    @property
    def C_raw(self) -> int:
        return self.counts.shape[1]

    def equals(self, other: "SpikeRecording") -> bool:
        if self.meta != other.meta or self.sample_rate_hz != other.sample_rate_hz:
            return False
        if not np.array_equal(self.counts, other.counts):
            return False
        a, b = self.label, other.label
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)
                    and a.shape == b.shape and a.tobytes() == b.tobytes())
        return a == b


# ---------------------------------------------------------------------------
# container


def encode_container(rec: SpikeRecording) -> bytes:
    T, C = rec.counts.shape
    if rec.counts.size and int(rec.counts.max()) > 0xFFFFFFFF:
        raise ValueError("counts exceed u32 range")
    meta = rec.meta.to_dict()
    seq = isinstance(rec.label, np.ndarray)
    meta["label"] = "sequence" if seq else rec.label
    blob = json.dumps(meta, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<HIIdI", VERSION, T, C, float(rec.sample_rate_hz), len(blob)),
             blob, np.ascontiguousarray(rec.counts, dtype="<u4").tobytes()]
    if seq:
        lab = np.ascontiguousarray(rec.label, dtype="<f8")
        parts += [struct.pack("<I", lab.size), lab.tobytes()]
    return b"".join(parts)


def decode_container(buf: bytes) -> SpikeRecording:
    if len(buf) < 4:
        raise LengthError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    head = struct.Struct("<HIIdI")
    if len(buf) < 4 + head.size:
        raise LengthError("truncated header")
    version, T, C, rate, n_meta = head.unpack_from(buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    pos = 4 + head.size
    if len(buf) < pos + n_meta:
        raise LengthError("truncated metadata block")
    meta = json.loads(buf[pos:pos + n_meta].decode("utf-8"))
    pos += n_meta
    n_counts = T * C * 4
    if len(buf) < pos + n_counts:
        raise LengthError("truncated count payload")
    counts = np.frombuffer(buf, dtype="<u4", count=T * C, offset=pos).reshape(T, C).astype(np.uint32)
    pos += n_counts
    label = meta.pop("label", None)
    if label == "sequence":
        if len(buf) < pos + 4:
            raise LengthError("truncated label length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + 8 * n:
            raise LengthError("truncated label payload")
        if T == 0 or n % T:
            raise FormatError("label payload not a multiple of T_raw")
        label = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(T, n // T).copy()
        pos += 8 * n
    if pos != len(buf):
        raise LengthError(f"{len(buf) - pos} trailing bytes")
    return SpikeRecording(counts, rate, MetadataRecord(**meta), label)


def write_container(rec: SpikeRecording, path) -> None:
    Path(path).write_bytes(encode_container(rec))


def read_container(path) -> SpikeRecording:
    return decode_container(Path(path).read_bytes())


def write_corpus(corpus: list[SpikeRecording], directory) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(corpus))))
    names = [f"trial_{i:0{width}d}.spkt" for i in range(len(corpus))]
    for name, rec in zip(names, corpus):
        write_container(rec, d / name)
    (d / MANIFEST).write_text("".join(n + "\n" for n in names))
    return names


def read_corpus(directory) -> list[SpikeRecording]:
    d = Path(directory)
    mf = d / MANIFEST
    if not mf.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    names = [ln.strip() for ln in mf.read_text().splitlines() if ln.strip()]
    return [read_container(d / n) for n in names]


# ---------------------------------------------------------------------------
# synthetic generators

DEFAULT_META = MetadataRecord("Macaque", "SYN-CO", "S0", "M1", "center-out", "day-00")


def _session_meta(meta: MetadataRecord | None, n_sessions: int, i: int) -> MetadataRecord:
    meta = meta or DEFAULT_META
    if n_sessions <= 1:
        return meta
    return replace(meta, session=f"{meta.session}-s{i % n_sessions:02d}")


def gen_center_out(n_trials: int, n_units: int, T_raw: int, n_classes: int = 8,
                   base_rate: float = 20.0, mod_depth: float = 15.0, seed: int = 0,
                   sample_rate: float = 1000.0, n_sessions: int = 1,
                   meta: MetadataRecord | None = None,
                   jitter: float = 0.1) -> list[SpikeRecording]:
    """Cosine-tuned Poisson population during an n-direction reach.

    Unit ``c`` prefers ``2*pi*c/n_units`` plus Gaussian jitter; a trial of
    class ``k`` fires at ``(base_rate + mod_depth*cos(theta_k - phi_c))``
    Hz, drawn per raw step.  Classes cycle through the trials and are then
    shuffled.  Sessions are assigned round-robin.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if base_rate < 0 or mod_depth < 0:
        raise ValueError("rates must be non-negative")
    if base_rate < mod_depth:
        raise ValueError("base_rate < mod_depth gives negative firing rates")
    if n_trials == 0:
        return []
    rng = np.random.default_rng(seed)
    phi = 2 * np.pi * np.arange(n_units) / n_units + jitter * rng.standard_normal(n_units)
    labels = rng.permutation(np.arange(n_trials) % n_classes)
    out = []
    for i, k in enumerate(labels):
        theta = 2 * np.pi * k / n_classes
        rate = np.maximum(base_rate + mod_depth * np.cos(theta - phi), 0.0) / sample_rate
        counts = rng.poisson(rate, size=(T_raw, n_units)).astype(np.uint32)
        out.append(SpikeRecording(counts, sample_rate, _session_meta(meta, n_sessions, i), int(k)))
    return out


def gen_kinematics(n_trials: int, n_units: int, T_raw: int, seed: int = 0,
                   sample_rate: float = 1000.0, walk_std: float = 1.0,
                   smooth: int = 50, base_rate: float = 15.0, gain: float = 10.0,
                   n_sessions: int = 1, meta: MetadataRecord | None = None
                   ) -> list[SpikeRecording]:
    """Rectified-linear units driven by a smoothed 2-D random-walk velocity.

    Velocity increments are ``N(0, walk_std**2)``, accumulated, then boxcar
    smoothed over ``smooth`` steps and rescaled to unit peak speed per trial
    (skipped for a zero walk).  Unit ``c`` fires at
    ``max(0, base_rate + gain * <v, u_c>)`` Hz with preferred direction ``u_c``.
    """
    if n_units < 1 or T_raw < 1:
        raise ValueError("n_units and T_raw must be positive")
    if walk_std < 0:
        raise ValueError("walk_std must be >= 0")
    if n_trials == 0:
        return []
    meta = meta or replace(DEFAULT_META, dataset="SYN-KIN", task="random-target")
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, n_units)
    pref = np.stack([np.cos(ang), np.sin(ang)], axis=1)   # [C, 2]
    k = max(1, min(smooth, T_raw))
    box = np.ones(k) / k
    out = []
    for i in range(n_trials):
        steps = walk_std * rng.standard_normal((T_raw, 2))
        walk = np.cumsum(steps, axis=0)
        vel = np.stack([np.convolve(walk[:, j], box, mode="same") for j in range(2)], axis=1)
        peak = np.abs(vel).max()
        if peak > 0:
            vel = vel / peak
        rate = np.maximum(base_rate + gain * vel @ pref.T, 0.0) / sample_rate
        counts = rng.poisson(rate).astype(np.uint32)
        out.append(SpikeRecording(counts, sample_rate, _session_meta(meta, n_sessions, i), vel))
    return out


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "multi_day"
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("multi_day", "cross_day", "within_session", "few_shot"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def split_indices(corpus: list[SpikeRecording], spec: SplitSpec) -> tuple[list[int], list[int]]:
    if not corpus:
        raise ValueError("cannot split an empty corpus")
    rng = np.random.default_rng(spec.seed)
    sessions: dict[str, list[int]] = {}
    for i, rec in enumerate(corpus):
        sessions.setdefault(rec.meta.session, []).append(i)
    if spec.mode == "cross_day":
        names = sorted(sessions)
        if len(names) < 2:
            raise InfeasibleSplitError("cross_day split needs at least two sessions")
        order = [names[i] for i in rng.permutation(len(names))]
        n_tr = min(max(int(round(spec.train_fraction * len(names))), 1), len(names) - 1)
        train = sorted(i for s in order[:n_tr] for i in sessions[s])
        test = sorted(i for s in order[n_tr:] for i in sessions[s])
        return train, test
    # trial-level split stratified by session
    train, test = [], []
    for s in sorted(sessions):
        idx = np.asarray(sessions[s])
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(spec.train_fraction * len(idx)))
        train += idx[:n_tr].tolist()
        test += idx[n_tr:].tolist()
    return sorted(train), sorted(test)


def split(corpus: list[SpikeRecording], spec: SplitSpec):
    """Seeded train/test partition of ``corpus`` according to ``spec.mode``."""
    tr, te = split_indices(corpus, spec)
    return [corpus[i] for i in tr], [corpus[i] for i in te]


def few_shot_spec(seed: int = 0) -> SplitSpec:
    return SplitSpec("few_shot", 0.2, seed)


def poisson_dispersion(rate: float, n: int, seed: int = 0) -> float:
    """Variance/mean ratio of ``n`` Poisson draws (1 for an ideal generator)."""
    x = np.random.default_rng(seed).poisson(rate, n)
    m = x.mean()
    return float(x.var() / m) if m > 0 else math.nan


def corpus_exists(directory) -> bool:
    return os.path.exists(os.path.join(directory, MANIFEST))

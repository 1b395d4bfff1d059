"""Shared domain types: codebook, token/noise sequences and trajectory points.

Trajectory positions ``t`` are 1-based and slices are inclusive, so
``slice_head(X, t)`` keeps ``x_1..x_t``. Token ids are plain 0-based
indices into the codebook rows.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CODEBOOK_MAGIC = b"DDCB"
CODEBOOK_VERSION = 1
_CB_HEADER = struct.Struct("<4sIII")


class StructureError(ValueError):
    """Raised when sequence lengths or shapes do not fit together."""


@dataclass(frozen=True, eq=False)
class Codebook:
    """V x C table of token embeddings (float32 storage)."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float32, copy=True)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise StructureError(f"codebook must be a non-empty V x C array, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        if len(np.unique(e, axis=0)) != len(e):
            raise ValueError("codebook entries must be pairwise distinct")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def V(self) -> int:
        return self.entries.shape[0]

    @property
    def C(self) -> int:
        return self.entries.shape[1]

    def embed(self, ids) -> np.ndarray:
        """Look up float64 embeddings for an array of token ids."""
        return self.entries.astype(np.float64)[np.asarray(ids, dtype=np.int64)]

    def __eq__(self, other):
        return isinstance(other, Codebook) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())

    def to_bytes(self) -> bytes:
        header = _CB_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.V, self.C)
        return header + self.entries.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Codebook":
        if len(buf) < _CB_HEADER.size:
            raise StructureError("codebook file truncated")
        magic, version, V, C = _CB_HEADER.unpack_from(buf)
        if magic != CODEBOOK_MAGIC:
            raise StructureError(f"bad codebook magic {magic!r}")
        if version != CODEBOOK_VERSION:
            raise StructureError(f"unsupported codebook version {version}")
        body = buf[_CB_HEADER.size:]
        if len(body) != 4 * V * C:
            raise StructureError(f"codebook body has {len(body)} bytes, expected {4 * V * C}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(V, C))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    condition: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.condition is not None and self.condition < 0:
            raise ValueError("condition must be a non-negative integer")

    @property
    def n(self) -> int:
        return len(self.ids)

    def check(self, cb: Codebook) -> None:
        bad = [i for i in self.ids if not 0 <= i < cb.V]
        if bad:
            raise ValueError(f"token ids {bad} outside codebook of size {cb.V}")

    def __len__(self):
        return len(self.ids)


def noise_from_seed(seed: int, n: int, C: int) -> np.ndarray:
    """Standard Gaussian noise of shape (n, C), reproducible from ``seed``."""
    rng = np.random.default_rng(np.uint64(seed))
    return rng.standard_normal((n, C)).astype(np.float32)


def split_seed(base_seed: int, index: int) -> int:
    """Derive the u64 seed of item ``index`` from ``base_seed``.

    Depends only on (base_seed, index), so work can be split across workers freely.
    """
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class NoiseSeq:
    values: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise StructureError(f"noise must be an (n, C) array, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_seed(cls, seed: int, n: int, C: int) -> "NoiseSeq":
        return cls(noise_from_seed(seed, n, C), seed)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, NoiseSeq) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class TrajectoryPoint:
    """Hybrid state X_t = (q_1..q_{t-1}, eps_t..eps_n)."""

    prefix: tuple
    suffix: np.ndarray
    t: int
    condition: Optional[int] = None
    _n: int = field(init=False, repr=False, default=0)

    def __post_init__(self):
        object.__setattr__(self, "prefix", tuple(int(i) for i in self.prefix))
        s = np.array(self.suffix, dtype=np.float32, copy=True)
        if s.ndim != 2:
            raise StructureError("noise tail must be 2-D (len, C)")
        s.setflags(write=False)
        object.__setattr__(self, "suffix", s)
        if len(self.prefix) != self.t - 1:
            raise StructureError(f"data head has length {len(self.prefix)}, expected t-1={self.t - 1}")
        object.__setattr__(self, "_n", len(self.prefix) + s.shape[0])
        if not 1 <= self.t <= self._n + 1:
            raise StructureError(f"t={self.t} outside [1, {self._n + 1}]")

    @property
    def n(self) -> int:
        return self._n

    def __len__(self):
        return self._n

    @property
    def is_noise(self) -> bool:
        return self.t == 1

    @property
    def is_data(self) -> bool:
        return self.t == self._n + 1

    def embedded(self, cb: Codebook) -> np.ndarray:
        """(n, C) float64 array: codebook rows for the data head, raw noise for the tail."""
        out = np.empty((self._n, cb.C))
        k = len(self.prefix)
        if k:
            out[:k] = cb.embed(self.prefix)
        out[k:] = self.suffix
        return out

    def __eq__(self, other):
        return (isinstance(other, TrajectoryPoint) and self.t == other.t
                and self.prefix == other.prefix and np.array_equal(self.suffix, other.suffix)
                and self.condition == other.condition)


def slice_head(seq: Sequence, t: int):
    """First ``t`` elements (inclusive, 1-based): X[:t] = (x_1..x_t)."""
    n = len(seq)
    if t < 0 or t > n:
        raise IndexError(f"slice_head: t={t} outside [0, {n}]")
    return seq[:t]


def slice_tail(seq: Sequence, t: int):
    """Elements from position ``t`` on (1-based): X[t:] = (x_t..x_n)."""
    n = len(seq)
    if t < 1 or t > n + 1:
        raise IndexError(f"slice_tail: t={t} outside [1, {n + 1}]")
    return seq[t - 1:]


def concat_mixed(data_head, noise_tail, t: int, condition=None) -> TrajectoryPoint:
    """Build X_t from ``t-1`` data tokens and the ``n-t+1`` remaining noise vectors."""
    head = data_head.ids if isinstance(data_head, TokenSeq) else tuple(data_head)
    tail = noise_tail.values if isinstance(noise_tail, NoiseSeq) else np.asarray(noise_tail)
    if len(head) != t - 1:
        raise StructureError(f"data head has length {len(head)}, expected {t - 1}")
    if condition is None and isinstance(data_head, TokenSeq):
        condition = data_head.condition
    return TrajectoryPoint(head, tail, t, condition)


def squared_distances(x: np.ndarray, cb: Codebook) -> np.ndarray:
    """Squared L2 distance from each row of ``x`` (..., C) to every atom -> (..., V)."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None, :] - cb.entries.astype(np.float64)
    return np.sum(diff * diff, axis=-1)


def nearest_tokens(x: np.ndarray, cb: Codebook) -> np.ndarray:
    """Vectorised nearest_token; ties resolve to the smallest index."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("nearest_token: input must be finite")
    return np.argmin(squared_distances(x, cb), axis=-1)


def nearest_token(x, cb: Codebook) -> int:
    x = np.asarray(x, dtype=np.float64).reshape(cb.C)
    return int(nearest_tokens(x[None], cb)[0])


def line_codebook(V: int, spacing: float = 1.0) -> Codebook:
    """V evenly spaced scalar atoms centred on zero (C = 1)."""
    return Codebook((np.arange(V, dtype=np.float64) - (V - 1) / 2.0)[:, None] * spacing)


def random_codebook(V: int, C: int, rng: np.random.Generator, scale: float = 1.0) -> Codebook:
    return Codebook(rng.normal(0.0, scale, size=(V, C)))

"""Noise -> data pair generation along the teacher's AR flow-matching trajectory."""
from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import NoiseSeq, StructureError, TokenSeq, TrajectoryPoint, concat_mixed, noise_from_seed, split_seed
from .flowmatch import SolverConfig, SolverError, fm_map

PAIR_MAGIC = b"DDPR"
PAIR_VERSION = 2
# magic, version, N, n, V, C, fingerprint, scheme, steps, t_end, grid
_HEADER = struct.Struct("<4sIQIII32s8sId8s")


class PairGenerationError(RuntimeError):
    def __init__(self, position, cause, index=None):
        where = f"pair {index}, " if index is not None else ""
        super().__init__(f"{where}position {position}: {cause}")
        self.position = position
        self.index = index


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PairRecord:
    noise: NoiseSeq
    data: TokenSeq
    condition: int = 0
    seed: Optional[int] = None

    @property
    def n(self):
        return self.data.n


def complete_tokens(teacher, noise, conditions, cfg: SolverConfig, prefix=None):
    """Run the trajectory forward from the end of ``prefix``.

    noise: (B, n, C) noise tokens; positions covered by ``prefix`` (B, k) are
    ignored. Each remaining position costs one batched teacher query and one
    batched ODE solve. Returns (B, n) token ids.
    """
    noise = np.asarray(noise)
    B, n, _ = noise.shape
    conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (B,))
    seqs = np.zeros((B, 0), dtype=np.int64) if prefix is None else np.asarray(prefix, dtype=np.int64).reshape(B, -1)
    for pos in range(seqs.shape[1], n):
        p = teacher.next_dists(seqs, conditions)
        try:
            q = fm_map(noise[:, pos].astype(np.float64), p, teacher.codebook, cfg)
        except SolverError as exc:
            raise PairGenerationError(pos + 1, exc) from exc
        seqs = np.concatenate([seqs, np.asarray(q, dtype=np.int64).reshape(B, 1)], axis=1)
    return seqs


def condition_for_seed(seed: int, num_classes: int) -> int:
    return 0 if num_classes <= 1 else split_seed(seed, 0xC1A55) % num_classes


def generate_pair(teacher, condition, seed: int, solver_cfg: SolverConfig = SolverConfig()) -> PairRecord:
    condition = 0 if condition is None else int(condition)
    noise = noise_from_seed(seed, teacher.n, teacher.C)
    data = complete_tokens(teacher, noise[None], [condition], solver_cfg)[0]
    return PairRecord(NoiseSeq(noise, seed), TokenSeq(data, condition), condition, seed)


regenerate_pair = generate_pair


def build_xt(pair: PairRecord, t: int) -> TrajectoryPoint:
    n = pair.n
    if not 1 <= t <= n + 1:
        raise IndexError(f"t={t} outside [1, {n + 1}]")
    return concat_mixed(pair.data.ids[:t - 1], pair.noise.values[t - 1:], t, pair.condition)


@dataclass(eq=False)
class PairStore:
    noise: np.ndarray        # (N, n, C) float32
    data: np.ndarray         # (N, n) int64
    conditions: np.ndarray   # (N,) int64
    seeds: np.ndarray        # (N,) uint64
    V: int
    fingerprint: str
    solver: SolverConfig

    def __post_init__(self):
        N = len(self.data)
        if not (len(self.noise) == len(self.conditions) == len(self.seeds) == N):
            raise StructureError("pair store arrays disagree on the record count")

    @property
    def N(self):
        return len(self.data)

    @property
    def n(self):
        return self.data.shape[1]

    @property
    def C(self):
        return self.noise.shape[2]

    def __len__(self):
        return self.N

    def record(self, i) -> PairRecord:
        c = int(self.conditions[i])
        return PairRecord(NoiseSeq(self.noise[i], int(self.seeds[i])), TokenSeq(self.data[i], c), c,
                          int(self.seeds[i]))

    def __iter__(self):
        return (self.record(i) for i in range(self.N))

    def check_teacher(self, teacher):
        fp = teacher.fingerprint()
        if fp != self.fingerprint:
            raise FingerprintMismatch(f"pair store was generated by teacher {self.fingerprint[:12]}, "
                                      f"not {fp[:12]}")

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(PAIR_MAGIC, PAIR_VERSION, self.N, self.n, self.V, self.C,
                              bytes.fromhex(self.fingerprint), self.solver.scheme.encode().ljust(8, b"\0"),
                              int(self.solver.steps), float(self.solver.t_end),
                              self.solver.grid.encode().ljust(8, b"\0"))
        rec = np.zeros(self.N, dtype=_record_dtype(self.n, self.C))
        rec["seed"] = self.seeds
        rec["condition"] = self.conditions
        rec["tokens"] = self.data
        rec["noise"] = self.noise
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PairStore":
        if len(buf) < _HEADER.size:
            raise StructureError("pair store truncated")
        magic, version, N, n, V, C, fp, scheme, steps, t_end, grid = _HEADER.unpack_from(buf)
        if magic != PAIR_MAGIC:
            raise StructureError(f"bad pair store magic {magic!r}")
        if version != PAIR_VERSION:
            raise StructureError(f"unsupported pair store version {version}")
        dt = _record_dtype(n, C)
        body = buf[_HEADER.size:]
        if len(body) != N * dt.itemsize:
            raise StructureError(f"pair store holds {len(body) // max(dt.itemsize, 1)} records, header says {N}")
        rec = np.frombuffer(body, dtype=dt)
        cfg = SolverConfig(scheme.rstrip(b"\0").decode(), steps, t_end, grid.rstrip(b"\0").decode())
        return cls(rec["noise"].astype(np.float32), rec["tokens"].astype(np.int64),
                   rec["condition"].astype(np.int64), rec["seed"].astype(np.uint64), V, fp.hex(), cfg)

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path, teacher=None) -> "PairStore":
        store = cls.from_bytes(Path(path).read_bytes())
        if teacher is not None:
            store.check_teacher(teacher)
        return store


def _record_dtype(n, C):
    return np.dtype([("seed", "<u8"), ("condition", "<u4"), ("tokens", "<u4", (n,)), ("noise", "<f4", (n, C))])


def generate_dataset(teacher, N: int, base_seed: int, solver_cfg: SolverConfig = SolverConfig(),
                     condition_sampler: Optional[Callable[[int, int], int]] = None,
                     workers: int = 1, chunk: int = 4096) -> PairStore:
    """N pairs with per-pair seeds split from ``base_seed``.

    ``condition_sampler(index, seed)`` picks each pair's class label (default 0).
    Chunks are independent, so the result does not depend on ``workers``.
    """
    if N < 1:
        raise ValueError("generate_dataset: N must be >= 1")
    seeds = np.array([split_seed(base_seed, i) for i in range(N)], dtype=np.uint64)
    conds = np.array([0 if condition_sampler is None else int(condition_sampler(i, int(s)))
                      for i, s in enumerate(seeds)], dtype=np.int64)
    noise = np.stack([noise_from_seed(int(s), teacher.n, teacher.C) for s in seeds])
    data = np.zeros((N, teacher.n), dtype=np.int64)

    def run(lo):
        hi = min(lo + chunk, N)
        try:
            data[lo:hi] = complete_tokens(teacher, noise[lo:hi], conds[lo:hi], solver_cfg)
        except PairGenerationError as exc:
            # locate the failing pair inside the chunk
            for i in range(lo, hi):
                try:
                    complete_tokens(teacher, noise[i:i + 1], conds[i:i + 1], solver_cfg)
                except PairGenerationError as inner:
                    raise PairGenerationError(inner.position, inner.__cause__, index=i) from exc
            raise

    starts = range(0, N, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return PairStore(noise, data, conds, seeds, teacher.V, teacher.fingerprint(), solver_cfg)

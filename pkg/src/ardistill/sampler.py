"""Few-step generation along a timestep path, optionally with a teacher segment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NoiseSeq, TokenSeq, TrajectoryPoint, concat_mixed
from .flowmatch import SolverConfig
from .teacher import categorical
from .trajgen import complete_tokens


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class StepReport:
    student: int
    teacher: int

    @property
    def total(self):
        return self.student + self.teacher

    def as_dict(self):
        return {"student_steps": self.student, "teacher_steps": self.teacher, "total_steps": self.total}


@dataclass(frozen=True)
class SamplePath:
    timesteps: tuple
    t_s: Optional[int] = None

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if not ts or ts[0] != 1:
            raise PathError("a sampling path must start at t = 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise PathError("path timesteps must be strictly increasing")
        if self.t_s is not None:
            if len(ts) != 2:
                raise PathError("hybrid sampling uses exactly two student timesteps {1, t_k2}")
            if not ts[0] < self.t_s < ts[1]:
                raise PathError(f"hybrid start t_s={self.t_s} must satisfy {ts[0]} < t_s < {ts[1]}")

    def check(self, model):
        allowed = set(model.schedule.timesteps)
        missing = [t for t in self.timesteps if t not in allowed]
        if missing:
            raise PathError(f"timesteps {missing} are not in the trained schedule {model.schedule.timesteps}")

    @property
    def expected_steps(self):
        if self.t_s is None:
            return len(self.timesteps)
        return 2 + (self.timesteps[1] - self.t_s)


def _as_path(path, t_s=None):
    if isinstance(path, SamplePath):
        return path
    return SamplePath(tuple(path), t_s)


def draw_noise(rng, count, n, C):
    return rng.standard_normal((count, n, C)).astype(np.float32)


def sample_batch(model, path, noise, conditions, rng=None):
    """Multi-step sampling along ``path`` for a batch of initial noise X_1 (B, n, C).

    Returns (tokens (B, n), StepReport per sample).
    """
    path = _as_path(path)
    path.check(model)
    noise = np.asarray(noise)
    B, n, _ = noise.shape
    tokens = np.zeros((B, n), dtype=np.int64)
    start = model.calls
    for t in path.timesteps:
        # positions >= t are reset to the original noise inside predict_batch
        tokens = model.predict_batch(tokens, noise, t, conditions, rng)
    return tokens, StepReport(model.calls - start, 0)


def sample(model, path, condition=None, rng=None):
    rng = rng if rng is not None else np.random.default_rng()
    noise = draw_noise(rng, 1, model.n, model.C)
    cond = 0 if condition is None else condition
    tokens, report = sample_batch(model, path, noise, [cond], rng)
    return TokenSeq(tokens[0], cond), report


class CountingTeacher:
    """Wraps a teacher and counts next-token queries per sample (one batched call = one step)."""

    def __init__(self, teacher):
        self.teacher = teacher
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.teacher, name)

    def next_dists(self, prefixes, conditions):
        self.calls += 1
        return self.teacher.next_dists(prefixes, conditions)


def sample_hybrid_batch(model, teacher, path, t_s, noise, conditions, variant="deterministic",
                        solver_cfg: SolverConfig = SolverConfig(), rng=None):
    """Hybrid sampling: student at t=1, teacher regenerates t_s..t_k2-1, student at t_k2.

    ``variant='deterministic'`` maps the stored noise through the flow (a pure
    function of X_1); ``'stochastic'`` draws each teacher token categorically.
    """
    path = _as_path(path, t_s)
    if path.t_s is None:
        raise PathError("hybrid sampling needs t_s")
    path.check(model)
    t1, t2 = path.timesteps
    t_s = path.t_s
    noise = np.asarray(noise)
    B, n, _ = noise.shape
    conditions = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (B,))
    counted = CountingTeacher(teacher)
    start = model.calls
    tokens = model.predict_batch(np.zeros((B, n), dtype=np.int64), noise, t1, conditions, rng)
    seqs = tokens[:, :t_s - 1]
    for pos in range(t_s, t2):
        if variant == "deterministic":
            seqs = complete_tokens(counted, noise[:, :pos], conditions, solver_cfg, prefix=seqs)
        elif variant == "stochastic":
            rng = rng if rng is not None else np.random.default_rng()
            p = counted.next_dists(seqs, conditions)
            seqs = np.concatenate([seqs, categorical(p, rng.random(B))[:, None]], axis=1)
        else:
            raise ValueError(f"unknown hybrid variant {variant!r}")
    tokens = np.zeros((B, n), dtype=np.int64)
    tokens[:, :t2 - 1] = seqs
    tokens = model.predict_batch(tokens, noise, t2, conditions, rng)
    return tokens, StepReport(model.calls - start, counted.calls)


def sample_hybrid(model, teacher, path, t_s, condition=None, rng=None, variant="deterministic",
                  solver_cfg: SolverConfig = SolverConfig()):
    rng = rng if rng is not None else np.random.default_rng()
    noise = draw_noise(rng, 1, model.n, model.C)
    cond = 0 if condition is None else condition
    tokens, report = sample_hybrid_batch(model, teacher, path, t_s, noise, [cond], variant, solver_cfg, rng)
    return TokenSeq(tokens[0], cond), report


def jump_back(current, x1, t: int) -> TrajectoryPoint:
    """Keep the first t-1 tokens of ``current`` and restore the original noise from position t."""
    ids = current.ids if isinstance(current, TokenSeq) else tuple(current)
    values = x1.values if isinstance(x1, NoiseSeq) else np.asarray(x1)
    n = len(ids)
    if not 1 <= t <= n + 1:
        raise IndexError(f"t={t} outside [1, {n + 1}]")
    cond = current.condition if isinstance(current, TokenSeq) else None
    return concat_mixed(ids[:t - 1], values[t - 1:], t, cond)


class OracleStudent:
    """A perfectly distilled student: predicts by running the teacher's trajectory from X_t.

    Exposes the same ``predict_batch`` surface as StudentModel and trains on
    every timestep 1..n.
    """

    def __init__(self, teacher, solver_cfg: SolverConfig = SolverConfig()):
        from .student import TimestepSchedule

        self.teacher = teacher
        self.solver_cfg = solver_cfg
        self.n = teacher.n
        self.codebook = teacher.codebook
        self.schedule = TimestepSchedule(tuple(range(1, teacher.n + 1)))
        self.calls = 0

    @property
    def C(self):
        return self.codebook.C

    def predict_batch(self, tokens, noise, t, conditions, rng=None):
        noise = np.asarray(noise)
        B, n, _ = noise.shape
        out = np.zeros((B, n), dtype=np.int64)
        if t > 1:
            out[:, :t - 1] = np.asarray(tokens)[:, :t - 1]
        if t == n + 1:
            return out
        self.calls += 1
        return complete_tokens(self.teacher, noise, conditions, self.solver_cfg, prefix=out[:, :t - 1])

    def predict_final(self, xt: TrajectoryPoint, t=None, condition=None, rng=None):
        t = xt.t if t is None else t
        cond = xt.condition if condition is None else condition
        cond = 0 if cond is None else cond
        tokens = np.zeros((1, xt.n), dtype=np.int64)
        tokens[0, :t - 1] = xt.prefix
        noise = np.zeros((1, xt.n, self.C), dtype=np.float32)
        noise[0, t - 1:] = xt.suffix
        return TokenSeq(self.predict_batch(tokens, noise, t, [cond])[0], cond)

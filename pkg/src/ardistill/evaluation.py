"""Distribution-level fidelity: exact joints by enumeration, empirical joints, TV and MI."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .teacher import _cond

DENSE_LIMIT = 10 ** 6
CSV_COLUMNS = ("system", "steps", "tv_joint", "tv_marginal_mean", "wall_ms", "samples")


class SizeGuardError(ValueError):
    pass


@dataclass(eq=False)
class JointDist:
    """Distribution over V**n sequences; ``probs`` is dense (flat, base-V indices) or a dict."""

    n: int
    V: int
    probs: object
    samples: int = 0

    @property
    def dense(self):
        return isinstance(self.probs, np.ndarray)

    def total(self):
        return float(self.probs.sum()) if self.dense else float(sum(self.probs.values()))

    def as_dict(self):
        if self.dense:
            nz = np.nonzero(self.probs)[0]
            return {int(i): float(self.probs[i]) for i in nz}
        return dict(self.probs)

    def prob(self, seq):
        idx = encode(np.asarray(seq)[None], self.V)[0]
        return float(self.probs[idx]) if self.dense else self.probs.get(int(idx), 0.0)

    def to_dense(self):
        if self.dense:
            return self.probs
        if self.V ** self.n > DENSE_LIMIT:
            raise SizeGuardError("outcome space too large for a dense table")
        out = np.zeros(self.V ** self.n)
        for k, v in self.probs.items():
            out[k] = v
        return out

    def marginals(self):
        """(n, V) per-position marginals."""
        out = np.zeros((self.n, self.V))
        items = self.as_dict().items()
        keys = np.array([k for k, _ in items], dtype=np.int64)
        vals = np.array([v for _, v in items])
        digits = decode(keys, self.n, self.V)
        for j in range(self.n):
            np.add.at(out[j], digits[:, j], vals)
        return out

    def pair_marginal(self, i, j):
        out = np.zeros((self.V, self.V))
        items = self.as_dict().items()
        keys = np.array([k for k, _ in items], dtype=np.int64)
        vals = np.array([v for _, v in items])
        digits = decode(keys, self.n, self.V)
        np.add.at(out, (digits[:, i], digits[:, j]), vals)
        return out


def encode(seqs, V):
    """Sequences (M, n) -> base-V integers, first position most significant."""
    seqs = np.asarray(seqs, dtype=np.int64)
    w = V ** np.arange(seqs.shape[1] - 1, -1, -1, dtype=np.int64)
    return seqs @ w


def decode(idx, n, V):
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((len(idx), n), dtype=np.int64)
    for j in range(n - 1, -1, -1):
        out[:, j] = idx % V
        idx = idx // V
    return out


def exact_joint(teacher, condition=None) -> JointDist:
    """Chain-rule probability of every sequence, expanding prefixes level by level."""
    n, V = teacher.n, teacher.V
    if V ** n > DENSE_LIMIT:
        raise SizeGuardError(f"V**n = {V}**{n} exceeds the enumeration limit {DENSE_LIMIT}")
    prefixes = np.zeros((1, 0), dtype=np.int64)
    probs = np.ones(1)
    for _ in range(n):
        p = teacher.next_dists(prefixes, np.full(len(prefixes), _cond(condition)))
        probs = (probs[:, None] * p).reshape(-1)
        prefixes = np.concatenate([np.repeat(prefixes, V, axis=0),
                                   np.tile(np.arange(V), len(prefixes))[:, None]], axis=1)
    return JointDist(n, V, probs)


def joint_from_table(table) -> JointDist:
    """Product-of-marginals joint of a per-position table."""
    probs = np.ones(1)
    for row in table.probs:
        probs = (probs[:, None] * row[None]).reshape(-1)
    return JointDist(table.n, table.V, probs)


def empirical_joint(sampler, M, n, V) -> JointDist:
    """Frequency estimate from ``sampler(M) -> (M, n)`` token array."""
    if M < 1:
        raise ValueError("need at least one sample")
    seqs = np.asarray(sampler(M), dtype=np.int64).reshape(M, n)
    return joint_from_samples(seqs, V)


def joint_from_samples(seqs, V) -> JointDist:
    seqs = np.asarray(seqs, dtype=np.int64)
    M, n = seqs.shape
    keys = encode(seqs, V)
    if V ** n <= DENSE_LIMIT:
        probs = np.bincount(keys, minlength=V ** n) / M
    else:
        uniq, counts = np.unique(keys, return_counts=True)
        probs = {int(k): c / M for k, c in zip(uniq, counts)}
    return JointDist(n, V, probs, M)


def tv_halfwidth(V, n, M):
    """Rough Monte-Carlo floor of the empirical TV: sqrt(V**n / M) / 2."""
    return float(np.sqrt(float(V) ** n / M) / 2.0)


def tv_distance(a: JointDist, b: JointDist) -> float:
    if (a.n, a.V) != (b.n, b.V):
        raise ValueError("distributions live on different outcome spaces")
    if a.dense and b.dense:
        return float(0.5 * np.abs(a.probs - b.probs).sum())
    da, db = a.as_dict(), b.as_dict()
    keys = set(da) | set(db)
    return float(0.5 * sum(abs(da.get(k, 0.0) - db.get(k, 0.0)) for k in keys))


def tv_vectors(p, q):
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def mutual_information(pair):
    pair = np.asarray(pair, dtype=np.float64)
    pi = pair.sum(axis=1, keepdims=True)
    pj = pair.sum(axis=0, keepdims=True)
    mask = pair > 0
    return float(np.sum(pair[mask] * np.log(pair[mask] / (pi @ pj)[mask])))


def pairwise_mi(joint: JointDist):
    return {(i, j): mutual_information(joint.pair_marginal(i, j)) for i, j in combinations(range(joint.n), 2)}


def mi_gap(a: JointDist, b: JointDist) -> float:
    """Mean absolute difference of pairwise mutual information."""
    if a.n < 2:
        return 0.0
    ma, mb = pairwise_mi(a), pairwise_mi(b)
    return float(np.mean([abs(ma[k] - mb[k]) for k in ma]))


@dataclass
class EvalReport:
    system: str
    steps: int
    tv_joint: float
    tv_marginals: list
    mi_gap: float
    student_steps: int = 0
    teacher_steps: int = 0
    wall_ms: float = 0.0
    samples: int = 0
    half_width: float = 0.0
    speedup: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1e-12 <= self.tv_joint <= 1 + 1e-12:
            raise ValueError(f"TV out of range: {self.tv_joint}")

    @property
    def tv_marginal_mean(self):
        return float(np.mean(self.tv_marginals)) if len(self.tv_marginals) else 0.0

    def to_kv(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d["tv_marginals"] = ",".join(f"{x:.6g}" for x in self.tv_marginals)
        d["tv_marginal_mean"] = self.tv_marginal_mean
        d.update({f"extra.{k}": v for k, v in extra.items()})
        return "\n".join(f"{k}={_fmt(v)}" for k, v in d.items()) + "\n"

    def csv_row(self):
        return {"system": self.system, "steps": self.steps, "tv_joint": _fmt(self.tv_joint),
                "tv_marginal_mean": _fmt(self.tv_marginal_mean), "wall_ms": _fmt(self.wall_ms),
                "samples": self.samples}


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def write_csv(reports, fh=None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue() if fh is None else ""


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["steps"] = int(r["steps"])
        r["samples"] = int(r["samples"])
        for k in ("tv_joint", "tv_marginal_mean", "wall_ms"):
            r[k] = float(r[k])
    return rows


def compare(system, truth: JointDist, est: JointDist, student_steps=0, teacher_steps=0, wall_ms=0.0,
            reference_steps=None, **extra) -> EvalReport:
    mt, me = truth.marginals(), est.marginals()
    steps = student_steps + teacher_steps
    ref = truth.n if reference_steps is None else reference_steps
    return EvalReport(
        system=system, steps=steps, tv_joint=tv_distance(truth, est),
        tv_marginals=[tv_vectors(a, b) for a, b in zip(mt, me)], mi_gap=mi_gap(truth, est),
        student_steps=student_steps, teacher_steps=teacher_steps, wall_ms=wall_ms,
        samples=est.samples, half_width=tv_halfwidth(truth.V, truth.n, est.samples) if est.samples else 0.0,
        speedup=ref / steps if steps else float("inf"), extra=extra)


def evaluate_system(system, sampler, truth: JointDist, M, student_steps=0, teacher_steps=0, **extra):
    """Draw M sequences from ``sampler(M)`` and compare with ``truth``."""
    t0 = time.perf_counter()
    est = empirical_joint(sampler, M, truth.n, truth.V)
    wall = (time.perf_counter() - t0) * 1000.0
    return compare(system, truth, est, student_steps, teacher_steps, wall, **extra)


def evaluate_run(teacher, student=None, M=100_000, config=None, condition=None, rng=None):
    """Score the teacher itself, onestep*, skip-n and the student's paths against the exact joint.

    ``config`` keys (all optional): ``paths`` (list of timestep tuples),
    ``hybrid`` (list of ((1, t_k2), t_s)), ``skip`` (list of n_skip values),
    ``solver`` (SolverConfig), ``variant``.
    """
    from .baselines import MarginalTable, skip_n_sample_batch
    from .flowmatch import SolverConfig
    from .sampler import draw_noise, sample_batch, sample_hybrid_batch
    from .teacher import ar_sample_batch

    config = dict(config or {})
    rng = rng if rng is not None else np.random.default_rng(0)
    truth = exact_joint(teacher, condition)
    n = teacher.n
    cond = _cond(condition)
    table = MarginalTable(truth.marginals())
    reports = [evaluate_system("teacher", lambda m: ar_sample_batch(teacher, m, rng, condition), truth, M,
                               teacher_steps=n)]
    reports.append(compare("onestep*", truth, joint_from_table(table), student_steps=1, exact=True))
    for k in config.get("skip", []):
        reports.append(evaluate_system(f"skip-{k}", lambda m, k=k: skip_n_sample_batch(teacher, k, m, rng, table),
                                       truth, M, teacher_steps=n - k, n_skip=k))
    if student is not None:
        solver = config.get("solver", SolverConfig())
        for path in config.get("paths", [(1,)]):
            steps = {}

            def run(m, path=path, steps=steps):
                toks, rep = sample_batch(student, path, draw_noise(rng, m, n, student.C), np.full(m, cond), rng)
                steps["s"] = rep.student
                return toks
            r = evaluate_system("dd-" + "-".join(map(str, path)), run, truth, M)
            r.student_steps = steps["s"]
            r.steps = steps["s"]
            r.speedup = n / r.steps
            reports.append(r)
        for path, t_s in config.get("hybrid", []):
            steps = {}

            def run(m, path=path, t_s=t_s, steps=steps):
                toks, rep = sample_hybrid_batch(student, teacher, path, t_s, draw_noise(rng, m, n, student.C),
                                                np.full(m, cond), config.get("variant", "deterministic"), solver, rng)
                steps["rep"] = rep
                return toks
            r = evaluate_system(f"dd-hybrid-{path[0]}-{t_s}-{path[1]}", run, truth, M)
            rep = steps["rep"]
            r.student_steps, r.teacher_steps, r.steps = rep.student, rep.teacher, rep.total
            r.speedup = n / r.steps
            reports.append(r)
    return reports

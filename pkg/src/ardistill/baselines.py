"""Baselines: the independent per-position model (onestep*) and skip-n truncation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TokenSeq
from .teacher import _cond, categorical


@dataclass(frozen=True, eq=False)
class MarginalTable:
    probs: np.ndarray  # (n, V)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2 or np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("marginal table rows must be probability vectors")
        object.__setattr__(self, "probs", p)

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def V(self):
        return self.probs.shape[1]


def _as_array(dataset):
    rows = [s.ids if isinstance(s, TokenSeq) else tuple(s) for s in dataset]
    return np.asarray(rows, dtype=np.int64)


def fit_onestep_star(dataset, V=None) -> MarginalTable:
    """Per-position token frequencies, the maximiser of the independent-token objective."""
    seqs = _as_array(dataset)
    if seqs.size == 0:
        raise ValueError("fit_onestep_star: empty dataset")
    V = int(seqs.max()) + 1 if V is None else V
    N, n = seqs.shape
    counts = np.zeros((n, V))
    for j in range(n):
        counts[j] = np.bincount(seqs[:, j], minlength=V)
    return MarginalTable(counts / N)


def sample_onestep_star(table: MarginalTable, rng, condition=None) -> TokenSeq:
    u = rng.random(table.n)
    return TokenSeq(categorical(table.probs, u), condition)


def sample_onestep_star_batch(table: MarginalTable, count, rng) -> np.ndarray:
    u = rng.random((count, table.n))
    return categorical(np.broadcast_to(table.probs, (count, table.n, table.V)), u)


def onestep_objective(dataset, table) -> float:
    """(1/N) sum_i (1/n) sum_j sum_k p_ijk log phat_jk with one-hot p_ijk."""
    seqs = _as_array(dataset)
    probs = table.probs if isinstance(table, MarginalTable) else np.asarray(table, dtype=np.float64)
    N, n = seqs.shape
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return float(logp[np.arange(n)[None, :], seqs].mean())


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, v.shape[1] + 1)
    cond = u - css / k > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def verify_prop1(dataset, candidates=None, trials=1000, scale=0.1, rng=None, V=None) -> dict:
    """Check that no alternative table scores higher than the frequency table.

    Alternatives are ``candidates`` if given, otherwise ``trials`` random
    perturbations of the frequency table projected back onto the simplex.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    best = fit_onestep_star(dataset, V)
    opt = onestep_objective(dataset, best)
    if candidates is None:
        candidates = [project_simplex(best.probs + rng.normal(0.0, scale, size=best.probs.shape))
                      for _ in range(trials)]
    values = np.array([onestep_objective(dataset, c) for c in candidates])
    # stationarity: lambda = sum_k sum_i p_ijk / N, which is 1 on every row
    seqs = _as_array(dataset)
    onehot_rows = np.stack([np.bincount(seqs[:, j], minlength=best.V) for j in range(seqs.shape[1])])
    lagrange = onehot_rows.sum(axis=1) / len(seqs)
    finite = values[np.isfinite(values)]
    return {
        "objective_at_frequencies": opt,
        "best_alternative": float(finite.max()) if finite.size else float("-inf"),
        "alternatives": len(values),
        "beaten_by": int(np.sum(values > opt + 1e-12)),
        "optimal": bool(np.all(values <= opt + 1e-12)),
        "lagrange_multiplier": lagrange.tolist(),
    }


def skip_n_sample_batch(teacher, n_skip, count, rng, table: MarginalTable = None, fill="marginal",
                        condition=None) -> np.ndarray:
    """Teacher samples the first n - n_skip tokens; the rest come from ``table``.

    With ``fill='truncate'`` only the generated prefix (count, n - n_skip) is returned.
    """
    n = teacher.n
    if not 0 <= n_skip < n:
        raise ValueError(f"n_skip={n_skip} outside [0, {n})")
    keep = n - n_skip
    seqs = np.zeros((count, 0), dtype=np.int64)
    conds = np.full(count, _cond(condition))
    for _ in range(keep):
        p = teacher.next_dists(seqs, conds)
        seqs = np.concatenate([seqs, categorical(p, rng.random(count))[:, None]], axis=1)
    if fill == "truncate" or n_skip == 0:
        return seqs
    if fill != "marginal":
        raise ValueError(f"unknown fill rule {fill!r}")
    if table is None:
        raise ValueError("marginal fill needs a per-position marginal table")
    u = rng.random((count, n_skip))
    rest = categorical(np.broadcast_to(table.probs[keep:], (count, n_skip, table.V)), u)
    return np.concatenate([seqs, rest], axis=1)


def skip_n_sample(teacher, n_skip, rng, table=None, fill="marginal", condition=None) -> TokenSeq:
    return TokenSeq(skip_n_sample_batch(teacher, n_skip, 1, rng, table, fill, condition)[0], condition)

"""Rectified-flow transport from a standard Gaussian onto a weighted set of codebook atoms.

With the straight-line interpolation phi(x0, x1, t) = (1-t) x0 + t x1 and
x0 ~ N(0, I), the state at time t given atom j is N(t c_j, (1-t)^2 I), so
the velocity field is a posterior-weighted average of (c_j - x)/(1-t).
Everything here is vectorised over a leading batch axis; each row may carry
its own probability vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Codebook, nearest_tokens

SCHEMES = ("euler", "heun")
GRIDS = ("warped", "uniform")
# weight of the log(1-t) term in the warped grid
WARP = 0.03


class SolverError(FloatingPointError):
    def __init__(self, step, message="non-finite ODE state"):
        super().__init__(f"{message} at solver step {step}")
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "heun"
    steps: int = 64
    t_end: float = 1.0 - 1e-4
    grid: str = "warped"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown solver scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.grid not in GRIDS:
            raise ValueError(f"unknown time grid {self.grid!r}; expected one of {GRIDS}")
        if int(self.steps) < 1:
            raise ValueError("solver steps must be >= 1")
        if not 0.0 < self.t_end <= 1.0:
            raise ValueError("t_end must lie in (0, 1]")
        if self.grid == "warped" and self.t_end >= 1.0:
            raise ValueError("the warped grid needs t_end < 1")


def perturb(x0, x1, t):
    """Straight-line interpolation between noise ``x0`` and data ``x1``."""
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)


def _as_batch(x, p, cb):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, cb.C)
    p = np.asarray(p, dtype=np.float64).reshape(-1, cb.V)
    if p.shape[0] == 1 and x.shape[0] > 1:
        p = np.broadcast_to(p, (x.shape[0], cb.V))
    if p.shape[0] != x.shape[0]:
        raise ValueError("need one probability vector per state (or a single shared one)")
    return x, p, single


def posterior_weights(x, t, p, cb: Codebook):
    """w_j proportional to p_j * exp(-|x - t c_j|^2 / (2 (1-t)^2)), normalised in log space."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"velocity undefined at t={t}; need 0 <= t < 1")
    x, p, single = _as_batch(x, p, cb)
    c = cb.entries.astype(np.float64)
    diff = x[:, None, :] - t * c[None]
    sq = np.sum(diff * diff, axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(p) - sq / (2.0 * (1.0 - t) ** 2)
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    return w[0] if single else w


def velocity(x, t, p, cb: Codebook):
    x_arr = np.asarray(x, dtype=np.float64)
    w = posterior_weights(x_arr, t, p, cb)
    # explicit reduction (not BLAS) keeps each row's result independent of the batch size
    mean_atom = np.sum(w[..., :, None] * cb.entries.astype(np.float64), axis=-2)
    return (mean_atom - x_arr) / (1.0 - t)


def noise_prediction(x, t, p, cb: Codebook):
    """Noise implied by the velocity: eps(x, t) = x - t V(x, t)."""
    return np.asarray(x, dtype=np.float64) - t * velocity(x, t, p, cb)


def data_prediction(x, t, p, cb: Codebook):
    """Endpoint implied by the velocity: x1_hat = x + (1-t) V(x, t)."""
    return np.asarray(x, dtype=np.float64) + (1.0 - t) * velocity(x, t, p, cb)


def time_grid(cfg: SolverConfig):
    """Step times from 0 to ``cfg.t_end``.

    The warped grid is uniform in u = t - WARP*log(1-t): evenly spaced early
    on, and with steps shrinking like 1-t near the end, where the field varies
    on that time scale and close atoms are pulled apart.
    """
    k = np.arange(int(cfg.steps) + 1) / int(cfg.steps)
    if cfg.grid == "uniform":
        return cfg.t_end * k
    u = (cfg.t_end - WARP * np.log1p(-cfg.t_end)) * k
    # Newton from above: the map is convex and increasing, so iterates fall monotonically onto the root
    t = np.minimum(u, cfg.t_end)
    for _ in range(50):
        t = t - (t - WARP * np.log1p(-t) - u) / (1.0 + WARP / (1.0 - t))
    t[0], t[-1] = 0.0, cfg.t_end
    return t


def solve_ode(x0, p, cb: Codebook, cfg: SolverConfig = SolverConfig(), return_path=False):
    """Integrate dx = V(x, t) dt from t = 0 to ``cfg.t_end`` with fixed steps.

    ``x0`` is (C,) or (B, C); ``p`` is (V,) or (B, V). With ``return_path`` the
    states at every grid time are returned too, shape (steps+1, B, C).
    """
    x, p, single = _as_batch(x0, p, cb)
    if not np.all(np.isfinite(x)):
        raise SolverError(0, "non-finite initial state")
    grid = time_grid(cfg)
    path = [x.copy()] if return_path else None
    for k in range(len(grid) - 1):
        t0, t1 = grid[k], grid[k + 1]
        dt = t1 - t0
        v0 = velocity(x, t0, p, cb)
        if cfg.scheme == "euler":
            x = x + dt * v0
        else:
            x_pred = x + dt * v0
            if t1 < 1.0:
                v1 = velocity(x_pred, t1, p, cb)
                x = x + 0.5 * dt * (v0 + v1)
            else:
                x = x_pred
        if not np.all(np.isfinite(x)):
            raise SolverError(k + 1)
        if return_path:
            path.append(x.copy())
    out = x[0] if single else x
    if return_path:
        path = np.stack(path)
        return out, (path[:, 0] if single else path)
    return out


def fm_map(eps, p, cb: Codebook, cfg: SolverConfig = SolverConfig()):
    """Deterministic token for noise ``eps`` under next-token distribution ``p``.

    Scalar index for a single (C,) input, an index array for a (B, C) batch.
    """
    eps = np.asarray(eps, dtype=np.float64)
    end = solve_ode(eps, p, cb, cfg)
    idx = nearest_tokens(np.atleast_2d(end), cb)
    return int(idx[0]) if eps.ndim == 1 else idx

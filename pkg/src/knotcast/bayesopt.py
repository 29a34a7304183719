"""GP-based Bayesian optimisation of knot SOH levels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import qmc

from .data import CellSeries
from .knots import KnotSpec, Trajectory, anchor_of, extract_knots, interp_error


def objective(
    levels: KnotSpec,
    fleet: Sequence[CellSeries],
    window: int = 5,
    anchor_cycle: int = 1,
    anchor_mode: str = "measured",
) -> float:
    """Fleet-mean interpolation error d(p) for the given knot levels."""
    if len(fleet) == 0:
        raise ValueError("objective needs at least one cell")
    errs = []
    for s in fleet:
        pts = extract_knots(s, levels, window)
        errs.append(interp_error(Trajectory.of(s), pts, anchor_of(s, anchor_cycle, anchor_mode)))
    return float(np.mean(errs))


class GpSurrogate:
    """Zero-mean GP with an anisotropic squared-exponential kernel on standardised targets."""

    def __init__(self, jitter: float = 1e-8, n_restarts: int = 5, seed=0):
        self.jitter = jitter
        self.n_restarts = n_restarts
        self.rng = np.random.default_rng(seed)
        self.signal_var = 1.0
        self.length_scales = None
        self.X = None
        self.y = None

    def _kernel(self, A, B, sf2, ls):
        d = (A[:, None, :] - B[None, :, :]) / ls
        return sf2 * np.exp(-0.5 * np.sum(d * d, axis=-1))

    def _nll(self, log_theta, X, z):
        sf2 = np.exp(log_theta[0])
        ls = np.exp(log_theta[1:])
        K = self._kernel(X, X, sf2, ls) + self.jitter * np.eye(len(X))
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return 1e25
        a = solve_triangular(L, z, lower=True)
        return float(0.5 * a @ a + np.sum(np.log(np.diag(L))))

    def fit(self, X, y) -> "GpSurrogate":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if len(X) == 0 or len(X) != len(y):
            raise ValueError("need at least one observation with matching inputs")
        self.X, self.y = X, y
        self.y_mean = float(y.mean())
        self.y_std = float(y.std()) or 1.0
        z = (y - self.y_mean) / self.y_std
        d = X.shape[1]
        bounds = [(np.log(1e-2), np.log(1e2))] + [(np.log(1e-2), np.log(1e1))] * d
        starts = [np.r_[0.0, np.full(d, np.log(0.3))]]
        for _ in range(self.n_restarts - 1):
            starts.append(np.array([self.rng.uniform(lo, hi) for lo, hi in bounds]))
        best = None
        if len(X) > 1:
            for s0 in starts:
                res = optimize.minimize(self._nll, s0, args=(X, z), method="L-BFGS-B", bounds=bounds)
                if best is None or res.fun < best.fun:
                    best = res
            theta = best.x
        else:
            theta = starts[0]
        self.signal_var = float(np.exp(theta[0]))
        self.length_scales = np.exp(theta[1:])
        K = self._kernel(X, X, self.signal_var, self.length_scales) + self.jitter * np.eye(len(X))
        self._chol = cho_factor(K, lower=True)
        self._alpha = cho_solve(self._chol, z)
        return self

    @property
    def best(self) -> float:
        return float(np.min(self.y))

    def predict(self, Xq):
        """Posterior mean and standard deviation in objective units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        ks = self._kernel(Xq, self.X, self.signal_var, self.length_scales)
        mu = ks @ self._alpha
        v = cho_solve(self._chol, ks.T)
        var = np.maximum(self.signal_var - np.sum(ks * v.T, axis=1), 0.0)
        return self.y_mean + self.y_std * mu, self.y_std * np.sqrt(var)


def ei_from_moments(mu, sigma, best, zeta=0.0):
    """Expected improvement for minimisation; zero where sigma is zero."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = best - mu - zeta
    out = np.zeros(np.broadcast(mu, sigma).shape)
    pos = sigma > 0
    z = imp[pos] / sigma[pos]
    out[pos] = imp[pos] * stats.norm.cdf(z) + sigma[pos] * stats.norm.pdf(z)
    return np.maximum(out, 0.0)


def expected_improvement(g: GpSurrogate, points, zeta: float = 0.0):
    mu, sigma = g.predict(points)
    return ei_from_moments(mu, sigma, g.best, zeta)


@dataclass
class LevelBox:
    """Maps the unit box onto ordered free levels in [eol + gap, top - gap]."""

    k: int
    eol: float = 80.0
    top: float = 98.0
    gap: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        self.lo = self.eol + self.gap
        self.hi = self.top - self.gap
        self.slack = self.hi - self.lo - (self.k - 2) * self.gap
        if self.slack <= 0:
            raise ValueError(f"no room for {self.k - 1} free levels between {self.lo} and {self.hi}")

    @property
    def dim(self) -> int:
        return self.k - 1

    def canonical(self, u) -> np.ndarray:
        return np.sort(np.clip(np.asarray(u, dtype=float), 0.0, 1.0))

    def to_spec(self, u) -> KnotSpec:
        u = self.canonical(u)
        asc = self.lo + u * self.slack + np.arange(self.dim) * self.gap
        return KnotSpec(tuple(asc[::-1]) + (self.eol,), self.eol, self.top)

    def from_spec(self, spec: KnotSpec) -> np.ndarray:
        asc = np.array(spec.soh_levels[:-1][::-1])
        return (asc - self.lo - np.arange(self.dim) * self.gap) / self.slack


@dataclass
class BoResult:
    best_levels: KnotSpec
    best_objective: float
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "best_levels": self.best_levels.to_dict(),
            "best_objective": self.best_objective,
            "history": [{"levels": list(s.soh_levels), "objective": d} for s, d in self.history],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _maximise_ei(g: GpSurrogate, dim: int, rng, zeta: float, n_random=2000, n_local=5):
    cand = rng.uniform(size=(n_random, dim))
    ei = expected_improvement(g, cand, zeta)
    starts = cand[np.argsort(-ei, kind="stable")[:n_local]]
    best_u, best_v = starts[0], float(ei.max())
    for s0 in starts:
        res = optimize.minimize(
            lambda u: -float(expected_improvement(g, u[None], zeta)[0]),
            s0,
            method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * dim,
        )
        if -res.fun > best_v:
            best_u, best_v = res.x, -float(res.fun)
    return best_u, best_v


def optimize_knots(
    fleet: Sequence[CellSeries],
    k: int = 3,
    budget: int = 60,
    seed=0,
    eol: float = 80.0,
    top: float = 98.0,
    n_init: int | None = None,
    zeta: float = 0.0,
    window: int = 5,
    anchor_cycle: int = 1,
) -> BoResult:
    """Latin-hypercube design followed by EI-driven evaluations until ``budget`` is spent."""
    box = LevelBox(k, eol, top)
    n_init = 5 * box.dim if n_init is None else n_init
    if budget < n_init:
        raise ValueError(f"budget {budget} smaller than the initial design {n_init}")
    rng = np.random.default_rng(seed)

    def f(spec):
        return objective(spec, fleet, window, anchor_cycle)

    design = qmc.LatinHypercube(d=box.dim, seed=rng).random(n_init)
    U, ys, history = [], [], []
    for u in design:
        u = box.canonical(u)
        spec = box.to_spec(u)
        U.append(u), ys.append(f(spec)), history.append((spec, ys[-1]))

    gp = GpSurrogate(seed=rng.integers(2**32))
    while len(ys) < budget:
        gp.fit(np.array(U), np.array(ys))
        u, _ = _maximise_ei(gp, box.dim, rng, zeta)
        u = box.canonical(u)
        if np.min(np.max(np.abs(np.array(U) - u), axis=1)) < 1e-9:
            u = box.canonical(rng.uniform(size=box.dim))
        spec = box.to_spec(u)
        U.append(u), ys.append(f(spec)), history.append((spec, ys[-1]))

    i = int(np.argmin(ys))
    return BoResult(history[i][0], float(ys[i]), history)

"""Bacon-Watts knee identification by Levenberg-Marquardt least squares.

Y(x) = a0 + a1 (x - x1) + a2 (x - x1) tanh((x - x1) / gamma)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLASS_EDGES = (500.0, 1100.0)
PARAM_NAMES = ("alpha0", "alpha1", "alpha2", "x1", "gamma")
# log gamma in half-range units; the per-step change is capped at one e-fold
LOG_GAMMA_BOUNDS = (np.log(1e-3), np.log(1.0))


@dataclass(frozen=True)
class BaconWattsFit:
    alpha0: float
    alpha1: float
    alpha2: float
    x1: float
    gamma: float
    residual_rms: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.alpha0, self.alpha1, self.alpha2, self.x1, self.gamma])

    def __call__(self, x):
        return bw_model(x, self.params)

    @property
    def low_curvature(self) -> bool:
        return bool(self.diagnostics.get("low_curvature", False))


def bw_model(x, params) -> np.ndarray:
    a0, a1, a2, x1, g = params
    dx = np.asarray(x, dtype=float) - x1
    return a0 + a1 * dx + a2 * dx * np.tanh(dx / g)


def bw_jacobian(x, params) -> np.ndarray:
    """Closed-form partials of Y in (a0, a1, a2, x1, gamma), shape (n, 5)."""
    a0, a1, a2, x1, g = params
    dx = np.asarray(x, dtype=float) - x1
    s = dx / g
    th = np.tanh(s)
    sech2 = 1.0 - th * th
    J = np.empty((len(dx), 5))
    J[:, 0] = 1.0
    J[:, 1] = dx
    J[:, 2] = dx * th
    J[:, 3] = -a1 - a2 * (th + s * sech2)
    J[:, 4] = -a2 * s * s * sech2
    return J


def _lm(u, y, theta, max_iter, lam0=1e-3):
    """LM on theta = (a0, b1, b2, u1, log g) in normalised coordinates."""

    def unpack(th):
        return np.array([th[0], th[1], th[2], th[3], np.exp(th[4])])

    def cost_of(th):
        r = y - bw_model(u, unpack(th))
        return 0.5 * float(r @ r), r

    lam = lam0
    cost, r = cost_of(theta)
    costs = [cost]
    converged = False
    reason = "max_iter"
    it = 0
    while it < max_iter:
        it += 1
        p = unpack(theta)
        J = bw_jacobian(u, p)
        J[:, 4] *= p[4]  # chain rule for log gamma
        A = J.T @ J
        g = J.T @ r
        D = np.maximum(np.diag(A), 1e-12)
        accepted = False
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(D), g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                trial = theta + step
                trial[3] = np.clip(trial[3], -1.0, 1.0)
                trial[4] = np.clip(trial[4], theta[4] - 1.0, theta[4] + 1.0)
                trial[4] = np.clip(trial[4], *LOG_GAMMA_BOUNDS)
                new_cost, new_r = cost_of(trial)
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    break
                if np.linalg.norm(step) < 1e-12:
                    converged, reason = True, "step_norm"
                    break
            lam *= 10.0
            if lam > 1e16:
                reason = "singular"
                break
        if not accepted:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        snorm = float(np.linalg.norm(trial - theta))
        theta, cost, r = trial, new_cost, new_r
        costs.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel < 1e-10 or snorm < 1e-12 or cost == 0.0:
            converged, reason = True, "cost_change" if rel < 1e-10 else "step_norm"
            break
    return theta, cost, converged, it, {"reason": reason, "costs": costs, "lambda": lam}


def fit_bacon_watts(cycles, soh, init=None, max_iter: int = 200, n_starts: int = 5) -> BaconWattsFit:
    x = np.asarray(cycles, dtype=float)
    y = np.asarray(soh, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("cycles and soh must be equal-length 1-D arrays")
    if len(x) < 10:
        raise ValueError(f"need at least 10 points, got {len(x)}")
    if np.any(np.diff(x) <= 0):
        raise ValueError("cycles must be strictly increasing")

    center = 0.5 * (x[0] + x[-1])
    scale = 0.5 * (x[-1] - x[0])
    u = (x - center) / scale

    if init is not None:
        a0, a1, a2, x1, g = np.asarray(init, dtype=float)
        starts = [np.array([a0, a1 * scale, a2 * scale, (x1 - center) / scale, np.log(g / scale)])]
    else:
        slope = np.polyfit(u, y, 1)[0]
        starts = [
            np.array([y.mean(), slope, slope, u1, np.log(0.2)])
            for u1 in np.linspace(-0.8, 0.8, n_starts)
        ]

    best = None
    for th0 in starts:
        res = _lm(u, y, th0.copy(), max_iter)
        if best is None or res[1] < best[1]:
            best = res
    theta, cost, converged, iters, diag = best

    a0, b1, b2, u1, lg = theta
    params = np.array([a0, b1 / scale, b2 / scale, center + u1 * scale, np.exp(lg) * scale])
    fitted = bw_model(x, params)
    rms = float(np.sqrt(np.mean((y - fitted) ** 2)))
    # size of the kink: departure of the fitted curve from its own best line
    line = np.polyval(np.polyfit(x, fitted, 1), x)
    kink = float(np.sqrt(np.mean((fitted - line) ** 2)))
    diag = dict(diag, kink_rms=kink, low_curvature=kink < 2.0 * rms)
    return BaconWattsFit(*map(float, params), rms, bool(converged), int(iters), diag)


def knee_class(x1: float) -> str:
    if x1 < 0:
        raise ValueError(f"knee cycle must be >= 0, got {x1}")
    if x1 < CLASS_EDGES[0]:
        return "C1"
    if x1 < CLASS_EDGES[1]:
        return "C2"
    return "C3"


def class_index(x1: float) -> int:
    return int(knee_class(x1)[1]) - 1


def knee_of(series) -> BaconWattsFit:
    """Fit SOH fraction against cycle for a CellSeries."""
    return fit_bacon_watts(series.cycles.astype(float), series.soh)


def write_fits_csv(rows, path) -> None:
    """rows: iterable of (cell_id, BaconWattsFit)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell_id", "x1", "gamma", "alpha0", "alpha1", "alpha2", "residual_rms", "class"])
        for cell_id, fit in rows:
            w.writerow(
                [cell_id]
                + [f"{v:.10g}" for v in (fit.x1, fit.gamma, fit.alpha0, fit.alpha1, fit.alpha2, fit.residual_rms)]
                + [knee_class(max(fit.x1, 0.0))]
            )

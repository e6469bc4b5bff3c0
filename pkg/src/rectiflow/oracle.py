"""Ground truth that does not go through the simulators.

* exact Gaussian moment evolution for linear-drift SDEs/ODEs,
* coefficient transcriptions of every process as a :class:`LinearDriftSpec`,
* a brute-force LQR minimizer,
* the zero-flux (stationary profile) check for the forward RF SDE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .core import DEFAULT_DELTA, TimeGrid
from .fields import InterpolationMarginal, OUMarginal, VectorField, conditional_lqr_field


def _zero(t):
    return 0.0


@dataclass(frozen=True)
class LinearDriftSpec:
    """``dY = (A(t) Y + b(t) + k(t) * grad log q_t(Y)) dt + g(t) dW``.

    ``q_t`` is the process's own marginal. With Gaussian ``q_t`` the score
    term is linear too, so mean and variance close:

        m' = A m + b,      P' = 2 A P - 2 k + g^2.
    """

    A: Callable[[float], float]
    b: Callable[[float], np.ndarray]
    g: Callable[[float], float] = _zero
    score_coef: Callable[[float], float] = _zero

    def drift(self, x, t, mean, var) -> np.ndarray:
        """Drift evaluated with the Gaussian score of ``N(mean, var)``."""
        x = np.asarray(x, dtype=float)
        return self.A(t) * x + self.b(t) - self.score_coef(t) * (x - mean) / var


@dataclass(frozen=True)
class MomentState:
    mean: np.ndarray
    var_diag: np.ndarray


class MomentPath(Sequence):
    """Moments on a grid, plus dense interpolation between grid points."""

    def __init__(self, times, means, variances, dense=None, d=1):
        self.times = np.asarray(times)
        self.means = np.asarray(means)
        self.variances = np.asarray(variances)
        self._dense = dense
        self._d = d

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        return MomentState(self.means[i], self.variances[i])

    @property
    def terminal(self) -> MomentState:
        return self[-1]

    def _eval(self, t):
        y = self._dense(float(t))
        return y[: self._d], y[self._d:]

    def mean(self, t) -> np.ndarray:
        return self._eval(t)[0]

    def var(self, t) -> np.ndarray:
        return self._eval(t)[1]

    def score_field(self, label: str = "self_consistent") -> VectorField:
        """Gaussian score of the moment trajectory: ``-(x - m(t)) / P(t)``."""

        def s(x, t):
            m, p = self._eval(t)
            return -(x - m) / p

        return VectorField(s, label)


def integrate_moments(spec: LinearDriftSpec, init: MomentState, grid: TimeGrid,
                      rtol: float = 1e-11, atol: float = 1e-15) -> MomentPath:
    """Mean/variance trajectory of ``spec`` on ``grid`` (8th-order Dormand-Prince)."""
    m0 = np.atleast_1d(np.asarray(init.mean, dtype=float))
    p0 = np.broadcast_to(np.asarray(init.var_diag, dtype=float), m0.shape).astype(float)
    d = m0.size

    def rhs(t, y):
        m, p = y[:d], y[d:]
        a = spec.A(t)
        g = spec.g(t)
        return np.concatenate([a * m + spec.b(t), 2 * a * p - 2 * spec.score_coef(t) + g * g])

    t0, t1 = float(grid.t_start), float(grid.t_end)
    max_step = np.inf
    for _ in range(2):
        sol = solve_ivp(rhs, (t0, t1), np.concatenate([m0, p0]), method="DOP853", t_eval=grid.times,
                        dense_output=True, rtol=rtol, atol=atol, max_step=max_step)
        if not sol.success:
            raise RuntimeError(f"moment integration failed: {sol.message}")
        variances = sol.y[d:].T
        if np.all(variances >= 0):
            return MomentPath(sol.t, sol.y[:d].T, variances, sol.sol, d)
        max_step = (t1 - t0) / (2 * grid.steps)
    raise RuntimeError("variance went negative during moment integration")


# ------------------------------------------------ coefficient transcriptions


def _vec(v):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return v


def fwd_rf_sde_linear(delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dY = -Y/(1-t) dt + sqrt(2t/(1-t)) dW``."""
    return fwd_ctrl_sde_linear(0.0, 0.0, delta)


def fwd_ctrl_sde_linear(gamma: float, y1, delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dY = -(Y - gamma y1)/(1-t) dt + sqrt(2(1-gamma) t/(1-t)) dW``."""
    y1 = _vec(y1)

    def tc(t):
        return min(t, 1 - delta)

    return LinearDriftSpec(
        A=lambda t: -1.0 / (1 - tc(t)),
        b=lambda t: gamma * y1 / (1 - tc(t)),
        g=lambda t: math.sqrt(2 * (1 - gamma) * tc(t) / (1 - tc(t))),
    )


def fwd_ctrl_ode_self_consistent_linear(gamma: float, y1, delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dY = [-(Y - gamma y1)/(1-t) - (1-gamma) t/(1-t) grad log p_t(Y)] dt`` with ``p_t`` the own law."""
    y1 = _vec(y1)

    def tc(t):
        return min(t, 1 - delta)

    return LinearDriftSpec(
        A=lambda t: -1.0 / (1 - tc(t)),
        b=lambda t: gamma * y1 / (1 - tc(t)),
        score_coef=lambda t: -(1 - gamma) * tc(t) / (1 - tc(t)),
    )


def fwd_ctrl_ode_interpolation_linear(gamma: float, y1, marginal: InterpolationMarginal,
                                      delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """Controlled forward ODE whose score is the uncontrolled interpolation score (folded into A, b)."""
    y1 = _vec(y1)

    def tc(t):
        return min(t, 1 - delta)

    def A(t):
        t = tc(t)
        return -1.0 / (1 - t) + (1 - gamma) * t / (1 - t) / marginal.var_at(t)

    def b(t):
        t = tc(t)
        return gamma * y1 / (1 - t) - (1 - gamma) * t / (1 - t) * marginal.mean_at(t) / marginal.var_at(t)

    return LinearDriftSpec(A=A, b=b)


def _rev_clip(t, delta):
    return min(max(t, delta), 1 - delta)


def rev_ctrl_sde_self_consistent_linear(eta: float, y0, delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dX = [((1-t-eta) X + eta t y0)/(t(1-t)) + 2(1-t)(1-eta)/t grad log q_t] dt + sqrt(2(1-t)(1-eta)/t) dW``."""
    y0 = _vec(y0)
    return LinearDriftSpec(
        A=lambda t: (1 - _rev_clip(t, delta) - eta) / (_rev_clip(t, delta) * (1 - _rev_clip(t, delta))),
        b=lambda t: eta * y0 / (1 - _rev_clip(t, delta)),
        g=lambda t: math.sqrt(2 * (1 - _rev_clip(t, delta)) * (1 - eta) / _rev_clip(t, delta)),
        score_coef=lambda t: 2 * (1 - _rev_clip(t, delta)) * (1 - eta) / _rev_clip(t, delta),
    )


def rev_ctrl_ode_self_consistent_linear(eta: float, y0, delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dX = [(1-eta)(X/t + (1-t)/t grad log q_t) + eta (y0 - X)/(1-t)] dt``."""
    y0 = _vec(y0)

    def tc(t):
        return max(t, delta)

    return LinearDriftSpec(
        A=lambda t: (1 - eta) / tc(t) - eta / (1 - min(tc(t), 1 - delta)),
        b=lambda t: eta * y0 / (1 - min(tc(t), 1 - delta)),
        score_coef=lambda t: (1 - eta) * (1 - tc(t)) / tc(t),
    )


def rev_ctrl_sde_interpolation_linear(eta: float, y0, marginal: InterpolationMarginal,
                                      delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """Reverse controlled SDE using the interpolation score at ``1 - t``."""
    y0 = _vec(y0)

    def A(t):
        t = _rev_clip(t, delta)
        k = 2 * (1 - t) * (1 - eta) / t
        return (1 - t - eta) / (t * (1 - t)) - k / marginal.var_at(1 - t)

    def b(t):
        t = _rev_clip(t, delta)
        k = 2 * (1 - t) * (1 - eta) / t
        return eta * y0 / (1 - t) + k * marginal.mean_at(1 - t) / marginal.var_at(1 - t)

    def g(t):
        t = _rev_clip(t, delta)
        return math.sqrt(2 * (1 - t) * (1 - eta) / t)

    return LinearDriftSpec(A=A, b=b, g=g)


def rf_rev_sde_interpolation_linear(marginal: InterpolationMarginal, delta: float = DEFAULT_DELTA) -> LinearDriftSpec:
    """``dX = [X/t + 2(1-t)/t grad log p_{1-t}(X)] dt + sqrt(2(1-t)/t) dW``."""
    return rev_ctrl_sde_interpolation_linear(0.0, np.zeros(marginal.dim), marginal, delta)


def ou_sde_linear(horizon: float = 1.0) -> LinearDriftSpec:
    return LinearDriftSpec(A=lambda t: -horizon, b=lambda t: 0.0, g=lambda t: math.sqrt(2 * horizon))


def ou_ode_linear(marginal: OUMarginal) -> LinearDriftSpec:
    """``dY = H(-Y - grad log p_t(Y)) dt`` with the exact OU score folded in."""
    h = marginal.horizon
    return LinearDriftSpec(
        A=lambda t: h * (-1.0 + 1.0 / marginal.var_at(t)),
        b=lambda t: -h * marginal.mean_at(t) / marginal.var_at(t),
    )


# ---------------------------------------------------------------- LQR


def lqr_cost(controls, y0, y1, lam: float) -> float:
    """Discretized ``sum 1/2 |c_k|^2 dt + lam/2 |Z_1 - y1|^2`` with ``Z_1 = y0 + sum c_k dt``."""
    c = np.atleast_2d(np.asarray(controls, dtype=float))
    dt = 1.0 / c.shape[0]
    z1 = np.asarray(y0, dtype=float) + c.sum(axis=0) * dt
    return float(0.5 * np.sum(c * c) * dt + 0.5 * lam * np.sum((z1 - np.asarray(y1, dtype=float)) ** 2))


def closed_form_lqr_controls(y0, y1, n_steps: int, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Controls ``(y1 - z_k)/(1 - t_k)`` applied along their own Euler path."""
    ctrl = conditional_lqr_field(np.asarray(y1, dtype=float), delta)
    z = np.asarray(y0, dtype=float).copy()
    out = []
    for k in range(n_steps):
        c = ctrl(z, k / n_steps)
        out.append(c)
        z = z + c / n_steps
    return np.array(out)


def lqr_bruteforce(y0, y1, lam: float, n_steps: int, tol: float = 1e-8, max_iter: int = 10_000):
    """Numerically minimize :func:`lqr_cost` over piecewise-constant controls.

    Returns ``(controls, cost)``.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    y1 = np.atleast_1d(np.asarray(y1, dtype=float))
    d = y0.size
    dt = 1.0 / n_steps

    def fun(flat):
        c = flat.reshape(n_steps, d)
        gap = y0 + c.sum(axis=0) * dt - y1
        cost = 0.5 * np.sum(c * c) * dt + 0.5 * lam * np.sum(gap * gap)
        grad = c * dt + lam * gap * dt
        return cost, grad.ravel()

    res = minimize(fun, np.zeros(n_steps * d), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol * dt, "ftol": 1e-16})
    _, grad = fun(res.x)
    if np.max(np.abs(grad)) > 1e3 * tol * dt and not res.success:
        raise RuntimeError(f"LQR optimizer did not converge: {res.message}")
    return res.x.reshape(n_steps, d), float(res.fun)


def lqr_finite_lambda_control(z, t: float, y1, lam: float) -> np.ndarray:
    """Finite-penalty controller ``-(1/lam + (1-t))^{-1} (z - y1)``."""
    z = np.asarray(z, dtype=float)
    return -(z - np.asarray(y1, dtype=float)) / (1.0 / lam + (1 - t))


# ---------------------------------------------------------------- stationary profile


@dataclass(frozen=True)
class ProfileReport:
    t: float
    n: int
    empirical_mean: np.ndarray
    empirical_var: np.ndarray
    profile_var: float
    interpolation_var: Optional[np.ndarray]
    rel_error: float
    tolerance: float
    passed: bool


def stationary_profile_check(samples, t: float, marginal: Optional[InterpolationMarginal] = None,
                             rel_tol: float = 0.05) -> ProfileReport:
    """Compare an ensemble at time ``t`` to the zero-flux profile ``exp(-|y|^2 / 2t)``.

    The profile is ``N(0, t I)``. Passes when every coordinate's variance is
    within ``max(rel_tol, 3 standard errors)`` of ``t`` and the mean within
    4 standard errors of 0.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n = x.shape[0]
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1)
    rel = float(np.max(np.abs(var - t) / t))
    tol = max(rel_tol, 3 * math.sqrt(2.0 / (n - 1)))
    mean_ok = bool(np.all(np.abs(mean) <= 4 * np.sqrt(var / n) + 1e-12))
    interp = None if marginal is None else marginal.var_at(t)
    return ProfileReport(t, n, mean, var, t, interp, rel, tol, rel <= tol and mean_ok)

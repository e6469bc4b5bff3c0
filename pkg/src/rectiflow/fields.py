"""Vector fields and score fields on the rectified (linear) interpolation path.

The interpolation is ``Y_t = t Y_1 + (1 - t) Y_0`` with ``Y_0 ~ p0`` and
``Y_1 ~ p1``. For Gaussian endpoints every marginal is Gaussian, so the
optimal rectified-flow field has a closed form and stands in for a trained
network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DEFAULT_DELTA, GaussianDist, clip_time

FieldFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class VectorField:
    """A pure map ``(x, t) -> vector`` with a short label.

    Used for drifts (``u_t``, ``v_t``, LQR controllers, remote models) and for
    score fields alike.
    """

    fn: FieldFn
    label: str = "field"

    def __call__(self, x, t) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=float), t)


def constant_field(value, label: str = "constant") -> VectorField:
    value = np.asarray(value, dtype=float)
    return VectorField(lambda x, t: np.broadcast_to(value, x.shape).copy(), label)


def _standard_p1(d: int) -> GaussianDist:
    return GaussianDist(np.zeros(d), np.ones(d))


@dataclass(frozen=True)
class InterpolationMarginal:
    """Endpoints of the linear path; ``p1`` defaults to ``N(0, I)``."""

    p0: GaussianDist
    p1: GaussianDist = field(default=None)

    def __post_init__(self):
        if self.p1 is None:
            object.__setattr__(self, "p1", _standard_p1(self.p0.dim))
        if self.p1.dim != self.p0.dim:
            raise ValueError("p0 and p1 must have the same dimension")

    @property
    def dim(self) -> int:
        return self.p0.dim

    def has_standard_p1(self) -> bool:
        return bool(np.all(self.p1.mean == 0.0) and np.all(self.p1.var_diag == 1.0))

    def mean_at(self, t):
        return (1 - t) * self.p0.mean + t * self.p1.mean

    def var_at(self, t):
        return (1 - t) ** 2 * self.p0.var_diag + t**2 * self.p1.var_diag

    def score(self, x, t) -> np.ndarray:
        """Score of ``marginal_at(t)`` without building the distribution object."""
        return -(np.asarray(x, dtype=float) - self.mean_at(t)) / self.var_at(t)


def marginal_at(m: InterpolationMarginal, t: float) -> GaussianDist:
    """Gaussian law of ``t Y_1 + (1 - t) Y_0`` for independent endpoints."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return m.p0
    if t == 1.0:
        return m.p1
    return GaussianDist(m.mean_at(t), m.var_at(t))


def _require_standard_p1(m: InterpolationMarginal):
    if not m.has_standard_p1():
        raise ValueError("the score/field correspondence assumes p1 = N(0, I)")


def interpolation_score_field(m: InterpolationMarginal, delta: float = DEFAULT_DELTA) -> VectorField:
    """``(x, t) -> grad log p_t(x)`` for the interpolation marginals, ``t`` clipped."""
    return VectorField(lambda x, t: m.score(x, clip_time(t, delta)), "interpolation_score")


def analytic_marginal_field(m: InterpolationMarginal, delta: float = DEFAULT_DELTA) -> VectorField:
    """Optimal rectified-flow field ``u_t`` for Gaussian endpoints.

    ``u_t(y) = -y/(1-t) - t/(1-t) * grad log p_t(y)`` with the exact Gaussian
    score plugged in. Time is clipped to ``1 - delta``.
    """
    _require_standard_p1(m)

    def u(y, t):
        t = clip_time(t, delta)
        return -y / (1 - t) - (t / (1 - t)) * m.score(y, t)

    return VectorField(u, "analytic_marginal")


def conditional_lqr_field(target, delta: float = DEFAULT_DELTA) -> VectorField:
    """Infinite-penalty LQR controller ``(target - x) / (1 - t)``.

    ``target`` may be a single state or one target per particle.
    """
    target = np.asarray(target, dtype=float)

    def c(x, t):
        t = clip_time(t, delta)
        return (target - x) / (1 - t)

    return VectorField(c, "lqr")


def reverse_field(u: VectorField) -> VectorField:
    """Generative field ``v_t(x) = -u_{1-t}(x)``."""
    return VectorField(lambda x, t: -u(x, 1.0 - t), f"reverse({u.label})")


def score_from_field(field: VectorField, x, t: float, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Score implied by a rectified-flow field: ``-y/t - (1-t)/t * u(y, t)``."""
    if t < delta:
        raise ValueError(f"score is singular at t=0; need t >= {delta}, got {t}")
    y = np.asarray(x, dtype=float)
    if t == 1.0:
        # the field coefficient vanishes; avoid evaluating the field at the singular end
        return -y
    return -y / t - ((1 - t) / t) * field(y, t)


def score_field_from_field(field: VectorField, delta: float = DEFAULT_DELTA) -> VectorField:
    """Lift :func:`score_from_field` to a field, with ``t`` clipped to ``[delta, 1]``."""

    def s(x, t):
        return score_from_field(field, x, float(np.clip(t, delta, 1.0)), delta)

    return VectorField(s, f"score({field.label})")


def field_from_score(score: VectorField, delta: float = DEFAULT_DELTA) -> VectorField:
    """Rectified-flow field from a score: ``-y/(1-t) - t/(1-t) * score(y, t)``."""

    def u(y, t):
        t = clip_time(t, delta)
        return -y / (1 - t) - (t / (1 - t)) * score(y, t)

    return VectorField(u, f"field({score.label})")


def tweedie_posterior_mean_y0(m: InterpolationMarginal, y, t: float, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """``E[Y_0 | Y_t = y] = y/(1-t) + t^2/(1-t) * grad log p_t(y)``."""
    _require_standard_p1(m)
    t = float(clip_time(t, delta))
    y = np.asarray(y, dtype=float)
    return y / (1 - t) + (t**2 / (1 - t)) * m.score(y, t)


@dataclass(frozen=True)
class OUMarginal:
    """Marginals of the unit OU process ``dY = -Y ds + sqrt(2) dW`` started at ``p0``.

    The process is run over physical time ``s in [0, horizon]`` and indexed
    by the unit clock ``t = s / horizon``.
    """

    p0: GaussianDist
    horizon: float = 1.0

    def mean_at(self, t):
        return np.exp(-self.horizon * t) * self.p0.mean

    def var_at(self, t):
        decay = np.exp(-2.0 * self.horizon * t)
        return decay * self.p0.var_diag + (1.0 - decay)

    def score(self, x, t) -> np.ndarray:
        return -(np.asarray(x, dtype=float) - self.mean_at(t)) / self.var_at(t)

    def score_field(self) -> VectorField:
        return VectorField(self.score, "ou_score")

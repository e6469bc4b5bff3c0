"""Euler / Euler-Maruyama drivers for the forward and reverse processes.

Every process runs on a forward-ticking clock over a :class:`TimeGrid`.
Reverse-direction processes apply the time flip inside their coefficients,
so no integrator ever sees a negative step.

Drifts take ``(x, t, target)`` where ``target`` is the optional per-particle
conditioning state (``y1`` going forward, ``y0`` going back). Keeping it out
of the closure lets the engine hand each worker its slice of particles.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from .control import ControlledDrift, GuidanceSchedule
from .core import (
    DEFAULT_DELTA,
    DimensionError,
    STREAM_FORWARD,
    PathBundle,
    TimeGrid,
    as_states,
    check_finite,
    standard_normal_block,
)
from .fields import VectorField, conditional_lqr_field, reverse_field

Drift = Callable[[np.ndarray, float, Optional[np.ndarray]], np.ndarray]

ODE_KINDS = frozenset({"fwd_ctrl_ode", "rev_ctrl_ode", "ou_fwd_ode", "generic_reverse_ode"})
SDE_KINDS = frozenset(
    {"fwd_ctrl_sde", "rev_ctrl_sde", "rf_fwd_sde", "rf_rev_sde", "ou_fwd_sde", "generic_reverse_sde"}
)
KINDS = ODE_KINDS | SDE_KINDS


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone map ``sigma: [0, 1] -> R`` that sets ODE step sizes."""

    sigma: Callable[[float], float]
    label: str = "identity"

    def increments(self, times: np.ndarray) -> np.ndarray:
        s = np.array([self.sigma(float(t)) for t in times])
        if not np.all(np.isfinite(s)):
            raise ValueError(f"noise schedule {self.label!r} is not finite on the grid")
        ds = np.diff(s)
        if np.any(ds < 0):
            raise ValueError(f"noise schedule {self.label!r} decreases on the grid")
        return ds


IDENTITY_SCHEDULE = NoiseSchedule(lambda t: t, "identity")


def noise_schedule(name: str) -> NoiseSchedule:
    """Parse ``identity`` or ``power:<p>`` (``sigma(t) = t**p``, ``p > 0``)."""
    if name == "identity":
        return IDENTITY_SCHEDULE
    if name.startswith("power:"):
        p = float(name.split(":", 1)[1])
        if not p > 0:
            raise ValueError("power schedule exponent must be positive")
        return NoiseSchedule(lambda t: t**p, name)
    raise ValueError(f"unknown sigma schedule {name!r}")


def _zero_diffusion(t: float) -> float:
    return 0.0


@dataclass(frozen=True)
class ProcessSpec:
    kind: str
    drift: Drift
    grid: TimeGrid
    diffusion: Callable[[float], float] = _zero_diffusion
    schedule: NoiseSchedule = IDENTITY_SCHEDULE
    target: Optional[np.ndarray] = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown process kind {self.kind!r}")

    @property
    def stochastic(self) -> bool:
        return self.kind in SDE_KINDS

    def drift_at(self, x, t) -> np.ndarray:
        return self.drift(np.asarray(x, dtype=float), t, self.target)


def euler_step(x: np.ndarray, drift: np.ndarray, dsigma: float, step: Optional[int] = None) -> np.ndarray:
    return check_finite(x + drift * dsigma, step)


def euler_maruyama_step(
    x: np.ndarray, drift: np.ndarray, g: float, dt: float, noise: np.ndarray, step: Optional[int] = None
) -> np.ndarray:
    if g < 0 or dt <= 0:
        raise ValueError(f"need g >= 0 and dt > 0, got g={g}, dt={dt}")
    return check_finite(x + drift * dt + g * math.sqrt(dt) * noise, step)


def _integrate(spec: ProcessSpec, x: np.ndarray, ids: np.ndarray, target, seed: int, stream: int, keep_paths: bool):
    times = spec.grid.times
    d = x.shape[1]
    paths = [x] if keep_paths else None
    dsig = None if spec.stochastic else spec.schedule.increments(times)
    for i in range(spec.grid.steps):
        t = float(times[i])
        f = spec.drift(x, t, target)
        if f.shape != x.shape:
            raise DimensionError(f"drift returned shape {f.shape} for states of shape {x.shape}")
        if spec.stochastic:
            g = float(spec.diffusion(t))
            z = standard_normal_block(seed, stream, i, ids, d)
            x = euler_maruyama_step(x, f, g, float(times[i + 1]) - t, z, step=i)
        else:
            x = euler_step(x, f, float(dsig[i]), step=i)
        if keep_paths:
            paths.append(x)
    return x, (np.stack(paths) if keep_paths else None)


def run_process(
    spec: ProcessSpec,
    init,
    seed: int,
    *,
    stream: int = STREAM_FORWARD,
    keep_paths: bool = False,
    n_jobs: int = 1,
    particle_ids=None,
) -> PathBundle:
    """Integrate ``spec`` from each initial state.

    Noise for particle ``p`` at step ``k`` is keyed by ``(seed, stream, k, p)``,
    so ``n_jobs`` never changes the result.
    """
    x0 = np.atleast_2d(as_states(init))
    n, d = x0.shape
    if n == 0:
        raise ValueError("init must contain at least one state")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ids = np.arange(n) if particle_ids is None else np.asarray(particle_ids, dtype=np.int64)
    target = spec.target
    if target is not None:
        target = np.atleast_2d(np.asarray(target, dtype=float))
        if target.shape[1] != d or target.shape[0] not in (1, n):
            raise DimensionError(f"target of shape {target.shape} does not fit {n} states of dimension {d}")
        target = np.broadcast_to(target, (n, d))

    if n_jobs <= 1 or n == 1:
        xT, paths = _integrate(spec, x0, ids, target, seed, stream, keep_paths)
    else:
        chunks = np.array_split(np.arange(n), min(n_jobs, n))

        def work(sel):
            tgt = None if target is None else target[sel]
            return _integrate(spec, x0[sel], ids[sel], tgt, seed, stream, keep_paths)

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(work, chunks))
        xT = np.concatenate([p[0] for p in parts])
        paths = np.concatenate([p[1] for p in parts], axis=1) if keep_paths else None
    return PathBundle(spec.grid.times, xT, seed, paths, ids)


def forward_grid(steps: int, delta: float = DEFAULT_DELTA) -> TimeGrid:
    """``[0, 1 - delta]``: forward processes stop short of the ``1/(1-t)`` pole."""
    return TimeGrid(steps, 0.0, 1.0 - delta, delta)


def reverse_ode_grid(steps: int, delta: float = DEFAULT_DELTA) -> TimeGrid:
    """``[delta, 1]``, the exact reflection of :func:`forward_grid`."""
    return TimeGrid(steps, delta, 1.0, delta)


def reverse_sde_grid(steps: int, delta: float = DEFAULT_DELTA) -> TimeGrid:
    """``[delta, 1 - delta]`` for reverse SDEs."""
    return TimeGrid(steps, delta, 1.0 - delta, delta)


def _as_schedule(s) -> GuidanceSchedule:
    return s if isinstance(s, GuidanceSchedule) else GuidanceSchedule.constant(float(s))


# ---------------------------------------------------------------- drivers


def forward_controlled_ode(base: VectorField, y1, gamma, grid: TimeGrid, schedule: NoiseSchedule = IDENTITY_SCHEDULE) -> ProcessSpec:
    """Unconditional field ``base`` blended with the LQR controller toward ``y1``."""
    gamma = _as_schedule(gamma)
    delta = grid.delta

    def drift(x, t, target):
        return ControlledDrift(base, conditional_lqr_field(target, delta), gamma)(x, t)

    return ProcessSpec("fwd_ctrl_ode", drift, grid, schedule=schedule, target=np.asarray(y1, dtype=float),
                       params={"gamma": gamma})


def reverse_controlled_ode(base: VectorField, y0, eta, grid: TimeGrid, schedule: NoiseSchedule = IDENTITY_SCHEDULE) -> ProcessSpec:
    """Generative field ``base`` (already on the reverse clock) blended toward ``y0``."""
    eta = _as_schedule(eta)
    delta = grid.delta

    def drift(x, t, target):
        return ControlledDrift(base, conditional_lqr_field(target, delta), eta)(x, t)

    return ProcessSpec("rev_ctrl_ode", drift, grid, schedule=schedule, target=np.asarray(y0, dtype=float),
                       params={"eta": eta})


def forward_controlled_sde(y1, gamma, grid: TimeGrid) -> ProcessSpec:
    """``dY = -(Y - g y1)/(1-t) dt + sqrt(2(1-g) t/(1-t)) dW`` with ``g = gamma(t)``."""
    gamma = _as_schedule(gamma)
    delta = grid.delta

    def drift(x, t, target):
        g = gamma.value_at(t)
        t = float(np.minimum(t, 1 - delta))
        return -(x - g * target) / (1 - t)

    def diffusion(t):
        g = gamma.value_at(t)
        t = float(np.minimum(t, 1 - delta))
        return math.sqrt(2 * (1 - g) * t / (1 - t))

    return ProcessSpec("fwd_ctrl_sde", drift, grid, diffusion, target=np.asarray(y1, dtype=float),
                       params={"gamma": gamma})


def rf_forward_sde(grid: TimeGrid) -> ProcessSpec:
    """Stochastic counterpart of the plain rectified flow: ``-Y/(1-t) dt + sqrt(2t/(1-t)) dW``."""
    delta = grid.delta

    def drift(x, t, target):
        t = float(np.minimum(t, 1 - delta))
        return -x / (1 - t)

    def diffusion(t):
        t = float(np.minimum(t, 1 - delta))
        return math.sqrt(2 * t / (1 - t))

    return ProcessSpec("rf_fwd_sde", drift, grid, diffusion)


def reverse_controlled_sde(y0, eta, score: VectorField, grid: TimeGrid) -> ProcessSpec:
    """Reverse SDE guided toward ``y0``; ``score(x, t)`` is on the reverse clock.

    Drift ``(1-e) x/t + e (y0 - x)/(1-t) + 2(1-t)(1-e)/t * score``, diffusion
    ``sqrt(2(1-t)(1-e)/t)``, which is the same as the combined-fraction form
    ``((1-t-e) x + e t y0) / (t(1-t))`` for the linear part.
    """
    eta = _as_schedule(eta)
    delta = grid.delta

    def drift(x, t, target):
        e = eta.value_at(t)
        t = float(np.clip(t, delta, 1 - delta))
        return (1 - e) * x / t + e * (target - x) / (1 - t) + 2 * (1 - t) * (1 - e) / t * score(x, t)

    def diffusion(t):
        e = eta.value_at(t)
        t = float(np.clip(t, delta, 1 - delta))
        return math.sqrt(2 * (1 - t) * (1 - e) / t)

    return ProcessSpec("rev_ctrl_sde", drift, grid, diffusion, target=np.asarray(y0, dtype=float),
                       params={"eta": eta})


def rf_reverse_sde(score: VectorField, grid: TimeGrid) -> ProcessSpec:
    """Noise-to-data SDE ``x/t + 2(1-t)/t * score`` with diffusion ``sqrt(2(1-t)/t)``."""
    delta = grid.delta

    def drift(x, t, target):
        t = float(np.clip(t, delta, 1 - delta))
        return 1 * x / t + 2 * (1 - t) / t * score(x, t)

    def diffusion(t):
        t = float(np.clip(t, delta, 1 - delta))
        return math.sqrt(2 * (1 - t) / t)

    return ProcessSpec("rf_rev_sde", drift, grid, diffusion)


def ou_forward_sde(grid: TimeGrid, horizon: float = 1.0) -> ProcessSpec:
    """OU noising ``dY = -Y ds + sqrt(2) dW`` with ``s = horizon * t``."""

    def drift(x, t, target):
        return -horizon * x

    def diffusion(t):
        return math.sqrt(2 * horizon)

    return ProcessSpec("ou_fwd_sde", drift, grid, diffusion, params={"horizon": horizon})


def ou_forward_ode(score: VectorField, grid: TimeGrid, horizon: float = 1.0,
                   schedule: NoiseSchedule = IDENTITY_SCHEDULE) -> ProcessSpec:
    """Probability-flow ODE of the OU process, ``dY = (-Y - score) ds``."""

    def drift(x, t, target):
        return horizon * (-x - score(x, t))

    return ProcessSpec("ou_fwd_ode", drift, grid, schedule=schedule, params={"horizon": horizon})


def reverse_of(spec: ProcessSpec, score_provider: Optional[VectorField] = None, horizon: float = 1.0) -> ProcessSpec:
    """Time reversal about ``horizon`` on the forward-ticking clock ``s``.

    ODEs flip time and negate the drift. SDEs use the reverse-time drift
    ``-f(x, H-s) + g(H-s)^2 * score(x, H-s)`` with diffusion ``g(H-s)``,
    where ``score_provider`` is the score of the *forward* marginals on the
    forward clock.
    """
    f, g = spec.drift, spec.diffusion
    grid = spec.grid.reflected(horizon)
    params = dict(spec.params, reversed=spec.kind)
    if not spec.stochastic:
        def drift(x, s, target):
            return -f(x, horizon - s, target)

        return ProcessSpec("generic_reverse_ode", drift, grid, schedule=spec.schedule, target=spec.target,
                           params=params)
    if score_provider is None:
        raise ValueError("reversing an SDE requires a score provider")

    def drift(x, s, target):
        t = horizon - s
        return -f(x, t, target) + g(t) ** 2 * score_provider(x, t)

    def diffusion(s):
        return g(horizon - s)

    return ProcessSpec("generic_reverse_sde", drift, grid, diffusion, target=spec.target, params=params)


def with_target(spec: ProcessSpec, target) -> ProcessSpec:
    return replace(spec, target=None if target is None else np.asarray(target, dtype=float))


def reverse_clock(score: VectorField) -> VectorField:
    """Re-index a forward-clock score field by ``t -> 1 - t``."""
    return VectorField(lambda x, t: score(x, 1.0 - t), f"flip({score.label})")


__all__ = [
    "IDENTITY_SCHEDULE",
    "KINDS",
    "NoiseSchedule",
    "ProcessSpec",
    "euler_maruyama_step",
    "euler_step",
    "forward_controlled_ode",
    "forward_controlled_sde",
    "forward_grid",
    "noise_schedule",
    "ou_forward_ode",
    "ou_forward_sde",
    "reverse_clock",
    "reverse_controlled_ode",
    "reverse_controlled_sde",
    "reverse_field",
    "reverse_of",
    "reverse_ode_grid",
    "reverse_sde_grid",
    "rf_forward_sde",
    "rf_reverse_sde",
    "run_process",
    "with_target",
]

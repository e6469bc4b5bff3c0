"""Value types shared across the package: states, grids, Gaussians, paths.

States are plain ``numpy`` arrays. A single state has shape ``(d,)`` and an
ensemble of particles has shape ``(n, d)``; every routine here accepts both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

#: Default boundary clip. Coefficients with ``1/(1-t)`` or ``1/t`` factors
#: are never evaluated closer than this to the singular endpoint.
DEFAULT_DELTA = 1e-4

#: Particles per noise block; noise for particle ``p`` at step ``k`` comes
#: from the generator keyed by ``(seed, stream, k, p // NOISE_BLOCK)``.
NOISE_BLOCK = 4096

# stream ids for keyed randomness
STREAM_INIT = 0
STREAM_TARGET = 1
STREAM_FORWARD = 2
STREAM_REVERSE = 3


class NonFiniteStateError(FloatingPointError):
    """Raised when a simulation produces NaN or Inf."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class DimensionError(ValueError):
    pass


def as_states(x, d: Optional[int] = None) -> np.ndarray:
    """Coerce ``x`` to a float array of states, checking dimension and finiteness."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"states must be 1-D or 2-D, got shape {arr.shape}")
    if d is not None and arr.shape[-1] != d:
        raise DimensionError(f"expected dimension {d}, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteStateError("state contains NaN or Inf")
    return arr


def check_finite(x: np.ndarray, step: Optional[int] = None) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        where = "" if step is None else f" at step {step}"
        raise NonFiniteStateError(f"non-finite state{where}", step=step)
    return x


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = t_start + (i/N)(t_end - t_start)``, ``i = 0..N``."""

    steps: int
    t_start: float = 0.0
    t_end: float = 1.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not 0.0 <= self.t_start < 1.0:
            raise ValueError(f"t_start must lie in [0, 1), got {self.t_start}")
        if not self.t_start < self.t_end <= 1.0:
            raise ValueError(f"t_end must lie in (t_start, 1], got {self.t_end}")
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")

    @property
    def times(self) -> np.ndarray:
        i = np.arange(self.steps + 1)
        return self.t_start + (i / self.steps) * (self.t_end - self.t_start)

    def clip(self, t):
        return clip_time(t, self.delta)

    def reflected(self, horizon: float = 1.0) -> "TimeGrid":
        """Grid on ``[horizon - t_end, horizon - t_start]`` (same step count)."""
        return TimeGrid(self.steps, horizon - self.t_end, horizon - self.t_start, self.delta)


def clip_time(t, delta: float = DEFAULT_DELTA):
    """Clip ``t`` into ``[0, 1 - delta]``."""
    return np.minimum(np.maximum(t, 0.0), 1.0 - delta)


@dataclass(frozen=True)
class GaussianDist:
    """Gaussian with diagonal covariance."""

    mean: np.ndarray
    var_diag: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.array(self.mean, dtype=float))
        var = np.array(self.var_diag, dtype=float)
        if var.size == 1 and var.ndim <= 1:
            var = np.full(mean.shape, float(var.reshape(-1)[0]))
        if var.shape != mean.shape:
            raise DimensionError(f"mean shape {mean.shape} != var shape {var.shape}")
        if not np.all(np.isfinite(mean)):
            raise NonFiniteStateError("mean contains NaN or Inf")
        if not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ValueError("var_diag entries must be finite and strictly positive")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_diag", var)

    @classmethod
    def isotropic(cls, mean, var: float = 1.0, d: Optional[int] = None) -> "GaussianDist":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if d is not None and mean.size == 1:
            mean = np.full(d, mean[0])
        return cls(mean, np.full(mean.shape, float(var)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, x) -> np.ndarray:
        x = as_states(x, self.dim)
        z = (x - self.mean) ** 2 / self.var_diag
        return -0.5 * np.sum(z + np.log(2 * np.pi * self.var_diag), axis=-1)

    def score(self, x) -> np.ndarray:
        return gaussian_score(self, x)

    def sample(self, seed: int, count: int) -> np.ndarray:
        return gaussian_sample(self, seed, count)


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the counter key ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def gaussian_sample(dist: GaussianDist, seed: int, count: int, stream: int = STREAM_INIT) -> np.ndarray:
    """Draw ``count`` samples of shape ``(count, d)``, reproducible from ``seed``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    z = standard_normal_block(seed, stream, -1, np.arange(count), dist.dim)
    return dist.mean + np.sqrt(dist.var_diag) * z


def gaussian_score(dist: GaussianDist, x) -> np.ndarray:
    """``grad log N(x; mean, diag(var))`` = ``-(x - mean) / var``."""
    x = as_states(x, dist.dim)
    return -(x - dist.mean) / dist.var_diag


def standard_normal_block(seed: int, stream: int, step: int, particle_ids: np.ndarray, d: int) -> np.ndarray:
    """Standard normals for the given particles at one step.

    Each particle's draw depends only on ``(seed, stream, step, particle_id)``,
    so splitting an ensemble across workers never changes the numbers.
    """
    particle_ids = np.asarray(particle_ids, dtype=np.int64)
    n = particle_ids.size
    if n and particle_ids[0] >= 0 and np.array_equal(particle_ids, np.arange(particle_ids[0], particle_ids[0] + n)):
        # contiguous ids: draw whole blocks and slice, no scatter
        lo = int(particle_ids[0])
        first, last = lo // NOISE_BLOCK, (lo + n - 1) // NOISE_BLOCK
        z = np.concatenate([keyed_rng(seed, stream, step + 1, b).standard_normal((NOISE_BLOCK, d))
                            for b in range(first, last + 1)])
        off = lo - first * NOISE_BLOCK
        return z[off:off + n]
    out = np.empty((n, d))
    blocks = particle_ids // NOISE_BLOCK
    # keys must be non-negative; shift step so the init stream (-1) is valid
    for blk in np.unique(blocks):
        sel = blocks == blk
        z = keyed_rng(seed, stream, step + 1, blk).standard_normal((NOISE_BLOCK, d))
        out[sel] = z[particle_ids[sel] - blk * NOISE_BLOCK]
    return out


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), d)
    particle_id: int
    seed: int

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class PathBundle:
    """Output of an ensemble run.

    ``paths`` has shape ``(steps + 1, n, d)`` when the full path was kept,
    otherwise only ``terminal`` is populated.
    """

    times: np.ndarray
    terminal: np.ndarray
    seed: int
    paths: Optional[np.ndarray] = None
    particle_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.particle_ids is None:
            self.particle_ids = np.arange(self.terminal.shape[0])

    def __len__(self) -> int:
        return self.terminal.shape[0]

    def trajectories(self) -> Iterator[Trajectory]:
        if self.paths is None:
            raise ValueError("paths were not recorded; rerun with keep_paths=True")
        for j, pid in enumerate(self.particle_ids):
            yield Trajectory(self.times, self.paths[:, j, :], int(pid), self.seed)

    def at(self, index: int) -> np.ndarray:
        if self.paths is None:
            raise ValueError("paths were not recorded; rerun with keep_paths=True")
        return self.paths[index]


@dataclass(frozen=True)
class EnsembleStats:
    n_particles: int
    mean: np.ndarray
    cov_diag: np.ndarray
    per_particle_errors: Optional[np.ndarray] = None  # (n, 2) rows of (l1, l2)

    @classmethod
    def from_states(cls, states, reference=None) -> "EnsembleStats":
        """Two-pass mean/variance (unbiased) of an ``(n, d)`` ensemble."""
        x = np.atleast_2d(np.asarray(states, dtype=float))
        n = x.shape[0]
        mean = x.mean(axis=0)
        dev = x - mean
        ddof = 1 if n > 1 else 0
        var = np.maximum((dev**2).sum(axis=0) / (n - ddof), 0.0)
        errors = None
        if reference is not None:
            e = x - np.atleast_2d(reference)
            errors = np.column_stack([np.abs(e).sum(axis=1), np.sqrt((e**2).sum(axis=1))])
        return cls(n, mean, var, errors)

    def mean_stderr(self) -> np.ndarray:
        return np.sqrt(self.cov_diag / self.n_particles)


def stack_states(states: Sequence) -> np.ndarray:
    return np.vstack([np.atleast_2d(s) for s in states])

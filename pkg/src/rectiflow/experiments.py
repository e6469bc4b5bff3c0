"""Gaussian inversion study: round-trip errors, path exports, straightness."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, TextIO, Union

import numpy as np

from .control import GuidanceSchedule, schedule_preset
from .core import (
    DEFAULT_DELTA,
    STREAM_FORWARD,
    STREAM_INIT,
    STREAM_REVERSE,
    STREAM_TARGET,
    GaussianDist,
    PathBundle,
    TimeGrid,
    Trajectory,
    gaussian_sample,
)
from .fields import (
    InterpolationMarginal,
    OUMarginal,
    VectorField,
    analytic_marginal_field,
    field_from_score,
    interpolation_score_field,
    reverse_field,
)
from .oracle import (
    MomentState,
    fwd_ctrl_sde_linear,
    integrate_moments,
    ou_sde_linear,
    rev_ctrl_sde_self_consistent_linear,
)
from .simulate import (
    ProcessSpec,
    forward_controlled_ode,
    forward_controlled_sde,
    forward_grid,
    noise_schedule,
    ou_forward_ode,
    ou_forward_sde,
    reverse_clock,
    reverse_controlled_ode,
    reverse_controlled_sde,
    reverse_of,
    reverse_ode_grid,
    reverse_sde_grid,
    rf_forward_sde,
    rf_reverse_sde,
    run_process,
)

METHODS = ("ddim", "ddpm", "rf_ode", "rf_sde", "ctrl_ode", "ctrl_sde")


def default_ou_horizon(delta: float) -> float:
    """OU run length whose signal factor ``exp(-T)`` equals the RF clip ``delta``."""
    return math.log(1.0 / delta)


@dataclass(frozen=True)
class InversionConfig:
    mu: float = 10.0
    d: int = 1
    n_samples: int = 10
    n_steps: int = 100
    gamma: float = 0.5
    eta: float = 0.5
    method: str = "ctrl_ode"
    seed: int = 0
    delta: float = DEFAULT_DELTA
    eta_preset: Optional[str] = None
    ou_horizon: Optional[float] = None
    sigma_schedule: str = "identity"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("gamma", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")
        if self.ou_horizon is not None and not self.ou_horizon > 0:
            raise ValueError(f"ou_horizon must be positive, got {self.ou_horizon}")

    @property
    def p0(self) -> GaussianDist:
        return GaussianDist.isotropic(self.mu, 1.0, self.d)

    @property
    def marginal(self) -> InterpolationMarginal:
        return InterpolationMarginal(self.p0)

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.method in ("rf_ode", "rf_sde") else self.gamma

    @property
    def effective_eta(self) -> float:
        return 0.0 if self.method in ("rf_ode", "rf_sde") else self.eta

    def eta_schedule(self) -> GuidanceSchedule:
        if self.eta_preset and self.method not in ("rf_ode", "rf_sde"):
            return schedule_preset(self.eta_preset)
        return GuidanceSchedule.constant(self.effective_eta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InversionReport:
    """Round-trip errors.

    ``per_sample`` rows are ``(l1, l2)`` per sample. Under ``sum`` aggregation
    the errors of all samples are pooled into one vector: ``l1`` is its 1-norm
    and ``l2`` its 2-norm. Under ``mean`` they are per-sample averages.
    """

    l2: float
    l1: float
    per_sample: np.ndarray
    aggregation: str = "sum"
    config: Optional[InversionConfig] = None
    originals: Optional[np.ndarray] = field(default=None, repr=False)
    reconstructions: Optional[np.ndarray] = field(default=None, repr=False)
    latents: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_errors(cls, originals, reconstructions, **kw) -> "InversionReport":
        e = np.atleast_2d(reconstructions) - np.atleast_2d(originals)
        per = np.column_stack([np.abs(e).sum(axis=1), np.sqrt((e**2).sum(axis=1))])
        return cls(float(math.sqrt(np.sum(per[:, 1] ** 2))), float(per[:, 0].sum()), per,
                   originals=np.atleast_2d(originals), reconstructions=np.atleast_2d(reconstructions), **kw)

    @property
    def l1_sum(self) -> float:
        return float(self.per_sample[:, 0].sum())

    @property
    def l2_sum(self) -> float:
        return float(math.sqrt(np.sum(self.per_sample[:, 1] ** 2)))

    @property
    def l1_mean(self) -> float:
        return float(self.per_sample[:, 0].mean())

    @property
    def l2_mean(self) -> float:
        return float(self.per_sample[:, 1].mean())

    def to_dict(self) -> dict:
        return {
            "config": None if self.config is None else self.config.to_dict(),
            "aggregation": self.aggregation,
            "l1_sum": self.l1_sum,
            "l2_sum": self.l2_sum,
            "l1_mean": self.l1_mean,
            "l2_mean": self.l2_mean,
            "per_sample": [{"l1": float(a), "l2": float(b)} for a, b in self.per_sample],
            "seed": None if self.config is None else self.config.seed,
        }


def build_processes(cfg: InversionConfig, y0: np.ndarray, y1: np.ndarray,
                    base_field: Optional[VectorField] = None) -> tuple[ProcessSpec, ProcessSpec | None]:
    """Forward spec and (when it does not depend on the forward result) reverse spec.

    For ``ddim``/``ddpm`` the reverse is the time reversal of the forward.
    ``base_field`` replaces the analytic ``u_t`` in the ODE methods.
    """
    n, delta = cfg.n_steps, cfg.delta
    m = cfg.marginal
    sched = noise_schedule(cfg.sigma_schedule)
    if cfg.method in ("rf_ode", "ctrl_ode"):
        u = base_field if base_field is not None else analytic_marginal_field(m, delta)
        fwd = forward_controlled_ode(u, y1, cfg.effective_gamma, forward_grid(n, delta), sched)
        rev = reverse_controlled_ode(reverse_field(u), y0, cfg.eta_schedule(), reverse_ode_grid(n, delta), sched)
        return fwd, rev
    if cfg.method == "rf_sde":
        score = reverse_clock(interpolation_score_field(m, delta))
        return rf_forward_sde(forward_grid(n, delta)), rf_reverse_sde(score, reverse_sde_grid(n, delta))
    if cfg.method == "ctrl_sde":
        score = reverse_clock(interpolation_score_field(m, delta))
        fwd = forward_controlled_sde(y1, cfg.effective_gamma, forward_grid(n, delta))
        rev = reverse_controlled_sde(y0, cfg.eta_schedule(), score, reverse_sde_grid(n, delta))
        return fwd, rev
    horizon = cfg.ou_horizon if cfg.ou_horizon is not None else default_ou_horizon(delta)
    ou = OUMarginal(cfg.p0, horizon)
    grid = TimeGrid(n, 0.0, 1.0, delta)
    if cfg.method == "ddim":
        fwd = ou_forward_ode(ou.score_field(), grid, horizon, sched)
        return fwd, reverse_of(fwd)
    fwd = ou_forward_sde(grid, horizon)
    return fwd, reverse_of(fwd, ou.score_field())


def draw_endpoints(cfg: InversionConfig) -> tuple[np.ndarray, np.ndarray]:
    """``y0 ~ p0`` (the samples to invert) and one fixed noise target ``y1 ~ N(0, I)`` each."""
    y0 = gaussian_sample(cfg.p0, cfg.seed, cfg.n_samples, STREAM_INIT)
    y1 = gaussian_sample(cfg.marginal.p1, cfg.seed, cfg.n_samples, STREAM_TARGET)
    return y0, y1


def run_inversion_roundtrip(cfg: InversionConfig, base_field: Optional[VectorField] = None,
                            keep_paths: bool = False) -> InversionReport:
    """Invert ``n_samples`` draws from ``p0`` and map them back; report the error."""
    y0, y1 = draw_endpoints(cfg)
    fwd, rev = build_processes(cfg, y0, y1, base_field)
    latent = run_process(fwd, y0, cfg.seed, stream=STREAM_FORWARD, keep_paths=keep_paths)
    back = run_process(rev, latent.terminal, cfg.seed, stream=STREAM_REVERSE, keep_paths=keep_paths)
    report = InversionReport.from_errors(y0, back.terminal, config=cfg)
    report.latents = latent.terminal
    if keep_paths:
        report.forward_paths, report.reverse_paths = latent, back
    return report


# the nine rows of the synthetic study: (label, method, gamma, eta)
TABLE5_ROWS = (
    ("DDIM inversion", "ddim", 0.0, 0.0),
    ("DDPM inversion", "ddpm", 0.0, 0.0),
    ("RF ODE (gamma=eta=0)", "rf_ode", 0.0, 0.0),
    ("RF SDE (gamma=eta=0)", "rf_sde", 0.0, 0.0),
    ("ctrl ODE (gamma=0.5, eta=0)", "ctrl_ode", 0.5, 0.0),
    ("ctrl ODE (gamma=0, eta=0.5)", "ctrl_ode", 0.0, 0.5),
    ("ctrl ODE (gamma=0.5, eta=0.5)", "ctrl_ode", 0.5, 0.5),
    ("ctrl SDE (gamma=eta=0.5)", "ctrl_sde", 0.5, 0.5),
    ("ctrl SDE (gamma=eta=1.0)", "ctrl_sde", 1.0, 1.0),
)

#: reported (L2, L1) for the same rows
TABLE5_REFERENCE = (
    (6.024, 19.038),
    (6.007, 15.758),
    (0.092, 0.20),
    (3.564, 8.795),
    (4.777, 11.628),
    (1.219, 3.074),
    (0.628, 1.643),
    (0.269, 0.694),
    (0.003, 0.010),
)


def run_table5(base: Optional[InversionConfig] = None) -> list[tuple[str, InversionReport]]:
    base = base or InversionConfig()
    rows = []
    for label, method, gamma, eta in TABLE5_ROWS:
        cfg = replace(base, method=method, gamma=gamma, eta=eta, eta_preset=None)
        rows.append((label, run_inversion_roundtrip(cfg)))
    return rows


def table5_ordering(rows) -> list[tuple[str, bool]]:
    """The qualitative ordering of the study, each strict step by a factor 2."""
    by = {label: rep.l2 for label, rep in rows}
    ctrl_sde11 = by["ctrl SDE (gamma=eta=1.0)"]
    rf_ode = by["RF ODE (gamma=eta=0)"]
    ctrl_ode55 = by["ctrl ODE (gamma=0.5, eta=0.5)"]
    dm = min(by["DDIM inversion"], by["DDPM inversion"])
    return [
        ("ctrl_sde(1,1) < rf_ode(0,0) / 2", ctrl_sde11 < rf_ode / 2),
        ("rf_ode(0,0) < ctrl_ode(0.5,0.5) / 2", rf_ode < ctrl_ode55 / 2),
        ("ctrl_ode(0.5,0.5) < min(ddim, ddpm) / 2", ctrl_ode55 < dm / 2),
        ("rf_ode < 0.1 * ddim", rf_ode < 0.1 * by["DDIM inversion"]),
        ("rf_ode < 0.1 * ddpm", rf_ode < 0.1 * by["DDPM inversion"]),
        ("ctrl_sde(0.5,0.5) < rf_sde(0,0)", by["ctrl SDE (gamma=eta=0.5)"] < by["RF SDE (gamma=eta=0)"]),
    ]


# ---------------------------------------------------------------- paths


def straightness(traj: Union[Trajectory, np.ndarray]) -> float:
    """Max distance of a path from its endpoint chord, over the chord length.

    A :class:`Trajectory` is measured as the space-time curve ``(t, x(t))``,
    which is what a path plot shows; a bare array is taken as a sequence of
    points. 0 means perfectly straight; a zero-length chord returns 0.
    """
    if isinstance(traj, Trajectory):
        pts = np.column_stack([traj.times, traj.states.reshape(len(traj.times), -1)])
    else:
        pts = np.asarray(traj, dtype=float)
        pts = pts.reshape(len(pts), -1)
    if len(pts) < 3:
        raise ValueError("straightness needs at least 3 points")
    a, b = pts[0], pts[-1]
    chord = b - a
    length = float(np.linalg.norm(chord))
    if length == 0.0:
        return 0.0
    rel = pts - a
    s = np.clip(rel @ chord / length**2, 0.0, 1.0)
    dist = np.linalg.norm(rel - s[:, None] * chord, axis=1)
    return float(dist.max() / length)


def export_paths(spec: ProcessSpec, n_particles: int, out: Union[str, TextIO, None] = None, *,
                 init=None, p0: Optional[GaussianDist] = None, seed: int = 0, fmt: str = "csv",
                 bundle: Optional[PathBundle] = None) -> str:
    """Simulate ``n_particles`` paths and write ``time,particle_id,coord_0..`` rows.

    Returns the written text. ``out`` may be a path, an open text file, or
    ``None`` (text only).
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if bundle is None:
        if init is None:
            if p0 is None:
                raise ValueError("provide init states or p0")
            init = gaussian_sample(p0, seed, n_particles, STREAM_INIT)
        bundle = run_process(spec, np.atleast_2d(init)[:n_particles], seed, keep_paths=True)
    text = paths_to_text(bundle, fmt)
    if isinstance(out, str):
        with open(out, "w", newline="") as fh:
            fh.write(text)
    elif out is not None:
        out.write(text)
    return text


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def paths_to_text(bundle: PathBundle, fmt: str = "csv") -> str:
    paths = bundle.paths
    steps, n, d = paths.shape
    if fmt == "json":
        doc = {
            "seed": bundle.seed,
            "times": [float(t) for t in bundle.times],
            "particles": [
                {"particle_id": int(pid), "states": paths[:, j, :].tolist()}
                for j, pid in enumerate(bundle.particle_ids)
            ],
        }
        return json.dumps(doc, indent=None) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "particle_id"] + [f"coord_{k}" for k in range(d)])
    for j, pid in enumerate(bundle.particle_ids):
        for i in range(steps):
            w.writerow([_fmt(bundle.times[i]), int(pid)] + [_fmt(v) for v in paths[i, j]])
    return buf.getvalue()


# ------------------------------------------------------------- single runs

SIM_PROCESSES = ("fwd_ctrl_ode", "fwd_ctrl_sde", "rf_fwd_sde", "rev_ctrl_ode", "rev_ctrl_sde", "rf_rev_sde",
                 "ou_fwd_ode", "ou_fwd_sde")
SCORE_SOURCES = ("interpolation", "self_consistent")


@dataclass(frozen=True)
class SimulationConfig:
    """One named process run on an ensemble drawn from its natural start law.

    Forward processes start from ``p0 = N(mu, I)``; reverse ones from the
    interpolation marginal at the reverse start time. Controlled processes
    get a single target drawn from the seed (``y1 ~ N(0, I)`` forward,
    ``y0 ~ p0`` reverse).
    """

    process: str = "rf_fwd_sde"
    gamma: float = 0.0
    eta: float = 0.0
    eta_preset: Optional[str] = None
    n_steps: int = 100
    n_particles: int = 10
    d: int = 1
    mu: float = 10.0
    seed: int = 0
    delta: float = DEFAULT_DELTA
    sigma_schedule: str = "identity"
    score_source: str = "interpolation"
    ou_horizon: Optional[float] = None

    def __post_init__(self):
        if self.process not in SIM_PROCESSES:
            raise ValueError(f"process must be one of {SIM_PROCESSES}, got {self.process!r}")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"score_source must be one of {SCORE_SOURCES}, got {self.score_source!r}")
        for name in ("gamma", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name, lo in (("n_steps", 2), ("n_particles", 1), ("d", 1), ("seed", 0)):
            if getattr(self, name) < lo:
                raise ValueError(f"{name} must be >= {lo}, got {getattr(self, name)}")
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")

    @property
    def p0(self) -> GaussianDist:
        return GaussianDist.isotropic(self.mu, 1.0, self.d)

    @property
    def horizon(self) -> float:
        return self.ou_horizon if self.ou_horizon is not None else default_ou_horizon(self.delta)

    def eta_schedule(self) -> GuidanceSchedule:
        return schedule_preset(self.eta_preset) if self.eta_preset else GuidanceSchedule.constant(self.eta)

    def to_dict(self) -> dict:
        return asdict(self)


def _grid_for(cfg: SimulationConfig) -> TimeGrid:
    n, delta = cfg.n_steps, cfg.delta
    if cfg.process.startswith("ou_"):
        return TimeGrid(n, 0.0, 1.0, delta)
    if cfg.process in ("fwd_ctrl_ode", "fwd_ctrl_sde", "rf_fwd_sde"):
        return forward_grid(n, delta)
    if cfg.process == "rev_ctrl_ode":
        return reverse_ode_grid(n, delta)
    return reverse_sde_grid(n, delta)


def build_simulation(cfg: SimulationConfig, base_field: Optional[VectorField] = None) -> tuple[ProcessSpec, np.ndarray]:
    """Process spec and initial ensemble for ``cfg``.

    ``base_field`` replaces the analytic ``u_t`` of the ODE processes (for a
    remote model). ``score_source="self_consistent"`` takes scores from the
    exact moments of the process's own SDE instead of the interpolation path.
    """
    p0, delta, sched = cfg.p0, cfg.delta, noise_schedule(cfg.sigma_schedule)
    m = InterpolationMarginal(p0)
    grid = _grid_for(cfg)
    kind = cfg.process
    y1 = gaussian_sample(m.p1, cfg.seed, 1, STREAM_TARGET)[0]
    y0 = gaussian_sample(p0, cfg.seed, 1, STREAM_TARGET)[0]
    self_consistent = cfg.score_source == "self_consistent"

    if kind.startswith("ou_"):
        ou = OUMarginal(p0, cfg.horizon)
        init = gaussian_sample(p0, cfg.seed, cfg.n_particles, STREAM_INIT)
        if kind == "ou_fwd_sde":
            return ou_forward_sde(grid, cfg.horizon), init
        score = ou.score_field()
        if self_consistent:
            score = integrate_moments(ou_sde_linear(cfg.horizon), MomentState(p0.mean, p0.var_diag), grid).score_field()
        return ou_forward_ode(score, grid, cfg.horizon, sched), init

    if kind in ("fwd_ctrl_ode", "fwd_ctrl_sde", "rf_fwd_sde"):
        init = gaussian_sample(p0, cfg.seed, cfg.n_particles, STREAM_INIT)
        if kind == "rf_fwd_sde":
            return rf_forward_sde(grid), init
        if kind == "fwd_ctrl_sde":
            return forward_controlled_sde(y1, cfg.gamma, grid), init
        u = base_field
        if u is None and self_consistent:
            path = integrate_moments(fwd_ctrl_sde_linear(cfg.gamma, y1, delta), MomentState(p0.mean, p0.var_diag), grid)
            u = field_from_score(path.score_field(), delta)
        if u is None:
            u = analytic_marginal_field(m, delta)
        return forward_controlled_ode(u, y1, cfg.gamma, grid, sched), init

    # reverse processes start from the path marginal at forward time 1 - t_start
    t_fwd = 1.0 - float(grid.t_start)
    start = GaussianDist(m.mean_at(t_fwd), m.var_at(t_fwd))
    init = gaussian_sample(start, cfg.seed, cfg.n_particles, STREAM_INIT)
    eta = 0.0 if kind == "rf_rev_sde" else cfg.eta_schedule()
    if self_consistent:
        sde_grid = reverse_sde_grid(cfg.n_steps, delta)
        s0 = GaussianDist(m.mean_at(1.0 - delta), m.var_at(1.0 - delta))
        if isinstance(eta, GuidanceSchedule) and eta.kind != "constant":
            raise ValueError("score_source=self_consistent needs a constant eta")
        e = eta if not isinstance(eta, GuidanceSchedule) else eta.strength
        score = integrate_moments(rev_ctrl_sde_self_consistent_linear(e, y0, delta),
                                  MomentState(s0.mean, s0.var_diag), sde_grid).score_field()
    else:
        score = reverse_clock(interpolation_score_field(m, delta))
    if kind == "rf_rev_sde":
        return rf_reverse_sde(score, grid), init
    if kind == "rev_ctrl_sde":
        return reverse_controlled_sde(y0, eta, score, grid), init
    if base_field is not None:
        v = reverse_field(base_field)
    elif self_consistent:
        v = reverse_field(field_from_score(reverse_clock(score), delta))
    else:
        v = reverse_field(analytic_marginal_field(m, delta))
    return reverse_controlled_ode(v, y0, eta, grid, sched), init


def run_simulation(cfg: SimulationConfig, base_field: Optional[VectorField] = None, n_jobs: int = 1) -> PathBundle:
    spec, init = build_simulation(cfg, base_field)
    stream = STREAM_REVERSE if spec.kind.startswith("rev") or spec.kind == "rf_rev_sde" else STREAM_FORWARD
    return run_process(spec, init, cfg.seed, stream=stream, keep_paths=True, n_jobs=n_jobs)


def summarize_bundle(bundle: PathBundle) -> dict:
    """Terminal ensemble moments and path straightness statistics."""
    x = bundle.terminal
    ddof = 1 if len(x) > 1 else 0
    st = [straightness(tr) for tr in bundle.trajectories()] if len(bundle.times) >= 3 else []
    return {
        "n_particles": int(x.shape[0]),
        "d": int(x.shape[1]),
        "t_start": float(bundle.times[0]),
        "t_end": float(bundle.times[-1]),
        "terminal_mean": x.mean(axis=0).tolist(),
        "terminal_var": x.var(axis=0, ddof=ddof).tolist(),
        "straightness_mean": float(np.mean(st)) if st else None,
        "straightness_max": float(np.max(st)) if st else None,
    }

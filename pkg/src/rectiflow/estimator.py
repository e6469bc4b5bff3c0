"""scikit-learn style wrapper: fit a Gaussian data law, invert samples to noise."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .control import GuidanceSchedule, schedule_preset
from .core import DEFAULT_DELTA, STREAM_FORWARD, STREAM_REVERSE, STREAM_TARGET, GaussianDist, gaussian_sample
from .fields import InterpolationMarginal, analytic_marginal_field, reverse_field
from .simulate import forward_controlled_ode, forward_grid, reverse_controlled_ode, reverse_ode_grid, run_process


class RFInversion(TransformerMixin, BaseEstimator):
    """Controlled rectified-flow inversion of samples from a Gaussian law.

    ``fit`` estimates a diagonal Gaussian ``p0`` and thereby the optimal
    rectified-flow field. ``transform`` runs the controlled forward ODE
    (noise target drawn from ``random_state``) and returns the structured
    noise. ``inverse_transform`` runs the reverse ODE, guided toward
    ``reference`` with strength ``eta``.

    Parameters
    ----------
    gamma : float in [0, 1]
        Forward controller guidance.
    eta : float in [0, 1]
        Reverse controller guidance. Ignored when ``eta_preset`` is set.
    n_steps : int >= 2
    delta : float
        Time clip away from the singular ends.
    eta_preset : str or None
        Name of a windowed reverse-guidance schedule.
    random_state : int >= 0
    """

    def __init__(self, gamma=0.0, eta=0.0, n_steps=100, delta=DEFAULT_DELTA, eta_preset=None, random_state=0):
        self.gamma = gamma
        self.eta = eta
        self.n_steps = n_steps
        self.delta = delta
        self.eta_preset = eta_preset
        self.random_state = random_state

    def _validate_params(self):
        for name in ("gamma", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")
        if int(self.random_state) != self.random_state or self.random_state < 0:
            raise ValueError(f"random_state must be a non-negative integer, got {self.random_state}")

    def fit(self, X, y=None):
        self._validate_params()
        X = check_array(X, ensure_min_samples=2)
        var = X.var(axis=0, ddof=1)
        if np.any(var <= 0):
            raise ValueError("every feature needs positive variance")
        self.p0_ = GaussianDist(X.mean(axis=0), var)
        self.n_features_in_ = X.shape[1]
        self.field_ = analytic_marginal_field(InterpolationMarginal(self.p0_), self.delta)
        return self

    def _check(self, X):
        check_is_fitted(self, "p0_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        return X

    def _eta_schedule(self):
        return schedule_preset(self.eta_preset) if self.eta_preset else GuidanceSchedule.constant(self.eta)

    def transform(self, X):
        """Structured noise for each row of ``X``."""
        X = self._check(X)
        m = InterpolationMarginal(self.p0_)
        y1 = gaussian_sample(m.p1, self.random_state, X.shape[0], STREAM_TARGET)
        spec = forward_controlled_ode(self.field_, y1, self.gamma, forward_grid(self.n_steps, self.delta))
        return run_process(spec, X, self.random_state, stream=STREAM_FORWARD).terminal

    def inverse_transform(self, Z, reference=None):
        """Map noise back to data; ``reference`` rows are the guidance targets."""
        Z = self._check(Z)
        if reference is None:
            if self.eta or self.eta_preset:
                raise ValueError("reverse guidance needs reference samples")
            reference = np.zeros_like(Z)
        reference = check_array(reference)
        if reference.shape != Z.shape:
            raise ValueError(f"reference shape {reference.shape} does not match {Z.shape}")
        spec = reverse_controlled_ode(reverse_field(self.field_), reference, self._eta_schedule(),
                                      reverse_ode_grid(self.n_steps, self.delta))
        return run_process(spec, Z, self.random_state, stream=STREAM_REVERSE).terminal

    def score(self, X, y=None):
        """Negative mean L2 round-trip error (higher is better)."""
        X = self._check(X)
        back = self.inverse_transform(self.transform(X), X)
        return -float(np.linalg.norm(back - X, axis=1).mean())

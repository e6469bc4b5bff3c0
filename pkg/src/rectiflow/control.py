"""Controller-guidance schedules and blended (controlled) drifts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import VectorField

#: Step count the named presets were tuned for; window times are fractions of it.
PRESET_STEPS = 28


@dataclass(frozen=True)
class GuidanceSchedule:
    """Time-varying guidance strength.

    ``constant`` returns ``strength`` everywhere; ``windowed`` returns it on
    the closed window ``[start, stop]`` and 0 elsewhere.
    """

    strength: float
    start: float = 0.0
    stop: float = 1.0
    kind: str = "constant"

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")
        if not 0.0 <= self.start <= 1.0:
            raise ValueError(f"start must lie in [0, 1], got {self.start}")
        if not self.start <= self.stop <= 1.0:
            raise ValueError(f"stop must lie in [start, 1], got {self.stop}")
        if self.kind not in ("constant", "windowed"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, strength: float) -> "GuidanceSchedule":
        return cls(float(strength))

    @classmethod
    def windowed(cls, strength: float, start: float, stop: float) -> "GuidanceSchedule":
        return cls(float(strength), float(start), float(stop), "windowed")

    def value_at(self, t) -> float:
        if self.kind == "constant":
            return self.strength
        # small slack so that k/28 * 28 style round-off stays inside the window
        eps = 1e-12
        return self.strength if self.start - eps <= t <= self.stop + eps else 0.0


# (start, stop, strength) in units of PRESET_STEPS
_PRESET_TABLE = {
    "stroke2image": (3, 5, 0.9),
    "object_insert": (0, 6, 1.0),
    "gender_editing": (0, 8, 1.0),
    "age_editing": (0, 5, 1.0),
    "adding_glasses": (6, 25, 0.7),
    "stylization": (0, 6, 0.9),
}

PRESETS = tuple(sorted(_PRESET_TABLE)) + ("constant_zero", "constant_one")


def schedule_preset(name: str) -> GuidanceSchedule:
    """Named windowed schedule; times are normalized by a 28-step run."""
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key == "constant_zero":
        return GuidanceSchedule.constant(0.0)
    if key == "constant_one":
        return GuidanceSchedule.constant(1.0)
    try:
        s, tau, eta = _PRESET_TABLE[key]
    except KeyError:
        raise KeyError(f"unknown schedule preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return GuidanceSchedule.windowed(eta, s / PRESET_STEPS, tau / PRESET_STEPS)


@dataclass(frozen=True)
class ControlledDrift:
    """``base + value_at(t) * (controller - base)``."""

    base: VectorField
    controller: VectorField
    schedule: GuidanceSchedule

    def __call__(self, x, t) -> np.ndarray:
        return blend_drift(self, x, t)

    def as_field(self) -> VectorField:
        return VectorField(self.__call__, f"blend({self.base.label},{self.controller.label})")


def blend_drift(d: ControlledDrift, x, t) -> np.ndarray:
    w = d.schedule.value_at(t)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"guidance value {w} outside [0, 1] at t={t}")
    if w == 0.0:
        return d.base(x, t)
    if w == 1.0:
        return d.controller(x, t)
    b = d.base(x, t)
    return b + w * (d.controller(x, t) - b)

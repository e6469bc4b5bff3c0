"""Run configuration: option resolution, validation, and replay manifests.

A config file is a flat YAML (or JSON) mapping whose keys are the CLI flag
names (``steps``, ``gamma``, ``schedule-preset`` or ``schedule_preset``...)
plus an optional ``remote`` mapping. Explicit flags override file values,
which override ``RECTIFLOW_SEED`` and built-in defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import yaml

from . import __version__
from .control import PRESETS
from .experiments import METHODS, SCORE_SOURCES, SIM_PROCESSES, InversionConfig, SimulationConfig
from .remote import TRANSPORTS, RemoteFieldEndpoint
from .simulate import noise_schedule

MANIFEST_NAME = "manifest.json"
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending option."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _unit(name):
    def check(v):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(name, f"must lie in [0, 1], got {v}")
    return check


def _at_least(name, lo):
    def check(v):
        if v < lo:
            raise ConfigError(name, f"must be >= {lo}, got {v}")
    return check


def _choice(name, options):
    def check(v):
        if v is not None and v not in options:
            raise ConfigError(name, f"must be one of {', '.join(options)}, got {v!r}")
    return check


def _delta(v):
    if not 0.0 < v < 0.5:
        raise ConfigError("delta", f"must lie in (0, 0.5), got {v}")


def _horizon(v):
    if v is not None and not v > 0:
        raise ConfigError("ou-horizon", f"must be positive, got {v}")


def _sigma(v):
    try:
        noise_schedule(v)
    except ValueError as exc:
        raise ConfigError("sigma-schedule", str(exc)) from exc


def _finite(name):
    def check(v):
        if not math.isfinite(v):
            raise ConfigError(name, f"must be finite, got {v}")
    return check


def _positive(name):
    def check(v):
        if not v > 0:
            raise ConfigError(name, f"must be positive, got {v}")
    return check


@dataclass(frozen=True)
class Option:
    name: str  # flag name without dashes
    type: Callable
    default: Any
    check: Optional[Callable] = None
    help: str = ""


_OPTIONS = {o.name: o for o in (
    Option("process", str, "rf_fwd_sde", _choice("process", SIM_PROCESSES), "process to simulate"),
    Option("method", str, "ctrl_ode", _choice("method", METHODS), "inversion method"),
    Option("gamma", float, 0.5, _unit("gamma"), "forward controller guidance in [0, 1]"),
    Option("eta", float, 0.5, _unit("eta"), "reverse controller guidance in [0, 1]"),
    Option("schedule-preset", str, None, _choice("schedule-preset", PRESETS), "windowed reverse-guidance preset"),
    Option("steps", int, 100, _at_least("steps", 2), "Euler steps"),
    Option("particles", int, 10, _at_least("particles", 1), "ensemble size (samples to invert)"),
    Option("dim", int, 1, _at_least("dim", 1), "state dimension"),
    Option("mu", float, 10.0, _finite("mu"), "mean of the data law N(mu, I)"),
    Option("seed", int, 0, _at_least("seed", 0), "root seed"),
    Option("delta", float, 1e-4, _delta, "time clip away from singular ends"),
    Option("sigma-schedule", str, "identity", _sigma, "ODE step schedule: identity or power:<p>"),
    Option("score-source", str, "interpolation", _choice("score-source", SCORE_SOURCES),
           "score of the interpolation path or of the process's own law"),
    Option("ou-horizon", float, None, _horizon, "OU run length for ddim/ddpm (default ln(1/delta))"),
    Option("format", str, "csv", _choice("format", FORMATS), "output format"),
    Option("jobs", int, 1, _at_least("jobs", 1), "worker threads over particles"),
    Option("remote", str, None, None, "field server: a command line (stdio) or tcp://host:port"),
    Option("prompt", str, None, None, "prompt passed through to the field server"),
    Option("remote-timeout", float, 10.0, _positive("remote-timeout"), "seconds to wait for a field reply"),
    Option("remote-reentrant", bool, False, None, "share one field-server connection across workers"),
)}

COMMAND_OPTIONS = {
    "simulate": ("process", "gamma", "eta", "schedule-preset", "steps", "particles", "dim", "mu", "seed", "delta",
                 "sigma-schedule", "score-source", "ou-horizon", "format", "jobs", "remote", "prompt",
                 "remote-timeout", "remote-reentrant"),
    "invert": ("method", "gamma", "eta", "schedule-preset", "steps", "particles", "dim", "mu", "seed", "delta",
               "sigma-schedule", "ou-horizon", "format", "remote", "prompt", "remote-timeout", "remote-reentrant"),
    "table5": ("steps", "particles", "dim", "mu", "seed", "delta", "sigma-schedule", "ou-horizon", "format"),
    "check": (),
}
COMMAND_OPTIONS["paths"] = COMMAND_OPTIONS["simulate"]


def option(name: str) -> Option:
    return _OPTIONS[name]


def load_config_file(path) -> dict:
    """Read a YAML/JSON mapping; keys are normalised to flag spelling."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"{path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must contain a mapping")
    out = {}
    for k, v in doc.items():
        key = str(k).replace("_", "-")
        if key == "remote" and isinstance(v, dict):
            out.update(_flatten_remote(v))
        else:
            out[key] = v
    return out


def _flatten_remote(doc: Mapping) -> dict:
    out = {}
    for k, v in doc.items():
        k = str(k).replace("_", "-")
        if k == "transport":
            continue
        if k in ("command", "address", "uri"):
            if k == "address":
                v = f"tcp://{v}"
            elif isinstance(v, (list, tuple)):
                v = shlex.join(map(str, v))
            out["remote"] = v
        elif k in ("prompt",):
            out["prompt"] = v
        elif k in ("timeout", "reentrant"):
            out[f"remote-{k}"] = v
        else:
            raise ConfigError(f"remote.{k}", "unknown key")
    return out


def _coerce(name: str, value):
    opt = _OPTIONS[name]
    if value is None:
        return None
    if opt.type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"must be true or false, got {value!r}")
    try:
        if opt.type is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        if opt.type in (int, float) and isinstance(value, bool):
            raise ValueError
        return opt.type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"expected {opt.type.__name__}, got {value!r}") from exc


def resolve(command: str, explicit: Mapping[str, Any], file_values: Optional[Mapping[str, Any]] = None,
            env_values: Optional[Mapping[str, Any]] = None) -> dict:
    """Merge defaults < env < file < explicit flags and validate each field."""
    allowed = COMMAND_OPTIONS[command]
    file_values = dict(file_values or {})
    unknown = sorted(set(file_values) - set(allowed))
    if unknown:
        raise ConfigError(unknown[0], f"not an option of '{command}'")
    resolved = {}
    for name in allowed:
        value = _OPTIONS[name].default
        for layer in (env_values or {}, file_values, explicit):
            if name in layer:
                value = layer[name]
        value = _coerce(name, value)
        if _OPTIONS[name].check is not None and value is not None:
            _OPTIONS[name].check(value)
        resolved[name] = value
    return resolved


def simulation_config(r: Mapping) -> SimulationConfig:
    if r["score-source"] == "self_consistent" and r["schedule-preset"]:
        raise ConfigError("score-source", "self_consistent needs a constant eta, not a schedule preset")
    return SimulationConfig(process=r["process"], gamma=r["gamma"], eta=r["eta"], eta_preset=r["schedule-preset"],
                            n_steps=r["steps"], n_particles=r["particles"], d=r["dim"], mu=r["mu"], seed=r["seed"],
                            delta=r["delta"], sigma_schedule=r["sigma-schedule"], score_source=r["score-source"],
                            ou_horizon=r["ou-horizon"])


def inversion_config(r: Mapping) -> InversionConfig:
    return InversionConfig(mu=r["mu"], d=r["dim"], n_samples=r["particles"], n_steps=r["steps"],
                           gamma=r.get("gamma", 0.5), eta=r.get("eta", 0.5), method=r.get("method", "ctrl_ode"),
                           seed=r["seed"], delta=r["delta"], eta_preset=r.get("schedule-preset"),
                           ou_horizon=r["ou-horizon"], sigma_schedule=r["sigma-schedule"])


def remote_endpoint(r: Mapping) -> Optional[RemoteFieldEndpoint]:
    uri = r.get("remote")
    if not uri:
        return None
    try:
        return RemoteFieldEndpoint.from_uri(uri, prompt=r.get("prompt"), timeout=r["remote-timeout"],
                                            reentrant=bool(r["remote-reentrant"]))
    except ValueError as exc:
        raise ConfigError("remote", str(exc)) from exc


# ---------------------------------------------------------------- manifests


def git_describe() -> Optional[str]:
    """``git describe --always --dirty`` of the source tree, if it is a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.TimeoutExpired):
        return None
    return (out.stdout.strip() or None) if out.returncode == 0 else None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, resolved: Mapping, outputs) -> Path:
    """Record everything needed to rerun ``command`` and check its outputs."""
    out_dir = Path(out_dir)
    doc = {
        "tool": "rectiflow",
        "version": __version__,
        "git_describe": git_describe(),
        "command": command,
        "seed": resolved.get("seed"),
        "config": dict(resolved),
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("manifest", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("manifest", f"{path} is not JSON: {exc}") from exc
    for key in ("command", "config", "outputs"):
        if key not in doc:
            raise ConfigError("manifest", f"missing key {key!r}")
    if doc["command"] not in COMMAND_OPTIONS:
        raise ConfigError("manifest", f"unknown command {doc['command']!r}")
    return doc


__all__ = [
    "COMMAND_OPTIONS",
    "ConfigError",
    "FORMATS",
    "MANIFEST_NAME",
    "TRANSPORTS",
    "inversion_config",
    "load_config_file",
    "option",
    "read_manifest",
    "remote_endpoint",
    "resolve",
    "sha256_file",
    "simulation_config",
    "write_manifest",
]

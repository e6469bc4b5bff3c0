"""``rectiflow`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from contextlib import ExitStack
from pathlib import Path

import click

from . import __version__
from .checks import CHECKS
from .config import (
    COMMAND_OPTIONS,
    MANIFEST_NAME,
    ConfigError,
    git_describe,
    inversion_config,
    load_config_file,
    option,
    read_manifest,
    remote_endpoint,
    resolve,
    sha256_file,
    simulation_config,
    write_manifest,
)
from .experiments import (
    TABLE5_REFERENCE,
    paths_to_text,
    run_inversion_roundtrip,
    run_simulation,
    run_table5,
    summarize_bundle,
    table5_ordering,
)
from .remote import RemoteField, RemoteFieldError

SEED_ENV = "RECTIFLOW_SEED"
ODE_METHODS = ("rf_ode", "ctrl_ode")


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _remote_field(stack: ExitStack, r):
    ep = remote_endpoint(r)
    if ep is None:
        return None
    return stack.enter_context(RemoteField(ep)).as_field()


# ------------------------------------------------------------ run bodies


def _run_simulate(r, out: Path, *, summary: bool = True) -> list[Path]:
    cfg = simulation_config(r)
    with ExitStack() as stack:
        base = _remote_field(stack, r)
        if base is not None and cfg.process not in ("fwd_ctrl_ode", "rev_ctrl_ode"):
            raise ConfigError("remote", f"a remote field drives only fwd_ctrl_ode/rev_ctrl_ode, not {cfg.process}")
        bundle = run_simulation(cfg, base, n_jobs=r["jobs"])
    fmt = r["format"]
    paths = out / f"paths.{fmt}"
    paths.write_text(paths_to_text(bundle, fmt))
    files = [paths]
    stats = summarize_bundle(bundle)
    if summary:
        files.append(_write_json(out / "summary.json", {"config": cfg.to_dict(), "summary": stats,
                                                         "seed": cfg.seed, "git_describe": git_describe()}))
    click.echo(f"{cfg.process}: {stats['n_particles']} particles, t in [{stats['t_start']:.6g}, {stats['t_end']:.6g}], "
               f"terminal mean {stats['terminal_mean']}, var {stats['terminal_var']}")
    return files


def _run_paths(r, out: Path) -> list[Path]:
    return _run_simulate(r, out, summary=False)


def _run_invert(r, out: Path) -> list[Path]:
    cfg = inversion_config(r)
    with ExitStack() as stack:
        base = _remote_field(stack, r)
        if base is not None and cfg.method not in ODE_METHODS:
            raise ConfigError("remote", f"a remote field drives only {'/'.join(ODE_METHODS)}, not {cfg.method}")
        rep = run_inversion_roundtrip(cfg, base_field=base)
    if r["format"] == "json":
        doc = rep.to_dict()
        doc["git_describe"] = git_describe()
        path = _write_json(out / "report.json", doc)
    else:
        path = out / "report.csv"
        d = rep.originals.shape[1]
        cols = ["sample", "l1", "l2"] + [f"{p}_{k}" for p in ("original", "latent", "reconstruction") for k in range(d)]
        lines = [",".join(cols)]
        for i, (l1, l2) in enumerate(rep.per_sample):
            vals = [l1, l2, *rep.originals[i], *rep.latents[i], *rep.reconstructions[i]]
            lines.append(",".join([str(i)] + [format(float(v), ".17g") for v in vals]))
        path.write_text("\n".join(lines) + "\n")
    click.echo(f"{cfg.method} (gamma={cfg.gamma}, eta={cfg.eta}): L2={rep.l2:.6g} L1={rep.l1:.6g} "
               f"(mean per sample: L2={rep.l2_mean:.6g} L1={rep.l1_mean:.6g})")
    return [path]


def _run_table5(r, out: Path) -> list[Path]:
    base = inversion_config(dict(r, method="ctrl_ode", gamma=0.5, eta=0.5))
    rows = run_table5(base)
    width = max(len(label) for label, _ in rows)
    click.echo(f"{'row':<{width}}  {'L2':>10} {'L1':>10}   {'ref L2':>7} {'ref L1':>7}")
    for (label, rep), (ref2, ref1) in zip(rows, TABLE5_REFERENCE):
        click.echo(f"{label:<{width}}  {rep.l2:10.4f} {rep.l1:10.4f}   {ref2:7.3f} {ref1:7.3f}")
    checks = table5_ordering(rows)
    for name, ok in checks:
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if r["format"] == "json":
        doc = {
            "config": base.to_dict(),
            "seed": base.seed,
            "git_describe": git_describe(),
            "rows": [dict(rep.to_dict(), label=label, reference={"l2": ref2, "l1": ref1}, config=rep.config.to_dict())
                     for (label, rep), (ref2, ref1) in zip(rows, TABLE5_REFERENCE)],
            "ordering": [{"check": name, "passed": ok} for name, ok in checks],
        }
        return [_write_json(out / "table5.json", doc)]
    path = out / "table5.csv"
    lines = ["row,method,gamma,eta,l2_sum,l1_sum,l2_mean,l1_mean,ref_l2,ref_l1"]
    for (label, rep), (ref2, ref1) in zip(rows, TABLE5_REFERENCE):
        c = rep.config
        nums = [c.gamma, c.eta, rep.l2_sum, rep.l1_sum, rep.l2_mean, rep.l1_mean, ref2, ref1]
        lines.append(",".join([f'"{label}"', c.method] + [format(float(v), ".17g") for v in nums]))
    path.write_text("\n".join(lines) + "\n")
    return [path]


def _run_check(r, out: Path) -> list[Path]:
    only = set(r.get("only") or [])
    results = []
    for number, chk in enumerate(CHECKS, start=1):
        if only and number not in only:
            continue
        res = chk()
        click.echo(f"{res.line()} ({res.seconds:.1f}s)")
        results.append(res)
    doc = {
        "passed": all(res.passed for res in results),
        "criteria": [{"number": res.number, "name": res.name, "passed": res.passed,
                      "metrics": _drop_timings(res.metrics)} for res in results],
    }
    path = _write_json(out / "check.json", doc)
    if not doc["passed"]:
        raise _ChecksFailed(sum(not res.passed for res in results))
    return [path]


def _drop_timings(obj):
    if isinstance(obj, dict):
        return {k: _drop_timings(v) for k, v in obj.items() if k != "runtime"}
    if isinstance(obj, (list, tuple)):
        return [_drop_timings(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


class _ChecksFailed(Exception):
    pass


RUNNERS = {"simulate": _run_simulate, "paths": _run_paths, "invert": _run_invert, "table5": _run_table5,
           "check": _run_check}


# ------------------------------------------------------------ plumbing


def _execute(command: str, r: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    failed = False
    try:
        files = RUNNERS[command](r, out)
    except _ChecksFailed as exc:
        click.echo(f"{exc.args[0]} criteria failed", err=True)
        files = [out / "check.json"]
        failed = True
    write_manifest(out, command, r, files)
    return 1 if failed else 0


def _guard(fn):
    @functools.wraps(fn)
    def run(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (RemoteFieldError, FloatingPointError, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)
        sys.exit(code or 0)

    return run


def _env_values() -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return {}
    try:
        return {"seed": int(raw)}
    except ValueError:
        raise ConfigError("seed", f"{SEED_ENV}={raw!r} is not an integer") from None


def _resolve(command: str, kwargs: dict) -> tuple[dict, Path]:
    config_path = kwargs.pop("config", None)
    out = kwargs.pop("out")
    explicit = {k.replace("_", "-"): v for k, v in kwargs.items() if v is not None}
    file_values = load_config_file(config_path) if config_path else {}
    file_out = file_values.pop("out", None)
    out = Path(out or file_out or Path("runs") / command)
    return resolve(command, explicit, file_values, _env_values()), out


_CLICK_TYPES = {int: int, float: float, str: str}


def _options(command: str):
    """Attach one flag per resolvable option, all defaulting to 'unset'."""

    def deco(fn):
        for name in reversed(COMMAND_OPTIONS[command]):
            opt = option(name)
            default = "" if opt.default is None else f" [default: {opt.default}]"
            extra = f" [env: {SEED_ENV}]" if name == "seed" else ""
            if opt.type is bool:
                fn = click.option(f"--{name}", is_flag=True, default=None, help=opt.help)(fn)
            else:
                fn = click.option(f"--{name}", type=_CLICK_TYPES[opt.type], default=None,
                                  help=opt.help + default + extra)(fn)
        fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help=f"output directory [default: runs/{command}]")(fn)
        fn = click.option("--config", type=click.Path(dir_okay=False), default=None,
                          help="YAML/JSON file of option values (flags override it)")(fn)
        return fn

    return deco


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="rectiflow")
def main():
    """Controlled rectified-flow inversion: simulations, round trips, checks."""


@main.command()
@_options("simulate")
@_guard
def simulate(**kwargs):
    """Simulate one process; write paths and a JSON summary."""
    r, out = _resolve("simulate", kwargs)
    return _execute("simulate", r, out)


@main.command()
@_options("paths")
@_guard
def paths(**kwargs):
    """Export sample paths of one process (plot-ready)."""
    r, out = _resolve("paths", kwargs)
    return _execute("paths", r, out)


@main.command()
@_options("invert")
@_guard
def invert(**kwargs):
    """One inversion round trip (data -> noise -> data); report L1/L2 errors."""
    r, out = _resolve("invert", kwargs)
    return _execute("invert", r, out)


@main.command()
@_options("table5")
@_guard
def table5(**kwargs):
    """All nine rows of the Gaussian inversion study, with ordering checks."""
    r, out = _resolve("table5", kwargs)
    return _execute("table5", r, out)


@main.command()
@click.option("--only", type=click.IntRange(1, 10), multiple=True, help="run only these criteria (repeatable)")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="output directory [default: runs/check]")
@_guard
def check(only, out):
    """Run the property suite (criteria 1-10); exit 0 only if all pass."""
    return _execute("check", {"only": sorted(only)}, Path(out or Path("runs") / "check"))


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", type=click.Path(file_okay=False), required=True, help="directory for the replayed outputs")
@click.option("--verify/--no-verify", default=True, help="compare output hashes with the manifest")
@_guard
def replay(manifest, out, verify):
    """Rerun a recorded run from its manifest and check outputs match bit for bit."""
    doc = read_manifest(manifest)
    if doc.get("version") != __version__:
        click.echo(f"warning: manifest written by version {doc.get('version')}, running {__version__}", err=True)
    command = doc["command"]
    if command == "check":
        r = {"only": list(doc["config"].get("only") or [])}
    else:
        r = resolve(command, {k: v for k, v in doc["config"].items() if k in COMMAND_OPTIONS[command]})
    out = Path(out)
    code = _execute(command, r, out)
    if not verify:
        return code
    mismatched = []
    for name, digest in sorted(doc["outputs"].items()):
        path = out / name
        same = path.exists() and sha256_file(path) == digest
        click.echo(f"[{'MATCH' if same else 'DIFF'}] {name}")
        mismatched += [] if same else [name]
    if mismatched:
        click.echo(f"replay differs from the manifest in {', '.join(mismatched)}", err=True)
        return 1
    return code


__all__ = ["main", "MANIFEST_NAME"]

"""Command line runner: ``rlab <experiment> --config FILE [--jobs N] [--force] [--seed S]``.

Config files are plain text: ``[section]`` headers and ``key = value`` lines,
``#`` comments, lists as comma separated values, and ``2^k`` accepted for
powers of two.  The ``[run]`` section holds ``experiment``, ``seed`` and
``output``; the section named after the experiment holds its parameters.

Each run lands in ``<root>/<experiment>-<hash>`` where the hash covers the
canonical config, so rerunning an identical config is a no-op unless
``--force`` is given.  Exit codes: 0 success, 2 an invariant check failed,
1 any other error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import platform
import re
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigParse, EmptyTable, InvariantFailure, RlabError, Unwritable
from .experiments import EXPERIMENTS, PARAMS, RUNNERS, RunOutput
from .report import emit_plot
from .wavepackets import save_packets

log = logging.getLogger("rlab")

RUN_KEYS = {"experiment": "str", "seed": "int", "output": "str"}
DEFAULT_OUTPUT = "rlab-out"
_POW2 = re.compile(r"^(-?)2\^(-?\d+)$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    seed: int = 0
    output: str = DEFAULT_OUTPUT
    source: dict = field(default_factory=dict)  # key -> line number in the file

    def canonical(self) -> str:
        """Sorted, fully typed text form; the run hash is taken over this."""
        lines = ["[run]", f"experiment = {self.experiment}", f"seed = {self.seed}", "", f"[{self.experiment}]"]
        for key in sorted(self.params):
            lines.append(f"{key} = {_format(self.params[key])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _number(text: str, kind: str, key: str, line):
    t = text.strip()
    m = _POW2.match(t)
    try:
        if m:
            val = (-1.0 if m.group(1) else 1.0) * 2.0 ** int(m.group(2))
            if kind == "int":
                if val != int(val):
                    raise ValueError
                return int(val)
            return val
        if kind == "int":
            return int(t)
        val = float(t)
        if not math.isfinite(val):
            raise ValueError
        return val
    except ValueError:
        raise ConfigParse(f"cannot read {t!r} as {'an integer' if kind == 'int' else 'a number'}",
                          key=key, line=line) from None


def convert(kind: str, text, key: str, line=None):
    if not isinstance(text, str):
        return list(text) if kind in ("floats", "ints") else text
    if kind == "str":
        v = text.strip()
        if not v:
            raise ConfigParse("empty value", key=key, line=line)
        return v
    if kind in ("int", "float"):
        return _number(text, kind, key, line)
    if kind in ("floats", "ints"):
        parts = [s for s in text.split(",")]
        if not parts or any(not s.strip() for s in parts):
            raise ConfigParse("list has an empty entry", key=key, line=line)
        return [_number(s, kind[:-1], key, line) for s in parts]
    raise ValueError(f"unknown parameter kind {kind!r}")


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse config text; ``experiment`` (from the command line) must agree
    with the file when both are given."""
    sections: dict = {}
    where: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or not _NAME.match(line[1:-1].strip()):
                raise ConfigParse(f"malformed section header {line!r}", line=lineno)
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigParse(f"section [{current}] appears twice", line=lineno)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigParse(f"expected 'key = value', got {line!r}", line=lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if not _NAME.match(key):
            raise ConfigParse("malformed key", key=key or "<empty>", line=lineno)
        if current is None:
            raise ConfigParse("key outside any section", key=key, line=lineno)
        if key in sections[current]:
            raise ConfigParse("duplicate key", key=key, line=lineno)
        sections[current][key] = val
        where[(current, key)] = lineno

    run = sections.get("run", {})
    for key in run:
        if key not in RUN_KEYS:
            raise ConfigParse("unknown key in [run]", key=key, line=where[("run", key)])
    exp = run.get("experiment", experiment)
    if exp is None:
        raise ConfigParse("no experiment named in [run] or on the command line", key="experiment")
    exp = exp.strip()
    if exp not in EXPERIMENTS:
        raise ConfigParse(f"unknown experiment {exp!r}", key="experiment", line=where.get(("run", "experiment")))
    if experiment is not None and experiment != exp:
        raise ConfigParse(f"config is for {exp!r}, command line asked for {experiment!r}", key="experiment",
                          line=where.get(("run", "experiment")))
    for name in sections:
        if name not in ("run", exp):
            first = min((ln for (s, _), ln in where.items() if s == name), default=None)
            raise ConfigParse(f"unknown section [{name}]", line=first)
    schema = PARAMS[exp]
    given = sections.get(exp, {})
    params = {}
    for key, val in given.items():
        if key not in schema:
            raise ConfigParse(f"unknown parameter for {exp}", key=key, line=where[(exp, key)])
        params[key] = convert(schema[key][0], val, key, where[(exp, key)])
    for key, (kind, default) in schema.items():
        if key not in params:
            params[key] = convert(kind, default, key) if isinstance(default, str) and kind != "str" else default
    seed = convert("int", run["seed"], "seed", where[("run", "seed")]) if "seed" in run else 0
    output = convert("str", run["output"], "output", where[("run", "output")]) if "output" in run else DEFAULT_OUTPUT
    _validate(exp, params, {k: where.get((exp, k)) for k in params})
    return ExperimentConfig(exp, params, seed, output, {k: where.get((exp, k)) for k in params})


def _validate(exp: str, params: dict, lines: dict):
    def need(cond, key, msg):
        if not cond:
            raise ConfigParse(msg, key=key, line=lines.get(key))

    for key, val in params.items():
        vals = val if isinstance(val, list) else [val]
        if key in ("samples", "probes", "configs", "count1", "count2", "max_iter", "iters", "d", "n"):
            need(all(v > 0 for v in vals), key, "must be positive")
        if key in ("tau", "M", "mu", "nu", "R", "L", "tol", "p_prime", "cap_radius", "bump_radius", "support_radius"):
            need(all(v > 0 for v in vals), key, "must be positive")
    if "N" in params:
        need(params["N"] >= 0 if exp == "bilinear" else params["N"] >= 2, "N", "grid size out of range")
    if "n" in params:
        need(params["n"] >= 2, "n", "ambient dimension must be at least 2")
    if "p_prime" in params:
        need(1 <= params["p_prime"] <= 2, "p_prime", "p' must lie in [1, 2]")
    if exp == "expectation":
        need(params["samples"] >= 20, "samples", "need at least 20 samples")
        need(0 <= params["index"] < params["d"], "index", "derivative index out of range")


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParse(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, experiment)


# --- running --------------------------------------------------------------------


def run(config: ExperimentConfig, jobs: int = 1) -> RunOutput:
    """Run one experiment in memory; module errors get the experiment name added."""
    try:
        return RUNNERS[config.experiment](config.params, config.seed, jobs)
    except RlabError as exc:
        exc.args = (f"{config.experiment}: {exc}",) + exc.args[1:]
        raise


def version_stamp() -> str:
    import matplotlib
    import numpy
    import scipy

    return (
        f"rlab {__version__}\n"
        f"python {platform.python_version()}\n"
        f"numpy {numpy.__version__}\n"
        f"scipy {scipy.__version__}\n"
        f"matplotlib {matplotlib.__version__}\n"
    )


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get("RLAB_OUT") or config.output)


def run_dir(config: ExperimentConfig) -> Path:
    return output_root(config) / f"{config.experiment}-{config.digest()}"


def _summary_text(config: ExperimentConfig, out: RunOutput) -> str:
    lines = [f"experiment = {config.experiment}", f"config_hash = {config.digest()}",
             f"status = {'ok' if out.ok else 'invariant-failure'}"]
    for k, v in out.summary.items():
        lines.append(f"{k} = {_format(v)}")
    for c in out.checks:
        lines.append(f"check {c.name} = {'pass' if c.ok else 'FAIL'}  # {c.detail}")
    return "\n".join(lines) + "\n"


def write_outputs(config: ExperimentConfig, out: RunOutput, target: Path) -> list:
    """Write every artifact into ``target``, going through a scratch directory
    so a failed write leaves no half-finished run behind."""
    root = target.parent
    try:
        root.mkdir(parents=True, exist_ok=True)
        scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=root))
    except OSError as exc:
        raise Unwritable(f"cannot write under {root}: {exc.strerror or exc}") from None
    notes = []
    try:
        (scratch / "config.txt").write_text(config.canonical())
        (scratch / "version.txt").write_text(version_stamp())
        for name, table in out.tables.items():
            (scratch / f"{name}.csv").write_text(table.to_csv())
        for spec in out.plots:
            try:
                table = out.tables.get(spec.table) or out.plot_tables[spec.table]
                emit_plot(table, spec.kind, scratch / spec.filename, spec.x, spec.y, spec.err,
                          title=config.experiment)
            except EmptyTable as exc:
                notes.append(f"plot {spec.filename} skipped: {exc}")
        if out.packets is not None:
            save_packets(out.packets, scratch / "packets.bin")
        text = _summary_text(config, out)
        if notes:
            text += "".join(f"note = {n}\n" for n in notes)
        (scratch / "summary.txt").write_text(text)
        if target.exists():
            shutil.rmtree(target)
        scratch.rename(target)
    except OSError as exc:
        shutil.rmtree(scratch, ignore_errors=True)
        raise Unwritable(f"cannot write run directory {target}: {exc.strerror or exc}") from None
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    return notes


def previous_status(target: Path) -> str | None:
    summary = target / "summary.txt"
    if not summary.is_file():
        return None
    for line in summary.read_text().splitlines():
        if line.startswith("status = "):
            return line.split("=", 1)[1].strip()
    return None


def execute(config: ExperimentConfig, jobs: int = 1, force: bool = False) -> tuple[Path, RunOutput | None]:
    """Run and write unless an identical run is already on disk.  Returns the
    run directory and the output (None for a no-op)."""
    target = run_dir(config)
    if not force and previous_status(target) is not None:
        return target, None
    out = run(config, jobs)
    write_outputs(config, out, target)
    return target, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rlab", description="Run one numerical experiment from a config file.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="plain-text config with [run] and [<experiment>] sections")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for independent sweep cells")
    ap.add_argument("--force", action="store_true", help="rerun even if an identical run exists")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.jobs < 1:
            raise ConfigParse("--jobs must be at least 1", key="jobs")
        config = load_config(args.config, args.experiment)
        if args.seed is not None:
            config.seed = args.seed
        target, out = execute(config, args.jobs, args.force)
        if out is None:
            status = previous_status(target)
            log.info("%s: identical run already at %s (%s); use --force to redo", config.experiment, target, status)
            return 0 if status == "ok" else 2
        for c in out.checks:
            log.info("%s %s: %s", "pass" if c.ok else "FAIL", c.name, c.detail)
        log.info("wrote %s", target)
        if not out.ok:
            failed = ", ".join(c.name for c in out.checks if not c.ok)
            raise InvariantFailure(f"{config.experiment}: check failed: {failed}")
        return 0
    except InvariantFailure as exc:
        log.error("%s", exc)
        return 2
    except (RlabError, OSError, ValueError) as exc:
        log.error("error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

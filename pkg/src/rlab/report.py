"""Result tables, CSV output and SVG plots.

Floats go into CSV through ``repr`` so a table read back gives the same
numbers bit for bit, and every annotated number on a plot is recomputed from
the table rows alone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyTable, RlabError
from .restriction import fit_loglog, regime_cells

# column name -> type; str columns are labels, the rest are numeric
TABLE_SCHEMAS = {
    "cgo": {"tau": float, "sample": int, "iterations": int, "residual": float, "psi_norm": float,
            "contraction": float},
    "expectation": {"M": float, "samples": int, "mean_qnorm": float, "se_qnorm": float,
                    "mean_mqnorm": float, "se_mqnorm": float},
    "bilinear": {"n": int, "surface": str, "p_prime": float, "mu": float, "nu": float,
                 "construction": str, "ratio": float},
    "wavepacket": {"sample": int, "caps": int, "coefficients": int, "parseval_error": float,
                   "reconstruction_error": float, "decay_order": float, "far_ratio": float,
                   "axis_amplitude": float},
    "decay": {"sample": int, "distance": float, "amplitude": float},
    "kakeya": {"R": float, "delta": float, "mu2": int, "lambda1": int, "T1": int, "T2": int,
               "lhs": int, "rhs": float},
    "induction": {"R": float, "estimate": float},
}


class SchemaError(RlabError, ValueError):
    pass


@dataclass
class ResultTable:
    columns: tuple
    rows: list = field(default_factory=list)
    schema: str | None = None

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = [tuple(r) for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def validate(self) -> "ResultTable":
        """Check arity and types against the declared schema."""
        types = TABLE_SCHEMAS.get(self.schema) if self.schema else None
        if types is not None and tuple(types) != self.columns:
            raise SchemaError(f"columns {self.columns} do not match the {self.schema} schema {tuple(types)}")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise SchemaError(f"row {i} has {len(row)} values for {len(self.columns)} columns")
            for name, v in zip(self.columns, row):
                want = types[name] if types else None
                if want is str or (want is None and isinstance(v, str)):
                    if not isinstance(v, str):
                        raise SchemaError(f"row {i}, column {name}: expected a label, got {v!r}")
                    continue
                if isinstance(v, (bool, np.bool_)) or not isinstance(v, (int, float, np.integer, np.floating)):
                    raise SchemaError(f"row {i}, column {name}: expected a number, got {v!r}")
                if want is int and float(v) != int(v):
                    raise SchemaError(f"row {i}, column {name}: expected an integer, got {v!r}")
                if math.isnan(float(v)):
                    raise SchemaError(f"row {i}, column {name}: NaN")
        return self

    def to_csv(self) -> str:
        self.validate()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        types = TABLE_SCHEMAS.get(self.schema, {}) if self.schema else {}
        for row in self.rows:
            w.writerow([_cell(v, types.get(c)) for c, v in zip(self.columns, row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, schema: str | None = None) -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        types = TABLE_SCHEMAS.get(schema, {}) if schema else {}
        rows = []
        for raw in reader:
            rows.append(tuple(_parse(v, types.get(c)) for c, v in zip(header, raw)))
        return cls(tuple(header), rows, schema)


def _cell(v, want):
    if isinstance(v, str):
        return v
    if want is int or isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse(v: str, want):
    if want is str:
        return v
    if want is int:
        return int(v)
    if want is float:
        return float(v)
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


# --- plots ---------------------------------------------------------------------


class PlotInfo(NamedTuple):
    path: str
    kind: str
    numbers: dict


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.column_stack([np.ones(lx.size), lx])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(coef[1]), float(coef[0])


def bilinear_fit_from_table(table: ResultTable) -> dict:
    """Per-cell maximum ratio over regime cells, then the two-exponent fit."""
    best: dict = {}
    for mu, nu, r in zip(table.column("mu"), table.column("nu"), table.column("ratio")):
        key = (float(mu), float(nu))
        best[key] = max(best.get(key, -math.inf), float(r))
    cells = set(regime_cells(sorted({k[0] for k in best}), sorted({k[1] for k in best})))
    keys = [k for k in best if k in cells]
    keys.sort(key=lambda k: (-k[0], -k[1]))
    if len(keys) < 3:
        raise EmptyTable("need at least three regime cells for the exponent fit")
    e_mu, e_nu, r2, c = fit_loglog([k[0] for k in keys], [k[1] for k in keys], [best[k] for k in keys])
    return {"e_mu": e_mu, "e_nu": e_nu, "r2": r2, "intercept": c, "cells": keys, "best": [best[k] for k in keys]}


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rlab"
    matplotlib.rcParams["svg.fonttype"] = "none"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    return plt, fig, ax


def _save(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _group(xs, ys):
    """Mean and standard error of y for each distinct x, sorted by x."""
    groups: dict = {}
    for x, y in zip(xs, ys):
        groups.setdefault(float(x), []).append(float(y))
    keys = sorted(groups)
    mean = [float(np.mean(groups[k])) for k in keys]
    se = [float(np.std(groups[k], ddof=1) / math.sqrt(len(groups[k]))) if len(groups[k]) > 1 else 0.0 for k in keys]
    return keys, mean, se


def emit_plot(table: ResultTable, kind: str, path, x: str | None = None, y: str | None = None,
              err: str | None = None, title: str = "") -> PlotInfo:
    """Write an SVG plot of ``table``.

    ``loglog``: scatter of ``y`` against ``x`` with the least-squares line and
    its slope annotated.  A bilinear table (mu, nu, ratio columns) instead
    shows the nu-compensated per-cell maxima against mu with both fitted
    exponents.  ``trend``: mean of ``y`` per distinct ``x`` with error bars,
    taken from ``err`` when given, else the standard error over rows.
    """
    if not len(table):
        raise EmptyTable("cannot plot an empty table")
    if kind not in ("loglog", "trend"):
        raise ValueError(f"plot kind must be loglog or trend, got {kind!r}")
    plt, fig, ax = _figure()
    numbers: dict = {}
    cols = set(table.columns)
    if kind == "loglog" and {"mu", "nu", "ratio"} <= cols and x is None:
        fit = bilinear_fit_from_table(table)
        mus = np.array([k[0] for k in fit["cells"]])
        nus = np.array([k[1] for k in fit["cells"]])
        comp = np.asarray(fit["best"]) / nus ** fit["e_nu"]
        for nu in sorted(set(nus)):
            sel = nus == nu
            ax.loglog(mus[sel], comp[sel], "o", label=f"nu = 2^{math.log2(nu):.0f}")
        grid = np.geomspace(mus.min(), mus.max(), 50)
        ax.loglog(grid, math.exp(fit["intercept"]) * grid ** fit["e_mu"], "-", color="k")
        ax.set_xlabel("mu")
        ax.set_ylabel("max ratio / nu^e_nu")
        numbers = {k: fit[k] for k in ("e_mu", "e_nu", "r2")}
        ax.legend(fontsize=7)
        note = f"e_mu = {fit['e_mu']:.6f}\ne_nu = {fit['e_nu']:.6f}\nr^2 = {fit['r2']:.4f}"
    elif kind == "loglog":
        if x is None or y is None:
            raise ValueError("loglog plot needs x and y columns")
        xs, ys = np.asarray(table.column(x), float), np.asarray(table.column(y), float)
        keep = (xs > 0) & (ys > 0)
        if keep.sum() < 2:
            raise EmptyTable("fewer than two positive points to fit")
        slope, icpt = loglog_slope(xs[keep], ys[keep])
        ax.loglog(xs[keep], ys[keep], "o")
        grid = np.geomspace(xs[keep].min(), xs[keep].max(), 50)
        ax.loglog(grid, math.exp(icpt) * grid**slope, "-", color="k")
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        numbers = {"slope": slope, "intercept": icpt}
        note = f"slope = {slope:.6f}"
    else:
        if x is None or y is None:
            raise ValueError("trend plot needs x and y columns")
        if err is not None:
            xs = [float(v) for v in table.column(x)]
            order = np.argsort(xs)
            keys = [xs[i] for i in order]
            mean = [float(table.column(y)[i]) for i in order]
            se = [float(table.column(err)[i]) for i in order]
        else:
            keys, mean, se = _group(table.column(x), table.column(y))
        ax.errorbar(keys, mean, yerr=se, fmt="o-", capsize=3)
        ax.set_xscale("log", base=2)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        numbers = {"x": keys, "mean": mean, "se": se}
        note = "\n".join(f"{k:g}: {m:.4g} +- {s:.2g}" for k, m, s in zip(keys, mean, se))
    ax.text(0.02, 0.02, note, transform=ax.transAxes, fontsize=8, va="bottom", family="monospace")
    if title:
        ax.set_title(title)
    _save(plt, fig, str(path))
    return PlotInfo(str(path), kind, numbers)


def table_from_records(columns: Sequence[str], records, schema: str | None = None) -> ResultTable:
    return ResultTable(tuple(columns), [tuple(r) for r in records], schema).validate()

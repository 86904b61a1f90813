"""Experiment runners behind the command line.

Each runner takes the typed parameter dict of its config section, a seed and
a job count, and returns a :class:`RunOutput`: result tables, named invariant
checks, summary numbers and the plots to draw.  Runners never touch the
filesystem; :mod:`rlab.cli` writes everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import constants
from .cgo import (
    EXPECTATION_COLUMNS,
    ConductivityField,
    expectation_sweep,
    haar_rotation,
    neumann_solve,
    potential_from_conductivity,
)
from .grid import Field, make_grid, radial_bump
from .report import ResultTable, table_from_records
from .restriction import (
    density_on_ball,
    elliptic,
    extension_eval,
    hemisphere,
    k_estimate_and_fit,
    paraboloid,
)
from .wavepackets import (
    cap_partition,
    induction_probe,
    kakeya_rows,
    packet_decay_audit,
    random_incidence_config,
    wp_decompose,
    wp_reconstruct,
)
from .xb import PhaseVector

EXPERIMENTS = ("cgo", "expectation", "bilinear", "wavepacket", "kakeya", "induction")

# parameter schemas: name -> (kind, default); list defaults are strings parsed
# like config values so the canonical echo looks the same either way
PARAMS = {
    "cgo": {
        "d": ("int", 3),
        "N": ("int", 64),
        "L": ("float", 1.0),
        "tau": ("floats", "8, 16, 32"),
        "samples": ("int", 20),
        "amplitude": ("float", 0.1),
        "bump_radius": ("float", 0.45),
        "tol": ("float", 1e-10),
        "max_iter": ("int", 200),
        "residual_limit": ("float", 1e-6),
        "decrease_fraction": ("float", 0.75),
    },
    "expectation": {
        "d": ("int", 3),
        "N": ("int", 32),
        "L": ("float", 2.0),
        "M": ("floats", "8, 16, 32, 64"),
        "samples": ("int", 50),
        "index": ("int", 0),
        "support_radius": ("float", 0.9),
        "iters": ("int", 200),
        "tol": ("float", 1e-8),
    },
    "bilinear": {
        "n": ("int", 2),
        "surface": ("str", "paraboloid"),
        "eps": ("float", 0.1),
        "p_prime": ("float", 2.0),
        "mu": ("floats", "2^-5, 2^-6, 2^-7, 2^-8"),
        "nu": ("floats", "2^-2, 2^-3, 2^-4, 2^-5, 2^-6, 2^-7, 2^-8"),
        "candidates": ("int", 2),
        "N": ("int", 0),
    },
    "wavepacket": {
        "n": ("int", 2),
        "R": ("float", 256.0),
        "samples": ("int", 3),
        "probes": ("int", 200),
        "refine": ("int", 0),
        "cap_radius": ("float", 0.25),
        "delta": ("float", 0.25),
        "parseval_limit": ("float", 1e-8),
        "reconstruction_limit": ("float", 1e-6),
        "min_order": ("float", 4.0),
    },
    "kakeya": {
        "n": ("int", 2),
        "R": ("float", 256.0),
        "delta": ("float", 0.1),
        "configs": ("int", 10),
        "count1": ("int", 24),
        "count2": ("int", 24),
        "relation_factor": ("float", 2.0),
        "plane_samples": ("int", 25),
        "C": ("float", 0.0),
        "C_delta": ("float", 0.0),
    },
    "induction": {
        "n": ("int", 2),
        "surface": ("str", "paraboloid"),
        "nu": ("float", 0.125),
        "R": ("floats", "8, 16, 32, 64"),
        "p_prime": ("float", 2.0),
        "candidates": ("int", 2),
        "max_exponent": ("float", 0.1),
    },
}

# refine factor h = R^(-1/2) / refine that keeps packet evaluation alias free
DEFAULT_REFINE = {2: 128, 3: 32}


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class PlotSpec:
    table: str
    kind: str
    filename: str
    x: str | None = None
    y: str | None = None
    err: str | None = None


@dataclass
class RunOutput:
    tables: dict  # name -> ResultTable; "results" is the main one
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)
    packets: object = None  # PacketCoefficients to save, if any
    plot_tables: dict = field(default_factory=dict)  # drawn but not written as CSV

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)


def _sub_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- cgo -----------------------------------------------------------------------


def run_cgo(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    grid = make_grid(p["d"], p["N"], p["L"])
    bump = radial_bump(grid, p["bump_radius"])
    gamma = ConductivityField(Field(grid, 1.0 + p["amplitude"] * bump.values.real))
    q = potential_from_conductivity(gamma)
    rows = []
    norms = np.zeros((p["samples"], len(p["tau"])))
    for k in range(p["samples"]):
        U = haar_rotation(_sub_seed(seed, k), grid.dim)
        for j, tau in enumerate(p["tau"]):
            _, rep = neumann_solve(q, PhaseVector(U, tau), max_iter=p["max_iter"], tol=p["tol"])
            norms[k, j] = rep.psi_norm
            rows.append((float(tau), k, rep.iterations, rep.residual, rep.psi_norm, rep.contraction_estimate))
    table = table_from_records(("tau", "sample", "iterations", "residual", "psi_norm", "contraction"), rows, "cgo")
    worst = max(r[3] for r in rows)
    decreasing = float(np.mean(np.all(np.diff(norms, axis=1) < 0, axis=1)))
    checks = [
        Check("residual", worst < p["residual_limit"], f"largest residual {worst:.3g}"),
        Check("psi-norm-decreases", decreasing >= p["decrease_fraction"],
              f"{decreasing:.2f} of samples decrease across tau"),
    ]
    summary = {"max_residual": worst, "decreasing_fraction": decreasing}
    for j, tau in enumerate(p["tau"]):
        summary[f"mean_psi_norm_tau_{tau:g}"] = float(norms[:, j].mean())
    plots = [PlotSpec("results", "trend", "psi_norm.svg", "tau", "psi_norm")]
    return RunOutput({"results": table}, checks, summary, plots)


# --- expectation ------------------------------------------------------------------


def run_expectation(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    grid = make_grid(p["d"], p["N"], p["L"])
    f = radial_bump(grid, p["support_radius"])
    rows = expectation_sweep(f, p["index"], p["M"], p["samples"], seed, jobs=jobs, iters=p["iters"], tol=p["tol"])
    recs = [(r.M, r.samples, r.mean_qnorm, r.se_qnorm, r.mean_mqnorm, r.se_mqnorm) for r in rows]
    table = table_from_records(EXPECTATION_COLUMNS, recs, "expectation")
    q = [r.mean_qnorm for r in rows]
    m = [r.mean_mqnorm for r in rows]
    checks = [
        Check("qnorm-decreases", all(b < a for a, b in zip(q, q[1:])), "means " + ", ".join(f"{v:.4g}" for v in q)),
        Check("mqnorm-decreases", all(b < a for a, b in zip(m, m[1:])), "means " + ", ".join(f"{v:.4g}" for v in m)),
    ]
    plots = [
        PlotSpec("results", "trend", "qnorm.svg", "M", "mean_qnorm", "se_qnorm"),
        PlotSpec("results", "trend", "mqnorm.svg", "M", "mean_mqnorm", "se_mqnorm"),
    ]
    return RunOutput({"results": table}, checks, {"levels": len(rows)}, plots)


# --- bilinear ------------------------------------------------------------------------


def make_surface(kind: str, n: int, eps: float = 0.1, seed: int = 0):
    if kind == "paraboloid":
        return paraboloid(n)
    if kind == "hemisphere":
        return hemisphere(n)
    if kind == "elliptic":
        return elliptic(n, eps, seed)
    raise ValueError(f"unknown surface {kind!r}")


def run_bilinear(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    n = p["n"]
    surf = make_surface(p["surface"], n, p["eps"], seed)
    fit = k_estimate_and_fit(surf, p["p_prime"], p["mu"], p["nu"], candidates=p["candidates"], seed=seed,
                             N=p["N"] or None, jobs=jobs)
    table = table_from_records(("n", "surface", "p_prime", "mu", "nu", "construction", "ratio"),
                               [tuple(r) for r in fit.rows], "bilinear")
    summary = {"e_mu": fit.e_mu, "e_nu": fit.e_nu, "r2": fit.r2, "cells": len(fit.cells)}
    checks = []
    key = f"bilinear_upper_C_n{n}"
    endpoint = abs(p["p_prime"] - n / (n - 1)) < 1e-12
    if endpoint and p["surface"] == "paraboloid" and key in constants.load():
        from .calibrate import upper_envelope

        C = constants.get(key)
        worst = max(r.ratio / float(upper_envelope(n, r.mu, r.nu, r.p_prime)) for r in fit.rows)
        checks.append(Check("upper-envelope", worst <= C, f"largest ratio / envelope {worst:.4g} against C = {C:.4g}"))
        summary["envelope_ratio"] = worst
    plots = [PlotSpec("results", "loglog", "exponents.svg")]
    return RunOutput({"results": table}, checks, summary, plots)


# --- wave packets -----------------------------------------------------------------------


def run_wavepacket(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    n, R = p["n"], p["R"]
    m = n - 1
    surf = paraboloid(n)
    s = R**-0.5
    h = s / (p["refine"] or DEFAULT_REFINE.get(n, 32))
    center = np.zeros(m)
    center[0] = 0.5
    part = cap_partition(p["cap_radius"], R, m, h, domain_center=center)
    rows, decay, first = [], [], None
    for k in range(p["samples"]):
        rng = np.random.default_rng(_sub_seed(seed, k))
        f = density_on_ball(center, p["cap_radius"], h,
                            lambda pts: rng.normal(size=len(pts)) + 1j * rng.normal(size=len(pts)))
        co = wp_decompose(f, R, part)
        pars = abs(co.energy() / f.l2() ** 2 - 1.0)
        x = np.column_stack([rng.uniform(-R / 2, R / 2, (p["probes"], m)), rng.uniform(-R, R, p["probes"])])
        direct = extension_eval(f, surf, x)
        rec = wp_reconstruct(co, x, surf)
        rerr = float(np.max(np.abs(direct - rec)) / np.max(np.abs(direct)))
        row = int(np.argmax(np.abs(co.coeffs)))
        audit = packet_decay_audit(co, row, p["delta"], surface=surf)
        rows.append((k, len(part.centers), len(co.coeffs), pars, rerr, audit.order, audit.far_ratio,
                     audit.axis_amplitude))
        decay += [(k, float(d), float(a)) for d, a in zip(audit.distances, audit.amplitudes)]
        if first is None:
            first = co
    table = table_from_records(("sample", "caps", "coefficients", "parseval_error", "reconstruction_error",
                                "decay_order", "far_ratio", "axis_amplitude"), rows, "wavepacket")
    dtable = table_from_records(("sample", "distance", "amplitude"), decay, "decay")
    pe = max(r[3] for r in rows)
    re = max(r[4] for r in rows)
    order = min(r[5] for r in rows)
    checks = [
        Check("parseval", pe <= p["parseval_limit"], f"largest Parseval error {pe:.3g}"),
        Check("reconstruction", re <= p["reconstruction_limit"], f"largest reconstruction error {re:.3g}"),
        Check("decay-order", order >= p["min_order"], f"smallest fitted decay order {order:.3f}"),
    ]
    summary = {"max_parseval_error": pe, "max_reconstruction_error": re, "min_decay_order": order}
    decay0 = ResultTable(dtable.columns, [r for r in dtable.rows if r[0] == 0], "decay")
    plots = [PlotSpec("decay0", "loglog", "decay.svg", "distance", "amplitude")]
    return RunOutput({"results": table, "decay": dtable}, checks, summary, plots, first, {"decay0": decay0})


# --- kakeya ------------------------------------------------------------------------------


def run_kakeya(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    n = p["n"]
    C = p["C"] or constants.get(f"kakeya_C_n{n}")
    Cd = p["C_delta"] or constants.get("kakeya_C_delta")
    rows = []
    for j in range(p["configs"]):
        cfg = random_incidence_config(n, p["R"], p["delta"], _sub_seed(seed, j), p["count1"], p["count2"],
                                      relation_factor=p["relation_factor"])
        rows += kakeya_rows(cfg, C, Cd, p["plane_samples"])
    table = table_from_records(("R", "delta", "mu2", "lambda1", "T1", "T2", "lhs", "rhs"), rows, "kakeya")
    bad = sum(1 for r in rows if r[6] > r[7])
    worst = max((r[6] / r[7] for r in rows), default=0.0)
    checks = [Check("kakeya-bound", bad == 0, f"{bad} violations in {len(rows)} class pairs, worst lhs/rhs {worst:.3g}")]
    summary = {"class_pairs": len(rows), "violations": bad, "worst_ratio": worst, "C": C, "C_delta": Cd}
    plots = [PlotSpec("results", "trend", "kakeya.svg", "mu2", "lhs")]
    return RunOutput({"results": table}, checks, summary, plots)


# --- induction -------------------------------------------------------------------------------


def run_induction(p: dict, seed: int, jobs: int = 1) -> RunOutput:
    surf = make_surface(p["surface"], p["n"])
    res = induction_probe(surf, p["nu"], p["R"], p["p_prime"], candidates=p["candidates"], seed=seed)
    table = table_from_records(("R", "estimate"), [(r.R, r.estimate) for r in res.rows], "induction")
    exp = res.exponent
    checks = []
    if exp is not None:
        checks.append(Check("flat-in-R", exp <= p["max_exponent"], f"fitted R exponent {exp:.4g}"))
    plots = [PlotSpec("results", "loglog", "induction.svg", "R", "estimate")]
    return RunOutput({"results": table}, checks, {"exponent": math.nan if exp is None else exp}, plots)


RUNNERS = {
    "cgo": run_cgo,
    "expectation": run_expectation,
    "bilinear": run_bilinear,
    "wavepacket": run_wavepacket,
    "kakeya": run_kakeya,
    "induction": run_induction,
}

"""End-to-end acceptance checks, one per criterion.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line and then asserts.  The slow ones run the experiment drivers with their
default parameters.
"""

import math
import time

import numpy as np
import pytest

from oracles import norm_ratio, pairing_ratio
from rlab import constants
from rlab.calibrate import (
    MU_LEVELS,
    NU_LEVELS,
    axis_pair,
    axis_witness,
    incidence_suite,
    separated_pair,
    upper_envelope,
)
from rlab.cgo import haar_rotation
from rlab.cli import main, parse_config
from rlab.experiments import RUNNERS
from rlab.grid import make_grid
from rlab.restriction import (
    axis_bound,
    cell_ratios,
    fit_loglog,
    k_estimate_and_fit,
    l2_bilinear_sides,
    paraboloid,
)
from rlab.wavepackets import kakeya_rows
from rlab.xb import PhaseVector, dist_to_sigma, inv_delta_operator_norm, symbol_p


def verdict(number, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def defaults(exp, **overrides):
    body = "".join(f"{k} = {v}\n" for k, v in overrides.items())
    return parse_config(f"[run]\nexperiment = {exp}\n[{exp}]\n{body}").params


def test_criterion_01_inverse_operator_norm_is_one():
    t0 = time.time()
    grid = make_grid(3, 32, 2.0)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(10):
        z = PhaseVector(haar_rotation(int(rng.integers(1 << 30)), 3), float(rng.uniform(1.0, 12.0)))
        est = inv_delta_operator_norm(grid, z)
        worst = max(worst, abs(est.value - 1.0))
    dt = time.time() - t0
    verdict(1, worst <= 1e-6 and dt < 60, f"max |norm - 1| = {worst:.2e} over 10 draws in {dt:.1f}s")


def test_criterion_02_symbol_bracket():
    lo, hi = constants.get("symbol_ratio_lo"), constants.get("symbol_ratio_hi")
    rng = np.random.default_rng(7)
    bad, lo_seen, hi_seen, used = 0, math.inf, 0.0, 0
    for k in range(10_000):
        U = haar_rotation(int(rng.integers(1 << 30)), 3)
        tau = float(np.exp(rng.uniform(0.0, math.log(100.0))))
        z = PhaseVector(U, tau)
        theta = rng.uniform(0, 2 * math.pi)
        on = tau * U[:, 1] + tau * (math.cos(theta) * U[:, 1] + math.sin(theta) * U[:, 2])
        step = rng.normal(size=3)
        xi = on + step / np.linalg.norm(step) * rng.uniform(0, 0.1) * tau
        d = float(dist_to_sigma(xi, z))
        if d == 0.0 or d > tau / 10:
            continue
        used += 1
        r = abs(complex(symbol_p(xi, z))) / (tau * d)
        lo_seen, hi_seen = min(lo_seen, r), max(hi_seen, r)
        bad += not (lo <= r <= hi)
    verdict(2, bad == 0 and used >= 9_000,
            f"{bad} violations in {used} samples, ratio range [{lo_seen:.4f}, {hi_seen:.4f}] inside [{lo}, {hi}]")


def test_criterion_03_scaling_identities():
    norm_err = max(abs(norm_ratio(s, (-0.5, 0.5)[s % 2]) - 1) for s in range(20))
    pair_err = max(abs(pairing_ratio(s, s % 3) - 1) for s in range(20))
    verdict(3, norm_err <= 0.01 and pair_err <= 0.01,
            f"norm identity max rel error {norm_err:.2e}, pairing identity {pair_err:.2e} (20 fields each)")


def test_criterion_04_cgo_construction():
    t0 = time.time()
    out = RUNNERS["cgo"](defaults("cgo"), 0)
    dt = time.time() - t0
    s = out.summary
    verdict(4, out.ok and dt < 600,
            f"max residual {s['max_residual']:.2e}, decreasing fraction {s['decreasing_fraction']:.2f}, {dt:.0f}s")


def test_criterion_05_expectation_decay():
    t0 = time.time()
    out = RUNNERS["expectation"](defaults("expectation"), 0)
    dt = time.time() - t0
    detail = "; ".join(c.detail for c in out.checks)
    verdict(5, out.ok and dt < 1800, f"{detail}, {dt:.0f}s")


@pytest.mark.parametrize("n,p_prime,target", [(2, 2.0, (0.5, 0.5)), (3, 1.5, (0.5, 1 / 3))])
def test_criterion_06_bilinear_exponents(n, p_prime, target):
    t0 = time.time()
    fit = k_estimate_and_fit(paraboloid(n), p_prime, MU_LEVELS, NU_LEVELS, candidates=2, seed=0)
    kind = "planar-cap" if n == 2 else "squashed-cap"
    env = math.exp(fit.intercept)
    lower = [(r.mu, r.ratio / (env * r.mu**fit.e_mu * r.nu**fit.e_nu)) for r in fit.rows
             if r.construction == kind and (r.mu, r.nu) in {(c.mu, c.nu) for c in fit.cells}]
    levels = sorted({m for m, _ in lower})
    within = all(0.1 <= v <= 10 for _, v in lower)
    C = constants.get(f"bilinear_upper_C_n{n}")
    upper = max(r.ratio / float(upper_envelope(n, r.mu, r.nu, p_prime)) for r in fit.rows)
    dt = time.time() - t0
    ok = (abs(fit.e_mu - target[0]) <= 0.1 and abs(fit.e_nu - target[1]) <= 0.1 and within
          and len(levels) >= 4 and upper <= C and dt < 1200)
    verdict(6, ok, f"n={n} p'={p_prime:g}: e_mu {fit.e_mu:.3f}, e_nu {fit.e_nu:.3f} (target {target[0]:.2f}, "
            f"{target[1]:.2f}); {kind} / envelope in [{min(v for _, v in lower):.2f}, "
            f"{max(v for _, v in lower):.2f}] over {len(levels)} mu levels; upper ratio {upper:.3f} <= {C:.3f}")


@pytest.mark.parametrize("n,p_prime", [(2, 2.0), (3, 1.5)])
def test_criterion_07_translated_cap_regime(n, p_prime):
    p = p_prime / (p_prime - 1)
    mus, nus, rs = [], [], []
    for k in (4, 6, 8):
        mu = 2.0**-k
        for nu in (0.5, 0.25, math.sqrt(mu)):
            rows = cell_ratios(paraboloid(n), p_prime, mu, nu, constructions=("translated-cap",))
            if rows:
                mus.append(mu), nus.append(nu), rs.append(rows[0].ratio)
    e_mu, e_nu, r2, _ = fit_loglog(mus, nus, rs)
    target = (n + 1) / (2 * p)
    verdict(7, len(rs) == 9 and abs(e_mu - target) <= 0.1 and abs(e_nu) <= 0.1,
            f"n={n} p'={p_prime:g}: e_mu {e_mu:.3f} against {target:.3f}, e_nu {e_nu:.3f}, r2 {r2:.4f}")


def test_criterion_08_axis_bound():
    C = constants.get("axis_C_p200")
    mus = [2.0**-k for k in (1, 2, 3, 4, 6)]
    bad, worst = 0, 0.0
    for seed in range(100):
        a, b = axis_pair(seed)
        for mu in mus:
            lhs, rhs = axis_bound(a, b, mu, 2.0, C)
            worst = max(worst, lhs / rhs)
            bad += lhs > rhs
    sharp = min(axis_bound(*axis_witness(mu), mu, 2.0, C)[0] / axis_bound(*axis_witness(mu), mu, 2.0, C)[1]
                for mu in mus)
    verdict(8, bad == 0 and sharp >= 0.2,
            f"{bad} violations in 500 pairs (worst lhs/rhs {worst:.3f}), witness reaches {sharp:.3f} of the bound")


def test_criterion_09_wave_packets():
    t0 = time.time()
    out = RUNNERS["wavepacket"](defaults("wavepacket"), 0)
    dt = time.time() - t0
    s = out.summary
    verdict(9, out.ok and dt < 300,
            f"Parseval {s['max_parseval_error']:.1e}, reconstruction {s['max_reconstruction_error']:.1e}, "
            f"decay order {s['min_decay_order']:.2f}, {dt:.0f}s")


@pytest.mark.parametrize("n", [2, 3])
def test_criterion_10_l2_bilinear(n):
    C = constants.get(f"radon_l2_C_n{n}")
    surf = paraboloid(n)
    bad, worst = 0, 0.0
    for seed in range(50):
        lhs, rhs = l2_bilinear_sides(*separated_pair(n, seed), surf)
        worst = max(worst, lhs / rhs if rhs else 0.0)
        bad += lhs > C * rhs
    verdict(10, bad == 0, f"n={n}: {bad} violations in 50 pairs, worst lhs/rhs {worst:.3f} against C = {C:.3f}")


@pytest.mark.parametrize("n", [2, 3])
def test_criterion_11_kakeya_incidence(n):
    C, Cd = constants.get(f"kakeya_C_n{n}"), constants.get("kakeya_C_delta")
    bad, total, worst = 0, 0, 0.0
    for seed in range(100):
        for row in kakeya_rows(incidence_suite(n, seed), C, Cd):
            total += 1
            worst = max(worst, row[6] / row[7])
            bad += row[6] > row[7]
    verdict(11, bad == 0 and total > 0,
            f"n={n}: {bad} violations in {total} class pairs over 100 configs, worst lhs/rhs {worst:.3f}")


SMALL = {
    "cgo": "d = 3\nN = 16\nL = 1.0\ntau = 8, 16\nsamples = 2\n",
    "expectation": "d = 3\nN = 16\nL = 2.0\nM = 8, 16\nsamples = 20\n",
    "bilinear": "n = 2\nmu = 2^-4, 2^-5, 2^-6, 2^-7\nnu = 2^-2, 2^-3, 2^-4, 2^-5, 2^-6, 2^-7\ncandidates = 1\n",
    "wavepacket": "n = 2\nR = 256\nsamples = 1\nprobes = 20\n",
    "kakeya": "n = 2\nR = 64\nconfigs = 2\ncount1 = 8\ncount2 = 8\n",
    "induction": "n = 2\nnu = 0.25\nR = 4, 8, 16\ncandidates = 1\n",
}


def test_criterion_12_reruns_are_byte_identical(tmp_path, monkeypatch):
    differing = []
    for exp, body in SMALL.items():
        cfg = tmp_path / f"{exp}.cfg"
        cfg.write_text(f"[run]\nexperiment = {exp}\nseed = 3\n[{exp}]\n{body}")
        trees = []
        for k in range(2):
            root = tmp_path / f"{exp}-{k}"
            monkeypatch.setenv("RLAB_OUT", str(root))
            assert main([exp, "--config", str(cfg)]) == 0
            (target,) = list(root.iterdir())
            trees.append({str(p.relative_to(target)): p.read_bytes() for p in sorted(target.rglob("*"))})
        if trees[0] != trees[1]:
            differing.append(exp)
    verdict(12, not differing, f"{len(SMALL) - len(differing)} of {len(SMALL)} experiments rerun byte-identically")

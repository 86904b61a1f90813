"""Correctors for complex geometrical optics solutions and averaged norms.

The corrector solves the conjugated equation

    Delta psi + 2 zeta . grad psi = q (1 + psi)

by the fixed-point iteration ``psi <- inv_delta(q (1 + psi))``.  On a periodic
lattice the symbol vanishes exactly at a few points (always at xi = 0), where the
periodic problem has no solution; those modes are dropped by the regularized
inverse and excluded from the residual.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import (
    Divergence,
    MaxIterExceeded,
    PositivityViolation,
    ResolutionLoss,
    SupportViolation,
)
from .grid import FREQUENCY, PHYSICAL, Field, FourierGrid, apply_multiplier, derivative, lp_norm, make_grid
from .xb import (
    SINGULAR_GUARD,
    PhaseVector,
    XbNormSpec,
    inv_delta_zeta,
    mult_operator_norm,
    symbol_p,
    xb_norm,
)

logger = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 5


def haar_rotation(seed: int, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR factorization of a
    Gaussian matrix, with the sign of diag(R) absorbed into Q."""
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))


@dataclass(frozen=True, eq=False)
class ConductivityField:
    gamma: Field
    lower_bound: float = 0.5

    def __post_init__(self):
        g = self.gamma.physical()
        vals = g.values
        if np.max(np.abs(vals.imag)) > 1e-12 * max(1.0, np.max(np.abs(vals))):
            raise ValueError("conductivity must be real")
        if not self.lower_bound > 0:
            raise ValueError("lower bound must be positive")
        x = g.grid.coords()
        outside = np.sum(x * x, axis=0) > (g.grid.box_radius / 2) ** 2
        if np.any(np.abs(vals[outside] - 1.0) > 1e-12):
            raise SupportViolation("conductivity must equal 1 outside the ball of radius L/2")
        object.__setattr__(self, "gamma", g)


def _laplacian(f: Field) -> Field:
    return apply_multiplier(f, lambda xi: -np.sum(xi * xi, axis=0))


def potential_from_conductivity(
    gamma: ConductivityField, form: Literal["laplacian", "divergence"] = "laplacian"
) -> Field:
    """q = gamma^{-1/2} Delta gamma^{1/2}, or the equivalent
    (1/2) Delta log gamma + (1/4) |grad log gamma|^2."""
    g = gamma.gamma.values.real
    if g.min() < gamma.lower_bound:
        raise PositivityViolation(f"conductivity drops to {g.min():.4g} below {gamma.lower_bound}")
    grid = gamma.gamma.grid
    if form == "laplacian":
        s = np.sqrt(g)
        q = _laplacian(Field(grid, s)).values.real / s
    elif form == "divergence":
        lg = Field(grid, np.log(g))
        q = 0.5 * _laplacian(lg).values.real
        for j in range(grid.dim):
            q = q + 0.25 * derivative(lg, j).values.real ** 2
    else:
        raise ValueError(f"unknown form {form!r}")
    return Field(grid, q, PHYSICAL)


def _regular_mask(grid: FourierGrid, zeta: PhaseVector, floor: float | None) -> tuple[np.ndarray, np.ndarray]:
    p = symbol_p(grid.freqs(), zeta)
    floor = SINGULAR_GUARD * zeta.tau**2 if floor is None else floor
    return p, np.abs(p) >= floor


def conjugated_residual(psi: Field, q: Field, zeta: PhaseVector, floor: float | None = None) -> float:
    """Relative X^{-1/2} size of Delta_zeta psi - q (1 + psi), measured off the
    lattice points where the symbol vanishes."""
    grid = q.grid
    p, keep = _regular_mask(grid, zeta, floor)
    qv = q.physical().values
    pv = psi.physical().values
    rhs = np.fft.fftn(qv * (1.0 + pv), norm="ortho")
    r = p * np.fft.fftn(pv, norm="ortho") - rhs
    w = 1.0 / (np.abs(p) + zeta.modulus)
    den = np.sum((w * np.abs(np.fft.fftn(qv, norm="ortho")) ** 2)[keep])
    if den == 0:
        return 0.0
    return float(math.sqrt(np.sum((w * np.abs(r) ** 2)[keep]) / den))


@dataclass
class NeumannReport:
    iterations: int
    residual: float
    contraction_estimate: float
    psi_norm: float
    residual_history: list
    increment_history: list
    first_term_norm: float


def _hom_half(vals_hat: np.ndarray, p: np.ndarray, cell: float) -> float:
    return math.sqrt(np.sum(np.abs(p) * np.abs(vals_hat) ** 2) * cell)


def neumann_solve(
    q: Field,
    zeta: PhaseVector,
    max_iter: int = 200,
    tol: float = 1e-10,
    floor: float | None = None,
    precheck: bool = False,
) -> tuple[Field, NeumannReport]:
    """Fixed-point iteration for the corrector.

    Norms of psi, increments and the contraction estimate use the homogeneous
    X^{1/2} norm.  ``precheck`` runs the multiplier-norm estimate first and
    warns when it is not below 1.
    """
    grid = q.grid
    p, keep = _regular_mask(grid, zeta, floor)
    qv = q.physical().values
    cell = grid.cell_volume
    if precheck:
        est = mult_operator_norm(q, zeta)
        if est.value >= 1:
            warnings.warn(f"multiplier norm {est.value:.3g} >= 1; iteration may diverge", RuntimeWarning)

    def step(psi_v):
        rhs = np.fft.fftn(qv * (1.0 + psi_v), norm="ortho")
        out = np.zeros_like(rhs)
        out[keep] = rhs[keep] / p[keep]
        return out

    psi_hat = np.zeros(grid.shape, dtype=complex)
    psi_v = np.zeros(grid.shape, dtype=complex)
    res_hist, inc_hist = [], []
    first = None
    growth = 0
    for it in range(1, max_iter + 1):
        new_hat = step(psi_v)
        inc = _hom_half(new_hat - psi_hat, p, cell)
        if first is None:
            first = _hom_half(new_hat, p, cell)
        psi_hat = new_hat
        psi_v = np.fft.ifftn(psi_hat, norm="ortho")
        psi = Field(grid, psi_v, PHYSICAL)
        res = conjugated_residual(psi, q, zeta, floor)
        inc_hist.append(inc)
        if res_hist and res > res_hist[-1]:
            growth += 1
        else:
            growth = 0
        res_hist.append(res)
        ratios = [b / a for a, b in zip(inc_hist[:-1], inc_hist[1:]) if a > 0]
        contraction = max(ratios) if ratios else 0.0
        report = NeumannReport(
            iterations=it,
            residual=res,
            contraction_estimate=contraction,
            psi_norm=_hom_half(psi_hat, p, cell),
            residual_history=res_hist,
            increment_history=inc_hist,
            first_term_norm=first,
        )
        if res <= tol:
            logger.debug("neumann converged in %d iterations, residual %.3g", it, res)
            return psi, report
        if growth >= DIVERGENCE_WINDOW:
            raise Divergence(f"residual grew for {growth} consecutive iterations (now {res:.3g})")
    raise MaxIterExceeded(f"no convergence in {max_iter} iterations, residual {res:.3g}")


def neumann_error_bound(report: NeumannReport) -> float:
    """c^{k+1}/(1-c) times the first-term norm, k + 1 = iterations."""
    c = report.contraction_estimate
    if c >= 1:
        return math.inf
    return c**report.iterations / (1.0 - c) * report.first_term_norm


# --- rescaling ---------------------------------------------------------------


def _trig_eval(u: Field, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Evaluate the trigonometric interpolant of u at arbitrary points (d, T)."""
    grid = u.grid
    c = u.frequency().values
    n = grid.n
    ks = grid.freq_axis()
    scale = n ** (-grid.dim / 2.0)
    T = points.shape[1]
    out = np.empty(T, dtype=complex)
    for s in range(0, T, chunk):
        pts = points[:, s : s + chunk] + grid.box_radius
        # contract one axis at a time: c[k1,...,kd] -> value per point
        t = pts.shape[1]
        acc = np.exp(1j * np.outer(pts[0], ks)) @ c.reshape(n, -1)  # (t, N^(d-1))
        for ax in range(1, grid.dim):
            E = np.exp(1j * np.outer(pts[ax], ks))
            acc = np.matmul(E[:, None, :], acc.reshape(t, n, -1))[:, 0, :]
        out[s : s + chunk] = acc[:, 0] * scale
    return out


def scaled_grid(grid: FourierGrid, tau: float) -> FourierGrid:
    return make_grid(grid.dim, grid.n, grid.box_radius * tau)


def scale_rotate(u: Field, zeta: PhaseVector, target: FourierGrid | None = None, tol: float = 1e-10) -> Field:
    """u_{tau U}(x) = tau^{-d} u(tau^{-1} U x), so that its spectrum at eta is
    the spectrum of u at tau U eta.  Resampled by trigonometric interpolation
    onto ``target`` (default: same N, box radius scaled by tau)."""
    grid = u.grid
    tau, U = zeta.tau, zeta.rotation
    target = target or scaled_grid(grid, tau)
    if target.dim != grid.dim:
        raise ValueError("target grid has a different dimension")
    f = u.frequency()
    mass = np.abs(f.values) ** 2
    sig = mass > tol * mass.max() if mass.max() > 0 else np.zeros(mass.shape, dtype=bool)
    if np.any(sig):
        rad = np.sqrt(np.sum(grid.freqs() ** 2, axis=0))[sig].max() / tau
        limit = target.freq_spacing * (target.n // 2 - 1)
        if rad > limit:
            raise ResolutionLoss(f"rescaled spectrum reaches {rad:.3g}, lattice ends at {limit:.3g}")
    x = target.coords().reshape(target.dim, -1)
    pts = (U @ x) / tau
    vals = _trig_eval(u, pts).reshape(target.shape) * tau ** (-grid.dim)
    return Field(target, vals, PHYSICAL)


def pairing(f: Field, u: Field, v: Field) -> complex:
    """<f u, v> = integral of f u conj(v)."""
    return complex(np.sum(f.physical().values * u.physical().values * np.conj(v.physical().values)) * f.grid.cell_volume)


def directional_derivative(f: Field, w: np.ndarray) -> Field:
    return apply_multiplier(f, lambda xi: 1j * np.sum(np.asarray(w).reshape((-1,) + (1,) * f.grid.dim) * xi, axis=0))


# --- expectation sweep -------------------------------------------------------


@dataclass(frozen=True)
class ExpectationSample:
    U: np.ndarray
    tau: float
    q_norm: float
    mq_norm: float


@dataclass(frozen=True)
class ExpectationRow:
    M: float
    samples: int
    mean_qnorm: float
    se_qnorm: float
    mean_mqnorm: float
    se_mqnorm: float


EXPECTATION_COLUMNS = ("M", "samples", "mean_qnorm", "se_qnorm", "mean_mqnorm", "se_mqnorm")


def check_unit_support(f: Field, tol: float = 1e-12) -> None:
    v = np.abs(f.physical().values)
    x = f.grid.coords()
    outside = np.sum(x * x, axis=0) > 1.0
    peak = v.max()
    if peak > 0 and np.any(v[outside] > tol * peak):
        raise SupportViolation("f must be supported in the unit ball")


def _sample_seed(seed: int, M: float, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(round(M * 1024)), int(k)])


def expectation_sample(f: Field, i: int, M: float, seed: int, k: int, iters: int = 200, tol: float = 1e-8) -> ExpectationSample:
    """One (U, tau) draw, tau uniform on [M, 2M]; reproducible from (seed, M, k)."""
    ss = _sample_seed(seed, M, k)
    rot_seed, tau_seed = ss.spawn(2)
    rng = np.random.default_rng(tau_seed)
    tau = float(M * (1.0 + rng.random()))
    U = haar_rotation(int(rot_seed.generate_state(1)[0]), f.grid.dim)
    z = PhaseVector(U, tau)
    g = derivative(f.physical(), i)
    g = Field(g.grid, g.values.real)
    qn = xb_norm(g, z, XbNormSpec(-0.5))
    mq = mult_operator_norm(g, z, iters=iters, tol=tol).value
    return ExpectationSample(U, tau, qn, mq)


def _mean_se(vals: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=float)
    if a.size < 2:
        return float(a.mean()), 0.0
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def expectation_sweep(
    f: Field,
    i: int,
    M_list: Sequence[float],
    samples: int,
    seed: int,
    jobs: int = 1,
    iters: int = 200,
    tol: float = 1e-8,
) -> list[ExpectationRow]:
    """Mean and standard error of ||d_i f||_{X^{-1/2}} and of the multiplier
    norm of d_i f over (U, tau), tau uniform in [M, 2M]."""
    if samples < 20:
        raise ValueError(f"need at least 20 samples, got {samples}")
    check_unit_support(f)
    rows = []
    for M in M_list:
        if not np.any(f.values):
            rows.append(ExpectationRow(float(M), samples, 0.0, 0.0, 0.0, 0.0))
            continue
        tasks = [(f, i, M, seed, k, iters, tol) for k in range(samples)]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as ex:
                out = list(ex.map(_sample_task, tasks))
        else:
            out = [_sample_task(t) for t in tasks]
        mq, sq = _mean_se([s.q_norm for s in out])
        mm, sm = _mean_se([s.mq_norm for s in out])
        rows.append(ExpectationRow(float(M), samples, mq, sq, mm, sm))
    return rows


def _sample_task(args):
    return expectation_sample(*args)


def low_frequency_part(f: Field, i: int, A: float) -> Field:
    """P_{<=A} d_i f with a sharp frequency cutoff."""
    g = derivative(f.physical(), i)
    g = apply_multiplier(g, lambda xi: (np.sqrt(np.sum(xi * xi, axis=0)) <= A).astype(float))
    return Field(g.grid, g.values.real)


def low_frequency_check(f: Field, i: int, M: float, zeta: PhaseVector, d_norm_p: float | None = None) -> tuple[float, float]:
    """Multiplier norm of the low-frequency part at A = M^{1/4}, and the
    bound shape A^2 / M * ||f||_d."""
    A = M**0.25
    g = low_frequency_part(f, i, A)
    val = mult_operator_norm(g, zeta).value
    p = f.grid.dim if d_norm_p is None else d_norm_p
    shape = A * A / M * lp_norm(f.physical(), p)
    return val, shape

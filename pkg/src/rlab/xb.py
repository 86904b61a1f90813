"""Symbol geometry and Bourgain-type norms attached to a complex phase vector.

For a rotation ``U`` and ``tau >= 1`` the phase vector is
``zeta = tau * (U e1 - i U e2)``, which satisfies ``zeta . zeta = 0``.  The
conjugated Laplacian ``Delta + 2 zeta . grad`` acts on frequencies by the symbol

    p(xi) = -|xi|^2 + 2i zeta . xi

whose zero set is a (d-2)-sphere of radius ``tau`` centred at ``tau U e2`` in the
hyperplane orthogonal to ``U e1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, NamedTuple, Sequence

import numpy as np

from .errors import NearCharacteristicSingularity, NonFiniteMultiplier
from .grid import FREQUENCY, PHYSICAL, Field, apply_multiplier, smooth_bump

logger = logging.getLogger(__name__)

# lattice points with |p| below this times tau^2 count as characteristic
SINGULAR_GUARD = 1e-8
# spectral coefficients below this fraction of the peak count as zero
COEFF_ZERO = 1e-12


@dataclass(frozen=True, eq=False)
class PhaseVector:
    rotation: np.ndarray
    tau: float

    def __post_init__(self):
        U = np.asarray(self.rotation, dtype=float)
        if U.ndim != 2 or U.shape[0] != U.shape[1] or U.shape[0] < 2:
            raise ValueError("rotation must be a square matrix of size >= 2")
        if not np.allclose(U.T @ U, np.eye(U.shape[0]), atol=1e-10):
            raise ValueError("rotation is not orthogonal")
        if not self.tau >= 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        object.__setattr__(self, "rotation", U)
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def identity(cls, d: int, tau: float = 1.0) -> "PhaseVector":
        return cls(np.eye(d), tau)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def normal(self) -> np.ndarray:
        """U e1, the normal of the hyperplane holding the characteristic sphere."""
        return self.rotation[:, 0]

    @property
    def zeta(self) -> np.ndarray:
        U = self.rotation
        return self.tau * (U[:, 0] - 1j * U[:, 1])

    @property
    def modulus(self) -> float:
        """|zeta| = sqrt(2) tau."""
        return math.sqrt(2.0) * self.tau

    @property
    def sphere_center(self) -> np.ndarray:
        return self.tau * self.rotation[:, 1]


def _lead(v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))


def symbol_p(xi, zeta: PhaseVector):
    """p(xi) = -|xi|^2 + 2i zeta . xi, with the real bilinear dot product.

    ``xi`` has the coordinate axis first: shape (d,) or (d, ...).
    """
    xi = np.asarray(xi, dtype=float)
    z = _lead(zeta.zeta, xi.ndim)
    out = -np.sum(xi * xi, axis=0) + 2j * np.sum(z * xi, axis=0)
    return out if np.ndim(out) else complex(out)


def dist_to_sigma(xi, zeta: PhaseVector):
    """Euclidean distance from xi to the characteristic sphere."""
    xi = np.asarray(xi, dtype=float)
    e1 = _lead(zeta.normal, xi.ndim)
    a = np.sum(e1 * xi, axis=0)
    perp = xi - a * e1
    r = np.sqrt(np.sum((perp - _lead(zeta.sphere_center, xi.ndim)) ** 2, axis=0))
    out = np.sqrt(a * a + (r - zeta.tau) ** 2)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class XbNormSpec:
    b: float
    mode: Literal["homogeneous", "inhomogeneous"] = "inhomogeneous"
    sigma: float | None = None

    def weight(self, xi: np.ndarray, zeta: PhaseVector) -> np.ndarray:
        """|p| or |p| + sigma on the given frequencies (not yet raised to 2b)."""
        ap = np.abs(symbol_p(xi, zeta))
        if self.mode == "homogeneous":
            return ap
        if self.mode == "inhomogeneous":
            s = zeta.modulus if self.sigma is None else self.sigma
            if not s > 0:
                raise ValueError("sigma must be positive")
            return ap + s
        raise ValueError(f"unknown mode {self.mode!r}")


def _nonzero(vals: np.ndarray) -> np.ndarray:
    a = np.abs(vals)
    peak = a.max() if a.size else 0.0
    if peak == 0:
        return np.zeros(a.shape, dtype=bool)
    return a > COEFF_ZERO * peak


def singular_set(grid, zeta: PhaseVector, guard: float = SINGULAR_GUARD) -> np.ndarray:
    """Boolean mask of lattice points with |p| < guard * tau^2."""
    return np.abs(symbol_p(grid.freqs(), zeta)) < guard * zeta.tau**2


def _guard(f: Field, zeta: PhaseVector, guard: float = SINGULAR_GUARD) -> None:
    bad = singular_set(f.grid, zeta, guard) & _nonzero(f.values)
    if np.any(bad):
        raise NearCharacteristicSingularity(
            f"{int(bad.sum())} lattice points carry spectrum where |p| < {guard:g} tau^2"
        )


def xb_norm(u: Field, zeta: PhaseVector, spec: XbNormSpec) -> float:
    """sqrt of the frequency quadrature of weight^(2b) |u^|^2."""
    f = u.frequency()
    w = spec.weight(f.grid.freqs(), zeta)
    mass = np.abs(f.values) ** 2
    if spec.b == 0:
        ww = np.ones_like(w)
    elif spec.mode == "homogeneous" and spec.b < 0:
        _guard(f, zeta)
        ww = np.zeros_like(w)
        ok = mass > 0
        ww[ok] = w[ok] ** (2 * spec.b)
    else:
        ww = w ** (2 * spec.b)
    return float(math.sqrt(np.sum(ww * mass) * f.grid.cell_volume))


def inv_delta_zeta(
    f: Field,
    zeta: PhaseVector,
    mode: Literal["homogeneous", "regularized"] = "homogeneous",
    floor: float | None = None,
) -> Field:
    """Divide spectral coefficients by p.

    ``regularized`` zeroes coefficients where |p| < floor (default
    ``1e-8 tau^2``) instead of raising.
    """
    g = f.frequency()
    p = symbol_p(g.grid.freqs(), zeta)
    floor = SINGULAR_GUARD * zeta.tau**2 if floor is None else floor
    if mode == "homogeneous":
        _guard(g, zeta)
    elif mode != "regularized":
        raise ValueError(f"unknown mode {mode!r}")
    keep = np.abs(p) >= floor
    out = np.zeros_like(g.values)
    out[keep] = g.values[keep] / p[keep]
    res = Field(g.grid, out, FREQUENCY)
    return res if f.representation == FREQUENCY else res.physical()


def delta_zeta(f: Field, zeta: PhaseVector) -> Field:
    """Apply Delta + 2 zeta . grad spectrally."""
    return apply_multiplier(f, lambda xi: symbol_p(xi, zeta))


# --- cutoffs -----------------------------------------------------------------

_near_bump = smooth_bump(center=0.0, radius=0.1)


def _h(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(s):
    """C-infinity function equal to 1 on [0, 1] and 0 on [2, inf)."""
    s = np.asarray(s, dtype=float)
    a = _h(2.0 - s)
    return a / (a + _h(s - 1.0))


def dyadic_shell(s):
    """smooth_step(s) - smooth_step(2 s): supported in (1/2, 2); dyadic
    dilates telescope."""
    return smooth_step(s) - smooth_step(2.0 * s)


def q_split(u: Field, zeta: PhaseVector) -> tuple[Field, Field]:
    """Characteristic (low) and non-characteristic (high) parts of u.

    The low multiplier is a bump in d(xi, Sigma)/tau supported in (-1/10, 1/10).
    """
    f = u.frequency()
    m = _near_bump(dist_to_sigma(f.grid.freqs(), zeta) / zeta.tau)
    low = Field(f.grid, f.values * m, FREQUENCY)
    high = Field(f.grid, f.values - low.values, FREQUENCY)
    if u.representation == PHYSICAL:
        return low.physical(), high.physical()
    return low, high


def dyadic_char_projection(u: Field, zeta: PhaseVector, mu: float) -> Field:
    """Shell of u with d(xi, Sigma)/tau in (mu/2, 2 mu)."""
    return apply_multiplier(u, lambda xi: dyadic_shell(dist_to_sigma(xi, zeta) / (zeta.tau * mu)))


def char_cap(u: Field, zeta: PhaseVector, mu: float) -> Field:
    """Part of u with d(xi, Sigma)/tau < 2 mu, smoothly cut (equal to 1 below mu)."""
    return apply_multiplier(u, lambda xi: smooth_step(dist_to_sigma(xi, zeta) / (zeta.tau * mu)))


def dyadic_levels(mu_min: float, mu_max: float) -> list[float]:
    """Dyadic scales mu_min * 2^k up to mu_max."""
    k = int(round(math.log2(mu_max / mu_min)))
    return [mu_min * 2.0**j for j in range(k + 1)]


def freq_band_multiplier(
    xi: np.ndarray,
    U: np.ndarray,
    tau: float,
    lam: float,
    nu: float,
    refine: tuple | None = None,
) -> np.ndarray:
    """Smooth multiplier for |xi| ~ tau*lam and |<U e1, xi>| <= 2 tau nu.

    ``refine=(omega, rho)`` additionally keeps the difference set of the
    antipodal cap pair at ``tau*U e2 +- tau*omega``, a ball of radius
    ``2 tau rho`` about ``2 tau omega``.
    """
    xi = np.asarray(xi, dtype=float)
    r = np.sqrt(np.sum(xi * xi, axis=0))
    a = np.abs(np.sum(_lead(U[:, 0], xi.ndim) * xi, axis=0))
    m = dyadic_shell(r / (tau * lam)) * smooth_step(a / (tau * nu))
    if refine is not None:
        omega, rho = refine
        c = 2.0 * tau * _lead(np.asarray(omega, dtype=float), xi.ndim)
        m = m * smooth_step(np.sqrt(np.sum((xi - c) ** 2, axis=0)) / (tau * rho))
    return m


def freq_band_projection(f: Field, U: np.ndarray, tau: float, lam: float, nu: float, refine: tuple | None = None) -> Field:
    return apply_multiplier(f, lambda xi: freq_band_multiplier(xi, U, tau, lam, nu, refine))


def antipodal_caps(U: np.ndarray, rho: float) -> list[np.ndarray]:
    """Unit directions omega spaced by about rho on the great sphere of the
    hyperplane orthogonal to U e1 (d = 3 gives a circle; higher d a
    latitude-longitude net)."""
    d = U.shape[0]
    if d == 2:
        return [U[:, 1], -U[:, 1]]
    if d == 3:
        n = max(1, int(math.ceil(2 * math.pi / rho)))
        th = 2 * math.pi * np.arange(n) / n
        return [math.cos(t) * U[:, 1] + math.sin(t) * U[:, 2] for t in th]
    out = []
    basis = U[:, 1:]
    k = d - 1
    n = max(2, int(math.ceil(math.pi / rho)))
    grids = np.meshgrid(*[np.linspace(-1, 1, n)] * k, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    pts = pts[np.linalg.norm(pts, axis=1) > 0]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    # d >= 4: normalized cube lattice thinned to rho separation
    for p in pts:
        if all(np.linalg.norm(p - q) >= rho for q in out):
            out.append(p)
    return [basis @ p for p in out]


# --- operator norms ------------------------------------------------------------


class OperatorNorm(NamedTuple):
    value: float
    converged: bool


def power_norm(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_adj: Callable[[np.ndarray], np.ndarray],
    shape: tuple,
    iters: int = 200,
    tol: float = 1e-8,
    seeds: Sequence[int] = (0, 1, 2),
) -> OperatorNorm:
    """Largest singular value by power iteration on A* A, best over restarts."""
    best, ok_best = 0.0, True
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        x /= np.linalg.norm(x)
        est, conv = 0.0, False
        for _ in range(iters):
            y = apply_adj(apply(x))
            ny = np.linalg.norm(y)
            if ny == 0:
                est, conv = 0.0, True
                break
            new = math.sqrt(ny)
            x = y / ny
            if est > 0 and abs(new - est) <= tol * new:
                est, conv = new, True
                break
            est = new
        if est > best:
            best, ok_best = est, conv
        elif est == best:
            ok_best = ok_best and conv
    return OperatorNorm(float(best), bool(ok_best))


def _mult_weights(grid, zeta: PhaseVector, sigma: float | None) -> np.ndarray:
    return XbNormSpec(0.5, "inhomogeneous", sigma).weight(grid.freqs(), zeta)


def mult_operator_norm(
    g: Field,
    zeta: PhaseVector,
    iters: int = 200,
    tol: float = 1e-8,
    sigma: float | None = None,
    seeds: Sequence[int] = (0, 1, 2),
) -> OperatorNorm:
    """Norm of u -> g u from X^{1/2} to X^{-1/2} (inhomogeneous, sigma = |zeta|
    by default)."""
    gv = g.physical().values
    if not np.all(np.isfinite(gv)):
        raise NonFiniteMultiplier("multiplier field has non-finite values")
    if not np.any(gv):
        return OperatorNorm(0.0, True)
    winv = 1.0 / np.sqrt(_mult_weights(g.grid, zeta, sigma))
    gc = np.conj(gv)

    def fwd(x):
        return winv * np.fft.fftn(gv * np.fft.ifftn(winv * x, norm="ortho"), norm="ortho")

    def adj(x):
        return winv * np.fft.fftn(gc * np.fft.ifftn(winv * x, norm="ortho"), norm="ortho")

    return power_norm(fwd, adj, g.grid.shape, iters, tol, seeds)


def _dft_matrix(grid) -> np.ndarray:
    F1 = np.fft.fft(np.eye(grid.n), norm="ortho", axis=0)
    F = F1
    for _ in range(grid.dim - 1):
        F = np.kron(F, F1)
    return F


def mult_operator_norm_dense(g: Field, zeta: PhaseVector, sigma: float | None = None) -> float:
    """Dense singular-value oracle; only for tiny grids."""
    if g.grid.size > 4096:
        raise ValueError("dense oracle limited to grids with at most 4096 points")
    F = _dft_matrix(g.grid)
    winv = (1.0 / np.sqrt(_mult_weights(g.grid, zeta, sigma))).ravel()
    T = (winv[:, None] * F) @ (g.physical().values.ravel()[:, None] * F.conj().T) * winv[None, :]
    return float(np.linalg.norm(T, 2))


def inv_delta_operator_norm(
    grid,
    zeta: PhaseVector,
    iters: int = 200,
    tol: float = 1e-12,
    seeds: Sequence[int] = (0, 1, 2),
    floor: float | None = None,
) -> OperatorNorm:
    """Norm of the regularized inverse from the homogeneous -1/2 space to the
    homogeneous +1/2 space, on spectra avoiding the guarded set.

    Works in weighted coordinates x = |p|^{-1/2} f^, where the map becomes
    x -> |p|^{1/2} (|p|^{1/2} x / p).
    """
    p = symbol_p(grid.freqs(), zeta)
    floor = SINGULAR_GUARD * zeta.tau**2 if floor is None else floor
    keep = np.abs(p) >= floor
    ap = np.where(keep, np.abs(p), 1.0)
    pp = np.where(keep, p, 1.0)

    def to_field(x):
        # weighted coords -> spectrum of f
        return Field(grid, np.where(keep, np.sqrt(ap) * x, 0.0), FREQUENCY)

    def fwd(x):
        out = inv_delta_zeta(to_field(x), zeta, "regularized", floor).values
        return np.where(keep, np.sqrt(ap) * out, 0.0)

    def adj(x):
        return np.where(keep, np.sqrt(ap) * x / np.conj(pp), 0.0) * np.sqrt(ap)

    return power_norm(fwd, adj, grid.shape, iters, tol, seeds)

"""Extension operators over graph surfaces and bilinear constants of thickened caps.

Frequencies in this module are in cycles, ``e(z) = exp(2 pi i z)``.  A field on
a grid of box radius L lives on the cycle lattice ``k / (2L)``.  Neighborhood
fields carry an explicit carrier frequency near their cap so the lattice only
has to hold the local spread of the spectrum; the unimodular factor
``e(x . carrier)`` is left out of the stored samples since every quantity we
measure depends on ``|f|`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DomainViolation,
    InsufficientLevels,
    RegimeViolation,
    ResolutionLoss,
    SeparationViolation,
    ZeroDenominator,
)
from .grid import FREQUENCY, Field, FourierGrid, centered_phase, lp_norm, make_grid
from .xb import smooth_step

HEMISPHERE_LIMIT = 1.0 / math.sqrt(2.0) + 0.1
DEFAULT_N = {2: 256, 3: 64, 4: 32}
# heights evaluated per batch of slice FFTs
SLICE_CHUNK = 32


# ----------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True)
class SurfaceGraph:
    """Graph ``xi_n = Phi(xi')`` over a ball of radius ``domain_radius``.

    ``scale`` rho gives the parabolic rescaling ``rho^-2 Phi(rho xi')``.
    """

    kind: str
    ambient_dim: int
    domain_radius: float = 1.0
    eps: float = 0.0
    seed: int = 0
    scale: float = 1.0
    _modes: tuple = dc_field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("paraboloid", "hemisphere", "elliptic"):
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if self.ambient_dim < 2:
            raise ValueError("ambient dimension must be at least 2")
        if self.kind == "hemisphere" and self.domain_radius >= HEMISPHERE_LIMIT:
            raise DomainViolation(
                f"hemisphere domain radius {self.domain_radius} must stay below {HEMISPHERE_LIMIT:.4f}"
            )
        if self.kind == "elliptic":
            if not 0 <= self.eps < 1:
                raise ValueError("elliptic eps must lie in [0, 1)")
            object.__setattr__(self, "_modes", _elliptic_modes(self.ambient_dim - 1, self.seed))

    @property
    def base_dim(self) -> int:
        return self.ambient_dim - 1

    def rescaled(self, rho: float) -> "SurfaceGraph":
        return SurfaceGraph(self.kind, self.ambient_dim, self.domain_radius, self.eps, self.seed, self.scale * rho)


def paraboloid(n: int, domain_radius: float = 1.0) -> SurfaceGraph:
    return SurfaceGraph("paraboloid", n, domain_radius)


def hemisphere(n: int, domain_radius: float = 0.8) -> SurfaceGraph:
    return SurfaceGraph("hemisphere", n, domain_radius)


def elliptic(n: int, eps: float, seed: int = 0, domain_radius: float = 1.0) -> SurfaceGraph:
    return SurfaceGraph("elliptic", n, domain_radius, eps, seed)


def _elliptic_modes(m: int, seed: int):
    # up to three cosine modes, amplitudes scaled so sum |a| |k|^2 = 1,
    # which bounds the perturbation Hessian by one in operator norm
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 4))
    ks = rng.normal(size=(count, m))
    ks *= rng.uniform(1.0, 3.0, size=(count, 1)) / np.linalg.norm(ks, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, size=count)
    amps = rng.uniform(0.2, 1.0, size=count) * rng.choice([-1.0, 1.0], size=count)
    amps /= np.sum(np.abs(amps) * np.sum(ks**2, axis=1))
    return tuple((k, float(ph), float(a)) for k, ph, a in zip(ks, phases, amps))


def _check_domain(surface: SurfaceGraph, xi: np.ndarray):
    r = np.sqrt(np.sum((surface.scale * xi) ** 2, axis=-1))
    if np.any(r > surface.domain_radius * (1 + 1e-12)):
        raise DomainViolation(
            f"|xi'| up to {float(np.max(r)) / surface.scale:.4g} leaves the domain of radius "
            f"{surface.domain_radius / surface.scale:.4g}"
        )


def _phi_raw(surface: SurfaceGraph, xi: np.ndarray) -> np.ndarray:
    rho = surface.scale
    y = rho * xi
    r2 = np.sum(y * y, axis=-1)
    if surface.kind == "paraboloid":
        val = 0.5 * r2
    elif surface.kind == "hemisphere":
        val = 1.0 - np.sqrt(np.clip(1.0 - r2, 0.0, None))
    else:
        val = 0.5 * r2
        for k, ph, a in surface._modes:
            kx = y @ k
            val = val + surface.eps * a * (np.cos(kx + ph) - math.cos(ph) + math.sin(ph) * kx)
    return val / rho**2


def surface_phi(surface: SurfaceGraph, xi_prime) -> np.ndarray:
    """Height of the graph; ``xi_prime`` has its coordinates on the last axis."""
    xi = np.asarray(xi_prime, dtype=float)
    _check_domain(surface, xi)
    return _phi_raw(surface, xi)


def surface_grad(surface: SurfaceGraph, xi_prime) -> np.ndarray:
    xi = np.asarray(xi_prime, dtype=float)
    _check_domain(surface, xi)
    rho = surface.scale
    y = rho * xi
    if surface.kind == "paraboloid":
        g = y.copy()
    elif surface.kind == "hemisphere":
        s = np.sqrt(1.0 - np.sum(y * y, axis=-1, keepdims=True))
        g = y / s
    else:
        g = y.copy()
        for k, ph, a in surface._modes:
            kx = (y @ k)[..., None]
            g = g + surface.eps * a * (math.sin(ph) - np.sin(kx + ph)) * k
    return g / rho


def surface_hess(surface: SurfaceGraph, xi_prime) -> np.ndarray:
    xi = np.asarray(xi_prime, dtype=float)
    _check_domain(surface, xi)
    y = surface.scale * xi
    m = xi.shape[-1]
    eye = np.broadcast_to(np.eye(m), xi.shape[:-1] + (m, m))
    if surface.kind == "paraboloid":
        return eye.copy()
    if surface.kind == "hemisphere":
        s2 = 1.0 - np.sum(y * y, axis=-1)
        s = np.sqrt(s2)[..., None, None]
        return eye / s + y[..., :, None] * y[..., None, :] / s**3
    h = eye.copy()
    for k, ph, a in surface._modes:
        kx = (y @ k)[..., None, None]
        h = h - surface.eps * a * np.cos(kx + ph) * np.outer(k, k)
    return h


# ----------------------------------------------------------------------------
# densities on the base lattice and the extension operator


@dataclass(frozen=True, eq=False)
class LatticeDensity:
    """Values of a density at ``origin + spacing * index`` on an (n-1)-d lattice."""

    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(-1))
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim != self.origin.size:
            raise ValueError("values must have one axis per base coordinate")
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.origin.size

    @property
    def cell(self) -> float:
        return self.spacing**self.dim

    def points(self) -> np.ndarray:
        idx = np.indices(self.values.shape).reshape(self.dim, -1).T
        return self.origin + self.spacing * idx

    def weights(self) -> np.ndarray:
        return self.values.reshape(-1) * self.cell

    def support(self) -> tuple:
        """Points and quadrature weights where the density is nonzero."""
        w = self.weights()
        keep = w != 0
        return self.points()[keep], w[keep]

    def l1(self) -> float:
        return float(np.sum(np.abs(self.values)) * self.cell)

    def l2(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.cell))

    def linf(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def density_on_ball(center, radius: float, spacing: float, fn: Callable | None = None) -> LatticeDensity:
    """Lattice density on the cube around a ball, ``fn(points)`` inside, zero outside."""
    center = np.asarray(center, dtype=float).reshape(-1)
    m = int(math.ceil(radius / spacing)) + 1
    origin = center - spacing * m
    shape = (2 * m + 1,) * center.size
    pts = origin + spacing * np.indices(shape).reshape(center.size, -1).T
    inside = np.sum((pts - center) ** 2, axis=1) <= radius**2
    vals = np.zeros(pts.shape[0], dtype=complex)
    if fn is None:
        vals[inside] = 1.0
    else:
        vals[inside] = np.asarray(fn(pts[inside]), dtype=complex)
    return LatticeDensity(origin, spacing, vals.reshape(shape))


def _as_points_weights(density):
    if isinstance(density, LatticeDensity):
        return density.support()
    pts, w = density
    return np.atleast_2d(np.asarray(pts, dtype=float)), np.asarray(w, dtype=complex).reshape(-1)


def extension_eval(density, surface: SurfaceGraph, x_points, chunk: int = 2048) -> np.ndarray:
    """``Ef(x) = sum_j w_j e(x' . xi_j + x_n Phi(xi_j))`` by direct quadrature.

    ``density`` is a LatticeDensity or a (points, weights) pair.
    """
    pts, w = _as_points_weights(density)
    heights = surface_phi(surface, pts)
    freq = np.concatenate([pts, heights[:, None]], axis=1)
    x = np.atleast_2d(np.asarray(x_points, dtype=float))
    out = np.empty(x.shape[0], dtype=complex)
    for s in range(0, x.shape[0], chunk):
        phase = x[s : s + chunk] @ freq.T
        out[s : s + chunk] = np.exp(2j * np.pi * phase) @ w
    return out


def extension_on_slices(density: LatticeDensity, surface: SurfaceGraph, x_n, fft_size: int):
    """Evaluate Ef on ``x' = j / (fft_size * spacing)`` for each height in ``x_n``.

    Returns (x' axis, values) with values of shape (len(x_n), fft_size, ...).
    """
    m = fft_size
    if any(s > m for s in density.values.shape):
        raise ResolutionLoss("fft size smaller than the density lattice")
    h = density.spacing
    pts = density.points().reshape(density.values.shape + (density.dim,))
    heights = _phi_raw(surface, pts)
    _check_domain(surface, pts[density.values != 0])
    ax = (np.arange(m) - m // 2) / (m * h)
    grids = np.meshgrid(*([ax] * density.dim), indexing="ij")
    origin_phase = np.exp(2j * np.pi * sum(g * o for g, o in zip(grids, density.origin)))
    out = []
    pad = [(0, m - s) for s in density.values.shape]
    for t in np.atleast_1d(x_n):
        u = np.pad(density.values * np.exp(2j * np.pi * t * heights), pad)
        # on x' = (j - m/2)/(m h) the sum over k is m^d times the shifted ifft
        v = np.fft.fftshift(np.fft.ifftn(u)) * m**density.dim
        out.append(v * origin_phase * density.cell)
    return ax, np.array(out)


def trace_ratio(density: LatticeDensity, surface: SurfaceGraph, R: float, step: float = 0.25) -> float:
    """``||Ef||_{L^2(B_R)} / (R^{1/2} ||f||_2)`` with a midpoint rule on B_R.

    The slice evaluation is periodic in x' with period 1/h, so the density
    spacing h must be at most 1/(2R).
    """
    if density.spacing * 2 * R > 1 + 1e-12:
        raise ResolutionLoss(f"spacing {density.spacing} cannot resolve B_R with R = {R}; need <= 1/(2R)")
    m = 8
    while m < max(density.values.shape) or 1.0 / (m * density.spacing) > step:
        m *= 2
    xs = np.arange(-R, R + 1e-12, 1.0 / (m * density.spacing))
    total = 0.0
    for lo in range(0, len(xs), SLICE_CHUNK):
        ax, vals = extension_on_slices(density, surface, xs[lo : lo + SLICE_CHUNK], m)
        if lo == 0:
            grids = np.meshgrid(*([ax] * density.dim), indexing="ij")
            r2 = sum(g * g for g in grids)
        for t, v in zip(xs[lo : lo + SLICE_CHUNK], vals):
            total += float(np.sum(np.abs(v[r2 + t * t <= R * R]) ** 2))
    dx = ax[1] - ax[0]
    norm = math.sqrt(total * dx ** (density.dim + 1))
    l2 = density.l2()
    if l2 == 0:
        raise ZeroDenominator("density has zero L^2 norm")
    return norm / (math.sqrt(R) * l2)


# ----------------------------------------------------------------------------
# neighborhood fields


@dataclass(frozen=True, eq=False)
class NeighborhoodField:
    """Field whose spectrum is a thickened cap of a surface.

    ``coeffs`` are lattice coefficients (FFT order) at ``carrier + k/(2L)``;
    ``slices`` labels each lattice point with its vertical slice, -1 outside.
    """

    field: Field
    surface: SurfaceGraph
    width: float
    cap_center: np.ndarray
    cap_radius: float
    carrier: np.ndarray
    coeffs: np.ndarray
    slices: np.ndarray
    box: np.ndarray | None = None
    profile: str = "constant"

    @property
    def grid(self) -> FourierGrid:
        return self.field.grid

    def absolute_freqs(self) -> np.ndarray:
        """Cycle frequencies of the lattice points, shape (n, N, ..., N)."""
        g = self.grid
        k = g.freq_index() / (2.0 * g.box_radius)
        return k + self.carrier.reshape((-1,) + (1,) * g.dim)

    def slice_count(self) -> int:
        return int(self.slices.max()) + 1 if np.any(self.slices >= 0) else 0

    def slice_field(self, j: int) -> Field:
        c = np.where(self.slices == j, self.coeffs, 0)
        return Field(self.grid, c * centered_phase(self.grid), FREQUENCY)


def _cycle_spacing(grid: FourierGrid) -> float:
    return 1.0 / (2.0 * grid.box_radius)


def default_grid(n: int, width: float, N: int | None = None, box_factor: float = 1.0) -> FourierGrid:
    return make_grid(n, N or DEFAULT_N.get(n, 32), box_factor / width)


def _in_region(rel: np.ndarray, radius: float, box) -> np.ndarray:
    # rel has the base coordinates first
    if box is None:
        return np.sum(rel**2, axis=0) < radius**2
    inside = np.ones(rel.shape[1:], dtype=bool)
    for i, half in enumerate(box):
        inside &= (rel[i] >= -half) & (rel[i] < half)
    return inside


def make_neighborhood(
    surface: SurfaceGraph,
    cap_center,
    cap_radius: float,
    width: float,
    profile="constant",
    seed: int | None = None,
    grid: FourierGrid | None = None,
    box=None,
    slice_width: float | None = None,
    carrier=None,
    offset: float | None = None,
) -> NeighborhoodField:
    """Thickened cap ``{(xi', Phi(xi') + t) : xi' in cap, t in [offset, offset + width)}``.

    The spectrum is a stack of vertically shifted copies of the graph over the
    cap, one per slice of height ``slice_width`` (one lattice step by default).
    ``profile`` is "constant", "random" (complex Gaussian, ``seed``), "smooth"
    (product of bumps in the cap and across the width) or a callable
    ``(xi' array with coords first, t) -> values``.  ``box`` replaces the ball by
    half side lengths along each base axis.
    """
    n = surface.ambient_dim
    c = np.asarray(cap_center, dtype=float).reshape(-1)
    if c.size != n - 1:
        raise ValueError(f"cap center needs {n - 1} coordinates")
    grid = grid or default_grid(n, width)
    if grid.dim != n:
        raise ValueError("grid dimension must match the ambient dimension")
    delta = _cycle_spacing(grid)
    if width < 2 * delta * (1 - 1e-9):
        raise ResolutionLoss(f"width {width:.4g} is below two lattice spacings ({2 * delta:.4g})")
    extent = np.asarray(box, dtype=float) if box is not None else np.full(n - 1, cap_radius)
    _check_domain(surface, c + extent * np.sign(c + (c == 0)))
    _check_domain(surface, c - extent * np.sign(c + (c == 0)))
    offset = -0.5 * width if offset is None else offset
    if carrier is None:
        carrier = np.append(c, _phi_raw(surface, c))
    carrier = np.asarray(carrier, dtype=float)

    k = grid.freq_index() / (2.0 * grid.box_radius)
    xi = k + carrier.reshape((-1,) + (1,) * n)
    rel = xi[:-1] - c.reshape((-1,) + (1,) * n)
    region = _in_region(rel, cap_radius, box)
    base = np.moveaxis(xi[:-1], 0, -1)
    t = xi[-1] - _phi_raw(surface, base)
    sw = delta if slice_width is None else slice_width
    pos = (t - offset) / sw
    slab = (t >= offset - 1e-12 * width) & (t < offset + width - 1e-12 * width)
    support = region & slab
    if not np.any(support):
        raise ResolutionLoss("no lattice point falls in the neighborhood")
    kmax = np.max(np.abs(grid.freq_index()[:, support]))
    if kmax >= grid.n // 2 - 1:
        raise ResolutionLoss(
            f"neighborhood spreads to lattice index {kmax}, beyond the usable range {grid.n // 2 - 2}"
        )
    slices = np.where(support, np.floor(pos + 1e-9).astype(int), -1)

    if callable(profile):
        amp = profile(rel, t)
        name = "custom"
    elif profile == "constant":
        amp = np.ones(grid.shape)
        name = profile
    elif profile == "random":
        rng = np.random.default_rng(seed)
        amp = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
        name = profile
    elif profile == "smooth":
        if box is None:
            across = np.exp(1 - 1 / np.clip(1 - np.sum(rel**2, axis=0) / cap_radius**2, 1e-300, None))
            across = np.where(region, across, 0.0)
        else:
            across = np.ones(grid.shape)
            for i, half in enumerate(box):
                u = rel[i] / half
                across = across * np.where(np.abs(u) < 1, np.exp(1 - 1 / np.clip(1 - u * u, 1e-300, None)), 0.0)
        u = (t - offset - 0.5 * width) / (0.5 * width)
        vertical = np.where(np.abs(u) < 1, np.exp(1 - 1 / np.clip(1 - u * u, 1e-300, None)), 0.0)
        amp = across * vertical
        name = profile
    else:
        raise ValueError(f"unknown profile {profile!r}")
    coeffs = np.where(support, amp, 0).astype(complex)
    fld = Field(grid, coeffs * centered_phase(grid), FREQUENCY)
    return NeighborhoodField(
        fld, surface, float(width), c, float(cap_radius), carrier, coeffs, slices,
        None if box is None else np.asarray(box, dtype=float), name,
    )


def neighborhood_mass_fraction(f: NeighborhoodField, width: float | None = None, surface=None, center=None, reach=None) -> float:
    """Share of the spectral mass within vertical distance ``width`` of the
    surface over the base region (ball of radius ``reach`` about ``center``)."""
    width = f.width if width is None else width
    surface = surface or f.surface
    center = f.cap_center if center is None else np.asarray(center, dtype=float)
    if reach is None:
        reach = float(np.linalg.norm(f.box)) if f.box is not None else f.cap_radius
    reach += _cycle_spacing(f.grid)
    xi = f.absolute_freqs()
    w = np.abs(f.coeffs) ** 2
    total = w.sum()
    if total == 0:
        return 1.0
    nz = w > 0
    base = np.moveaxis(xi[:-1], 0, -1)[nz]
    rel = base - center
    near = np.sum(rel**2, axis=1) <= reach**2
    t = xi[-1][nz] - _phi_raw(surface, base)
    inside = near & (np.abs(t) <= width * (1 + 1e-9))
    return float(w[nz][inside].sum() / total)


def slice_masses(f: NeighborhoodField) -> np.ndarray:
    """Physical L^2 mass of each slice, each computed from its own samples."""
    return np.array([lp_norm(f.slice_field(j).physical(), 2) ** 2 for j in range(f.slice_count())])


def bilinear_ratio(f: NeighborhoodField, g: NeighborhoodField, p_prime: float, region=None) -> float:
    """``||f g||_{L^p'(B)} / (||f||_2 ||g||_2)``; B defaults to the ball of
    radius ``1 / f.width`` at the origin, ``region="full"`` uses the whole box."""
    if not 1 <= p_prime <= 2:
        raise ValueError(f"p' must lie in [1, 2], got {p_prime}")
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    uf = f.field.physical()
    ug = g.field.physical()
    den = lp_norm(uf, 2) * lp_norm(ug, 2)
    if den == 0:
        raise ZeroDenominator("one of the fields vanishes")
    if region is None:
        region = (np.zeros(f.grid.dim), 1.0 / f.width)
    elif region == "full":
        region = None
    prod = uf.with_values(uf.values * ug.values)
    return lp_norm(prod, p_prime, region) / den


# ----------------------------------------------------------------------------
# extremal constructions and the exponent fit


CONSTRUCTIONS = ("translated-cap", "squashed-cap", "planar-cap")


def _translate(f: NeighborhoodField, surface: SurfaceGraph, center, width: float, shift: float) -> NeighborhoodField:
    """Copy of ``f`` moved so its cap centre sits over ``center`` on ``surface``.

    Only the carrier changes, so ``|g| = |f|`` pointwise.  ``shift`` moves the
    copy vertically to centre it in the wider neighborhood.
    """
    c2 = np.asarray(center, dtype=float)
    a = np.append(c2 - f.cap_center, _phi_raw(surface, c2) - _phi_raw(f.surface, f.cap_center) + shift)
    return NeighborhoodField(
        f.field, surface, float(width), c2, f.cap_radius, f.carrier + a, f.coeffs, f.slices, f.box, f.profile
    )


def extremal_pair(
    surface: SurfaceGraph,
    kind: str,
    mu: float,
    nu: float,
    grid: FourierGrid | None = None,
    separation: float = 1.0,
    cap_scale: float = 0.5,
):
    """Indicator-profile pair showing the lower bound of a regime.

    translated-cap: a cap of radius ``cap_scale * mu^(1/2)`` and its translate
    by ``separation`` along e1.  With ``separation = 0`` both fields sit on the
    same cap, the same-surface case.
    squashed-cap (n >= 3) and planar-cap (n = 2): a box of side nu along e1,
    ``mu^(1/2)`` along the other base axes, thickness mu, and its translate.
    """
    n = surface.ambient_dim
    if mu > nu * (1 + 1e-12):
        raise RegimeViolation(f"need mu <= nu, got mu={mu}, nu={nu}")
    grid = grid or default_grid(n, mu)
    e1 = np.zeros(n - 1)
    e1[0] = 1.0
    c1 = 0.5 * separation * e1
    c2 = -0.5 * separation * e1
    if kind == "translated-cap":
        if separation > 0 and nu < math.sqrt(mu) * (1 - 1e-12):
            raise RegimeViolation(f"translated caps need nu >= mu^(1/2), got mu={mu}, nu={nu}")
        f = make_neighborhood(surface, c1, cap_scale * math.sqrt(mu), mu, grid=grid)
    elif kind in ("squashed-cap", "planar-cap"):
        if kind == "squashed-cap" and n < 3:
            raise RegimeViolation("squashed caps need n >= 3; use planar-cap in the plane")
        if kind == "planar-cap" and n != 2:
            raise RegimeViolation("planar caps are the n = 2 member of the family")
        if nu > math.sqrt(mu) * (1 + 1e-12):
            raise RegimeViolation(f"squashed caps need nu <= mu^(1/2), got mu={mu}, nu={nu}")
        box = np.full(n - 1, 0.5 * math.sqrt(mu))
        box[0] = 0.5 * nu
        f = make_neighborhood(surface, c1, float(np.linalg.norm(box)), mu, grid=grid, box=box)
    else:
        raise ValueError(f"unknown construction {kind!r}")
    if separation == 0:
        g = _translate(f, surface, c1, nu, 0.0)
    else:
        g = _translate(f, surface, c2, nu, 0.0)
    return f, g


class BilinearDatum(NamedTuple):
    n: int
    surface: str
    p_prime: float
    mu: float
    nu: float
    construction: str
    ratio: float


class ExponentFit(NamedTuple):
    e_mu: float
    e_nu: float
    r2: float
    intercept: float
    rows: list
    cells: list


def random_pair(surface: SurfaceGraph, mu: float, nu: float, grid: FourierGrid, seed: int, separation: float = 1.0):
    """Random-profile fields on caps at distance ``separation``; the cap radius
    is the largest the lattice can hold, capped at 1/4."""
    n = surface.ambient_dim
    delta = _cycle_spacing(grid)
    usable = (grid.n // 2 - 2) * delta
    e1 = np.zeros(n - 1)
    e1[0] = 1.0
    c1, c2 = 0.5 * separation * e1, -0.5 * separation * e1
    slope = max(np.linalg.norm(surface_grad(surface, c1)), np.linalg.norm(surface_grad(surface, c2)))
    r = min(0.25, 0.8 * (usable - nu) / (1.0 + slope + 0.5 * usable), 0.8 * usable)
    ss = np.random.SeedSequence([seed, 0x5EED])
    s1, s2 = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    f = make_neighborhood(surface, c1, r, mu, profile="random", seed=s1, grid=grid)
    g = make_neighborhood(surface, c2, r, nu, profile="random", seed=s2, grid=grid)
    return f, g


def cell_ratios(surface, p_prime, mu, nu, candidates=0, seed=0, N=None, constructions=None, box_factor=1.0):
    """All ratios for one (mu, nu) cell: applicable extremals plus random pairs."""
    n = surface.ambient_dim
    grid = default_grid(n, mu, N, box_factor)
    rows = []
    kinds = constructions or (("planar-cap",) if n == 2 else ("squashed-cap",))
    for kind in kinds:
        try:
            f, g = extremal_pair(surface, kind, mu, nu, grid=grid)
        except RegimeViolation:
            continue
        rows.append(BilinearDatum(n, surface.kind, p_prime, mu, nu, kind, bilinear_ratio(f, g, p_prime)))
    for j in range(candidates):
        cell_seed = [seed, int(round(-math.log2(mu) * 64)), int(round(-math.log2(nu) * 64)), j]
        s = int(np.random.SeedSequence(cell_seed).generate_state(1)[0])
        f, g = random_pair(surface, mu, nu, grid, s)
        rows.append(BilinearDatum(n, surface.kind, p_prime, mu, nu, "random", bilinear_ratio(f, g, p_prime)))
    return rows


def fit_loglog(mus, nus, ratios):
    """Least squares ``log K = c + e_mu log mu + e_nu log nu``; returns (e_mu, e_nu, r2, c)."""
    A = np.column_stack([np.ones(len(mus)), np.log(mus), np.log(nus)])
    y = np.log(ratios)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[1]), float(coef[2]), r2, float(coef[0])


def regime_cells(mu_list, nu_list):
    """Pairs with mu <= nu <= mu^(1/2), where the mixed rate is claimed sharp."""
    return [(m, v) for m in mu_list for v in nu_list if m <= v * (1 + 1e-12) and v <= math.sqrt(m) * (1 + 1e-12)]


def k_estimate_and_fit(
    surface: SurfaceGraph,
    p_prime: float,
    mu_list: Sequence[float],
    nu_list: Sequence[float],
    candidates: int = 2,
    seed: int = 0,
    N: int | None = None,
    jobs: int = 1,
) -> ExponentFit:
    """Estimate K per cell as the max ratio and fit its exponents in mu and nu."""
    if len(set(mu_list)) < 4 or len(set(nu_list)) < 4:
        raise InsufficientLevels("need at least four dyadic levels of mu and of nu")
    cells = regime_cells(sorted(set(mu_list)), sorted(set(nu_list)))
    if len({c[0] for c in cells}) < 2 or len({c[1] for c in cells}) < 2:
        raise InsufficientLevels("fewer than two levels survive the regime filter")
    args = [(surface, p_prime, m, v, candidates, seed, N) for m, v in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell_star, args))
    else:
        results = [_cell_star(a) for a in args]
    rows = [r for res in results for r in res]
    best = [max(res, key=lambda d: d.ratio) for res in results]
    e_mu, e_nu, r2, c = fit_loglog([b.mu for b in best], [b.nu for b in best], [b.ratio for b in best])
    return ExponentFit(e_mu, e_nu, r2, c, rows, best)


def _cell_star(a):
    return cell_ratios(*a)


# ----------------------------------------------------------------------------
# the axis bound


def axis_kernel_hat(xi: np.ndarray) -> np.ndarray:
    """Fourier transform (cycles) of the unit kernel: 1 on [-1, 1], 0 beyond 2."""
    return smooth_step(np.abs(xi))


def axis_kernel_norm(p_prime: float, L: float = 64.0, N: int = 1 << 16) -> float:
    """``||phi||_{L^p'}`` of the unit kernel by a fine Riemann sum."""
    x = (np.arange(N) - N // 2) * (2 * L / N)
    xi = np.fft.fftfreq(N, d=2 * L / N)
    phi = np.fft.fftshift(np.fft.ifft(axis_kernel_hat(xi))).real * N / (2 * L)
    return float((np.sum(np.abs(phi) ** p_prime) * (2 * L / N)) ** (1 / p_prime))


def axis_bound(a: Field, b: Field, mu: float, p_prime: float, C: float | None = None):
    """(lhs, rhs) = (``||(a * phi_mu) b||_p'``, ``C mu^(1/p) ||a||_2 ||b||_2``)."""
    if not 1 <= p_prime <= 2:
        raise ValueError(f"p' must lie in [1, 2], got {p_prime}")
    if a.grid.dim != 1 or a.grid != b.grid:
        raise ValueError("axis bound needs two fields on one 1-d grid")
    if C is None:
        C = axis_kernel_norm(p_prime)
    g = a.grid
    xi = g.freq_axis() / (2 * np.pi)
    conv = np.fft.ifft(np.fft.fft(a.physical().values) * axis_kernel_hat(xi / mu))
    prod = Field(g, conv * b.physical().values)
    lhs = lp_norm(prod, p_prime)
    p = math.inf if p_prime == 1 else p_prime / (p_prime - 1)
    rhs = C * mu ** (0.0 if math.isinf(p) else 1.0 / p) * lp_norm(a.physical(), 2) * lp_norm(b.physical(), 2)
    return lhs, rhs


# ----------------------------------------------------------------------------
# parabolic rescaling


class Rescaled(NamedTuple):
    field: NeighborhoodField
    norm_factor: float


def parabolic_rescale(f: NeighborhoodField, rho: float, p_prime: float = 2.0) -> Rescaled:
    """Map a cap at scale rho to unit scale with ``xi -> (xi'/rho, xi_n/rho^2)``.

    The new field lives over ``rho^-2 Phi(rho xi')`` with width ``mu / rho^2``
    on a grid of box radius ``rho^2 L``.  ``norm_factor`` is
    ``rho^(2(n+1) - (n+1)/p')``, the ratio of product norms before and after.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    n = f.surface.ambient_dim
    factor = rho ** (2 * (n + 1) - (n + 1) / p_prime)
    if rho == 1:
        return Rescaled(f, factor)
    if f.profile not in ("constant", "smooth"):
        raise ValueError("only constant and smooth profiles rescale exactly")
    grid = make_grid(n, f.grid.n, f.grid.box_radius * rho**2)
    surface = f.surface.rescaled(rho)
    box = None if f.box is None else f.box / rho
    offset = None
    F = make_neighborhood(
        surface, f.cap_center / rho, f.cap_radius / rho, f.width / rho**2,
        profile=f.profile, grid=grid, box=box, offset=offset,
    )
    return Rescaled(F, factor)


def spectral_width(f: NeighborhoodField, rel_tol: float = 1e-6) -> float:
    """Vertical extent of the lattice points carrying mass above ``rel_tol * max``,
    plus one lattice step."""
    w = np.abs(f.coeffs) ** 2
    keep = w > rel_tol * w.max()
    xi = f.absolute_freqs()
    base = np.moveaxis(xi[:-1], 0, -1)[keep]
    t = xi[-1][keep] - _phi_raw(f.surface, base)
    return float(t.max() - t.min() + _cycle_spacing(f.grid))


def physical_field(f: NeighborhoodField) -> Field:
    """Samples of the continuum field ``sum_k a_k e(x . xi_k) dxi^n`` (carrier dropped)."""
    g = f.grid
    scale = g.n ** (g.dim / 2) * _cycle_spacing(g) ** g.dim
    return f.field.physical() * scale


def product_norm(f: NeighborhoodField, g: NeighborhoodField, p_prime: float) -> float:
    """``||f g||_{L^p'}`` over the whole period box, continuum normalization."""
    uf, ug = physical_field(f), physical_field(g)
    return lp_norm(uf.with_values(uf.values * ug.values), p_prime)


# ----------------------------------------------------------------------------
# Radon transform and the L^2 bilinear bound


def radon_hyperplane(density: LatticeDensity, xi_prime, theta, step: float | None = None) -> np.ndarray:
    """Integral of the density over the hyperplane through ``xi_prime`` with
    normal ``theta`` (bilinear interpolation between lattice values).

    ``xi_prime`` and ``theta`` may carry a leading batch axis.  On a line
    (n - 1 = 1) the hyperplane is a point and this is plain evaluation.
    """
    m = density.dim
    xp = np.atleast_2d(np.asarray(xi_prime, dtype=float))
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    xp, th = np.broadcast_arrays(xp, th)
    nrm = np.linalg.norm(th, axis=1)
    if np.any(np.abs(nrm - 1) > 1e-9):
        raise ValueError("theta must be a unit vector")
    h = density.spacing
    step = step or 0.5 * h
    vals_r = density.values.real
    vals_i = density.values.imag

    def interp(points):
        coords = ((points - density.origin) / h).T
        re = ndimage.map_coordinates(vals_r, coords, order=1, mode="constant", cval=0.0)
        im = ndimage.map_coordinates(vals_i, coords, order=1, mode="constant", cval=0.0)
        return re + 1j * im

    if m == 1:
        out = interp(xp)
    else:
        extent = h * max(density.values.shape) * math.sqrt(m)
        s = np.arange(-extent, extent + step / 2, step)
        mesh = np.stack(np.meshgrid(*([s] * (m - 1)), indexing="ij")).reshape(m - 1, -1).T
        out = np.empty(xp.shape[0], dtype=complex)
        for i in range(xp.shape[0]):
            basis = _orthonormal_complement(th[i])
            pts = xp[i] + mesh @ basis
            out[i] = interp(pts).sum() * step ** (m - 1)
    return out if np.ndim(xi_prime) > 1 or np.ndim(theta) > 1 else out[0]


def _orthonormal_complement(theta: np.ndarray) -> np.ndarray:
    """Rows spanning the hyperplane orthogonal to ``theta``."""
    m = theta.size
    q, _ = np.linalg.qr(np.column_stack([theta, np.eye(m)]))
    return q[:, 1:m].T


def l2_bilinear_sides(f: LatticeDensity, g: LatticeDensity, surface: SurfaceGraph, R: float = 6.0,
                      step: float = 0.25, pair_samples: int = 48):
    """Return (lhs, rhs) for the L^2 bilinear bound.

    lhs = ``||Ef Eg||^2_{L^2(B_R)}``; rhs = ``||f||_1 sup R|f| ||g||_1 ||g||_inf``
    with the Radon supremum over lattice pairs from the two supports.
    """
    if f.spacing != g.spacing:
        raise ValueError("densities must share a lattice spacing")
    pf, _ = f.support()
    pg, _ = g.support()
    if pf.size == 0 or pg.size == 0:
        return 0.0, 0.0
    sep = _support_distance(pf, pg)
    if sep < 0.5 - 1e-9:
        raise SeparationViolation(f"supports are {sep:.3f} apart, need at least 0.5")
    lhs = _product_l2_squared(f, g, surface, R, step)
    rng = np.random.default_rng(0)
    a = pf if len(pf) <= pair_samples else pf[rng.choice(len(pf), pair_samples, replace=False)]
    b = pg if len(pg) <= pair_samples else pg[rng.choice(len(pg), pair_samples, replace=False)]
    xi1 = np.repeat(a, len(b), axis=0)
    diff = xi1 - np.tile(b, (len(a), 1))
    theta = diff / np.linalg.norm(diff, axis=1, keepdims=True)
    absf = LatticeDensity(f.origin, f.spacing, np.abs(f.values))
    sup = float(np.max(np.abs(radon_hyperplane(absf, xi1, theta))))
    rhs = f.l1() * sup * g.l1() * g.linf()
    return lhs, rhs


def l2_bilinear_check(f, g, surface, C: float, **kw):
    """(lhs, rhs) and assert lhs <= C rhs."""
    lhs, rhs = l2_bilinear_sides(f, g, surface, **kw)
    if lhs > C * rhs * (1 + 1e-12):
        raise AssertionError(f"L^2 bilinear bound fails: {lhs:.4g} > {C} * {rhs:.4g}")
    return lhs, rhs


def _support_distance(a: np.ndarray, b: np.ndarray) -> float:
    best = math.inf
    for s in range(0, len(a), 512):
        d = np.sqrt(np.sum((a[s : s + 512, None, :] - b[None, :, :]) ** 2, axis=2))
        best = min(best, float(d.min()))
    return best


def _product_l2_squared(f: LatticeDensity, g: LatticeDensity, surface, R: float, step: float) -> float:
    h = f.spacing
    m = 8
    while 1.0 / (m * h) > step or m < max(f.values.shape + g.values.shape):
        m *= 2
    xs_step = 1.0 / (m * h)
    xs = np.arange(-R, R + xs_step / 2, xs_step)
    total = 0.0
    for lo in range(0, len(xs), SLICE_CHUNK):
        part = xs[lo : lo + SLICE_CHUNK]
        ax, ef = extension_on_slices(f, surface, part, m)
        _, eg = extension_on_slices(g, surface, part, m)
        grids = np.meshgrid(*([ax] * f.dim), indexing="ij")
        r2 = sum(q * q for q in grids)
        for i, t in enumerate(part):
            mask = r2 + t * t <= R * R
            total += float(np.sum(np.abs(ef[i][mask] * eg[i][mask]) ** 2))
    return total * xs_step ** (f.dim + 1)

"""Wave packets of extension operators, tube geometry and incidence counts.

Caps sit on the lattice ``s Z^m`` with ``s = R^(-1/2)`` and ``m = n - 1``.  Each
cap carries a product bump of half width ``0.75 s``; dividing by the root of
the summed squares over the whole lattice gives functions whose squares add up
to one exactly.  Every ``f zeta_alpha`` is expanded in a Fourier series on the
cube of side ``P = 2 s`` around the centre, so the packet frequencies are
``omega in (1/P) Z^m``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyClass, GridError, ResolutionLoss
from .grid import MAGIC, _unit_bump
from .restriction import (
    LatticeDensity,
    SurfaceGraph,
    density_on_ball,
    extension_eval,
    extension_on_slices,
    paraboloid,
)

BUMP_HALF_WIDTH = 0.75


# ----------------------------------------------------------------------------
# cap partition


@dataclass(frozen=True, eq=False)
class Cap:
    center: np.ndarray
    radius: float
    width: float = 0.0


@dataclass(frozen=True, eq=False)
class CapPartition:
    side: float
    centers: np.ndarray  # (K, m)
    domain_center: np.ndarray
    domain_radius: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def period(self) -> float:
        return 2.0 * self.side

    def caps(self) -> list:
        return [Cap(c, self.side) for c in self.centers]

    def _axis_sum(self, u: np.ndarray) -> np.ndarray:
        # sum over the integer lattice of bump((u - k) / w)^2, u in cap units
        w = BUMP_HALF_WIDTH
        base = np.floor(u)
        tot = np.zeros_like(u)
        for k in (-1, 0, 1, 2):
            tot += _unit_bump("smooth-exponential", (u - (base + k)) / w) ** 2
        return tot

    def sum_squares_eta(self, points: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(points) / self.side
        return np.prod(self._axis_sum(u), axis=1)

    def eta(self, alpha: int, points: np.ndarray) -> np.ndarray:
        u = (np.atleast_2d(points) - self.centers[alpha]) / self.side
        return np.prod(_unit_bump("smooth-exponential", u / BUMP_HALF_WIDTH), axis=1)

    def zeta(self, alpha: int, points: np.ndarray) -> np.ndarray:
        e = self.eta(alpha, points)
        out = np.zeros_like(e)
        nz = e > 0
        out[nz] = e[nz] / np.sqrt(self.sum_squares_eta(np.atleast_2d(points)[nz]))
        return out

    def sum_squares(self, points: np.ndarray) -> np.ndarray:
        """Sum of zeta^2 over the caps of this partition."""
        pts = np.atleast_2d(points)
        return sum(self.zeta(a, pts) ** 2 for a in range(len(self.centers)))


def cap_partition(domain_radius: float, R: float, dim: int = 1, spacing: float | None = None,
                  domain_center=None) -> CapPartition:
    """Caps of side ``R^(-1/2)`` whose bumps meet the ball of radius ``domain_radius``."""
    s = R**-0.5
    if spacing is not None and s < 2 * spacing * (1 - 1e-12):
        raise ResolutionLoss(f"cap side {s:.4g} is below two lattice spacings")
    c0 = np.zeros(dim) if domain_center is None else np.asarray(domain_center, dtype=float)
    reach = domain_radius + BUMP_HALF_WIDTH * s * math.sqrt(dim)
    lo = np.floor((c0 - reach) / s).astype(int)
    hi = np.ceil((c0 + reach) / s).astype(int)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    cand = s * np.stack(np.meshgrid(*axes, indexing="ij")).reshape(dim, -1).T
    # distance from the domain centre to the bump's support cube
    gap = np.maximum(np.abs(cand - c0) - BUMP_HALF_WIDTH * s, 0.0)
    keep = np.sqrt(np.sum(gap**2, axis=1)) < domain_radius
    return CapPartition(s, cand[keep], c0, float(domain_radius))


# ----------------------------------------------------------------------------
# decomposition and reconstruction


@dataclass(frozen=True, eq=False)
class PacketCoefficients:
    R: float
    partition: CapPartition
    spacing: float
    cap_ids: np.ndarray  # (E,)
    omegas: np.ndarray  # (E, m) or (E, m + 1) for thick fields
    coeffs: np.ndarray  # (E,)
    t_spacing: float | None = None
    t_origin: float = 0.0
    t_count: int = 0

    @property
    def window(self) -> int:
        return int(round(self.partition.period / self.spacing))

    def cap_volume(self) -> float:
        vol = self.partition.period**self.partition.dim
        if self.t_spacing is not None:
            vol *= self.t_count * self.t_spacing
        return vol

    def energy(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))

    def truncated(self, rel: float) -> "PacketCoefficients":
        if self.coeffs.size == 0:
            return self
        keep = np.abs(self.coeffs) >= rel * np.abs(self.coeffs).max()
        return PacketCoefficients(
            self.R, self.partition, self.spacing, self.cap_ids[keep], self.omegas[keep], self.coeffs[keep],
            self.t_spacing, self.t_origin, self.t_count,
        )


def _window_offset(f: LatticeDensity, center: np.ndarray, M: int) -> np.ndarray:
    off = (center - f.origin[: center.size]) / f.spacing - M // 2
    r = np.round(off)
    if np.any(np.abs(off - r) > 1e-6):
        raise ResolutionLoss("cap centres do not sit on the density lattice")
    return r.astype(int)


def _extract(values: np.ndarray, start: np.ndarray, M: int, extra: int = 0) -> np.ndarray:
    """Window of side M (zero padded) starting at ``start`` on the leading axes."""
    m = start.size
    out = np.zeros((M,) * m + values.shape[m:], dtype=complex)
    src, dst = [], []
    for a in range(m):
        lo, hi = start[a], start[a] + M
        clo, chi = max(lo, 0), min(hi, values.shape[a])
        if chi <= clo:
            return out
        src.append(slice(clo, chi))
        dst.append(slice(clo - lo, chi - lo))
    out[tuple(dst)] = values[tuple(src)]
    return out


def _sign(M: int, m: int) -> np.ndarray:
    l = np.fft.fftfreq(M, d=1.0 / M).astype(int)
    grids = np.meshgrid(*([l] * m), indexing="ij")
    return np.where(sum(grids) % 2 == 0, 1.0, -1.0)


def wp_decompose(f: LatticeDensity, R: float, partition: CapPartition | None = None,
                 truncate: float = 1e-12, thick: bool = False) -> PacketCoefficients:
    """Coefficients ``a(alpha, omega) = |alpha|^(-1/2) int f zeta_alpha e(-omega.(xi - c_alpha))``.

    With ``thick=True`` the last axis of ``f`` is the vertical offset t of a
    thickened cap; it is not partitioned and gets a full Fourier series, so
    the coefficients are those of a g-type field.
    """
    m = f.dim - 1 if thick else f.dim
    h = f.spacing
    if partition is None:
        pts = f.points()[:, :m]
        centre = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        radius = 0.5 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) + h
        partition = cap_partition(radius, R, m, h, centre)
    M = int(round(partition.period / h))
    if abs(M * h - partition.period) > 1e-9 * partition.period or M % 2:
        raise ResolutionLoss("cap period is not an even multiple of the lattice spacing")
    sign = _sign(M, m)
    tcount = f.values.shape[-1] if thick else 0
    vol = partition.period**m * (tcount * h if thick else 1.0)
    freq = np.fft.fftfreq(M, d=h)
    ids, oms, cs = [], [], []
    ax = h * (np.arange(M) - M // 2)
    local = np.stack(np.meshgrid(*([ax] * m), indexing="ij")).reshape(m, -1).T
    if thick:
        tfreq = np.fft.fftfreq(tcount, d=h)
    for a, c in enumerate(partition.centers):
        start = _window_offset(f, c, M)
        w = _extract(f.values, start, M)
        if not np.any(w):
            continue
        z = partition.zeta(a, c + local).reshape((M,) * m)
        if thick:
            w = w * z[..., None]
            spec = np.fft.fftn(w) * sign[..., None]
            # t runs from the density origin, shift phases to measure from it
        else:
            w = w * z
            spec = np.fft.fftn(w) * sign
        spec *= h ** f.dim / math.sqrt(vol)
        idx = np.nonzero(spec)
        if not idx[0].size:
            continue
        om = np.stack([freq[i] for i in idx[:m]], axis=1)
        if thick:
            om = np.column_stack([om, tfreq[idx[m]]])
        ids.append(np.full(idx[0].size, a))
        oms.append(om)
        cs.append(spec[idx])
    if not cs:
        empty = np.zeros((0, m + (1 if thick else 0)))
        return PacketCoefficients(R, partition, h, np.zeros(0, int), empty, np.zeros(0, complex),
                                  h if thick else None, 0.0, tcount)
    out = PacketCoefficients(
        R, partition, h, np.concatenate(ids), np.concatenate(oms), np.concatenate(cs),
        h if thick else None, float(f.origin[-1]) if thick else 0.0, tcount,
    )
    return out.truncated(truncate)


def _cap_density(coeffs: PacketCoefficients, a: int, rows: np.ndarray) -> LatticeDensity:
    """Density ``zeta_alpha * sum_omega a |alpha|^(-1/2) e(omega.(xi - c))`` on the cap window."""
    part = coeffs.partition
    m = part.dim
    h = coeffs.spacing
    M = coeffs.window
    u = np.zeros((M,) * m, dtype=complex)
    l = np.round(coeffs.omegas[rows, :m] * part.period).astype(int) % M
    np.add.at(u, tuple(l.T), coeffs.coeffs[rows])
    u *= _sign(M, m)
    s = np.fft.ifftn(u) * M**m / math.sqrt(coeffs.cap_volume())
    ax = h * (np.arange(M) - M // 2)
    local = np.stack(np.meshgrid(*([ax] * m), indexing="ij")).reshape(m, -1).T
    z = part.zeta(a, part.centers[a] + local).reshape((M,) * m)
    return LatticeDensity(part.centers[a] - h * (M // 2), h, s * z)


def wp_reconstruct(coeffs: PacketCoefficients, x_points, surface: SurfaceGraph | None = None) -> np.ndarray:
    """``sum a(alpha, omega) phi_T(x)``, summed cap by cap."""
    x = np.atleast_2d(np.asarray(x_points, dtype=float))
    if coeffs.t_spacing is not None:
        raise ValueError("reconstruction is implemented for extension packets only")
    surface = surface or paraboloid(coeffs.partition.dim + 1)
    out = np.zeros(x.shape[0], dtype=complex)
    for a in np.unique(coeffs.cap_ids):
        rows = np.nonzero(coeffs.cap_ids == a)[0]
        out += extension_eval(_cap_density(coeffs, int(a), rows), surface, x)
    return out


def packet_eval(coeffs: PacketCoefficients, row: int, x_points, surface: SurfaceGraph | None = None) -> np.ndarray:
    """The single packet ``phi_T`` of one coefficient row (unit coefficient)."""
    one = PacketCoefficients(
        coeffs.R, coeffs.partition, coeffs.spacing, coeffs.cap_ids[row : row + 1],
        coeffs.omegas[row : row + 1], np.ones(1, dtype=complex),
    )
    return wp_reconstruct(one, x_points, surface)


# ----------------------------------------------------------------------------
# tubes


@dataclass(frozen=True, eq=False)
class Tube:
    """Cylinder of radius ``A r`` about the line through ``base`` along
    ``direction``, cut by the slab ``|x_n - base_n| <= A half_length``."""

    direction: np.ndarray
    base: np.ndarray
    cross_radius: float
    half_length: float
    dilation: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))

    @property
    def radius(self) -> float:
        return self.dilation * self.cross_radius

    @property
    def slab(self) -> float:
        return self.dilation * self.half_length

    def dilate(self, A: float) -> "Tube":
        return Tube(self.direction, self.base, self.cross_radius, self.half_length, self.dilation * A)

    def axis_distance(self, x) -> np.ndarray:
        y = np.atleast_2d(x) - self.base
        along = y @ self.direction
        return np.linalg.norm(y - along[:, None] * self.direction, axis=1)

    def contains(self, x) -> np.ndarray:
        y = np.atleast_2d(x)
        return (np.abs(y[:, -1] - self.base[-1]) <= self.slab) & (self.axis_distance(y) <= self.radius)

    def meets_cubes(self, centers: np.ndarray, half: float) -> np.ndarray:
        """Exact test of the tube against axis-aligned cubes.

        The cube is cut by the slab (still a box), and the squared distance
        from the axis line to the box is a convex piecewise quadratic in the
        line parameter.  Its minimum sits at a clipped stationary point of one
        of the pieces, so checking all of them gives the exact distance.
        """
        c = np.atleast_2d(centers)
        lo = c - half
        hi = c + half
        lo[:, -1] = np.maximum(lo[:, -1], self.base[-1] - self.slab)
        hi[:, -1] = np.minimum(hi[:, -1], self.base[-1] + self.slab)
        valid = lo[:, -1] <= hi[:, -1]
        d2 = _line_box_dist2(self.base, self.direction, lo, hi)
        return valid & (d2 <= self.radius**2 * (1 + 1e-12))


def _line_box_dist2(b, v, lo, hi):
    n = b.size
    C = lo.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.where(v != 0, (lo - b) / v, np.nan)
        t_hi = np.where(v != 0, (hi - b) / v, np.nan)
    bps = np.concatenate([t_lo, t_hi], axis=1)
    finite = np.isfinite(bps)
    big = 1.0 + np.nanmax(np.abs(np.where(finite, bps, 0.0)))
    bps = np.where(finite, bps, big)
    bps = np.sort(np.concatenate([bps, np.full((C, 1), -big), np.full((C, 1), big)], axis=1), axis=1)
    a_lo, a_hi = bps[:, :-1], bps[:, 1:]
    mid = 0.5 * (a_lo + a_hi)
    p = b[None, None, :] + mid[..., None] * v[None, None, :]
    below = p < lo[:, None, :]
    above = p > hi[:, None, :]
    bound = np.where(below, lo[:, None, :], np.where(above, hi[:, None, :], 0.0))
    active = below | above
    num = np.sum(np.where(active, v * (b - bound), 0.0), axis=2)
    den = np.sum(np.where(active, v * v, 0.0), axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        tstar = np.where(den > 0, -num / den, mid)
    tstar = np.clip(tstar, a_lo, a_hi)
    q = b[None, None, :] + tstar[..., None] * v[None, None, :]
    ex = np.maximum(np.maximum(lo[:, None, :] - q, 0.0), q - hi[:, None, :])
    return np.min(np.sum(ex * ex, axis=2), axis=1)


def packet_tube(cap_center, omega, R: float, nu: float | None = None) -> Tube:
    """Tube of a packet: axis through ``(-omega', 0)`` along ``(-c, 1)``.

    For a g-packet (``nu`` given, omega of length n) the axis is shifted to
    height ``-omega_n`` and the length scale is ``1 / nu``.
    """
    c = np.asarray(cap_center, dtype=float)
    om = np.asarray(omega, dtype=float)
    m = c.size
    direction = np.append(-c, 1.0)
    if nu is None:
        return Tube(direction, np.append(-om[:m], 0.0), math.sqrt(R), R)
    height = -om[m] if om.size > m else 0.0
    base = np.append(-om[:m] - height * c, height)
    return Tube(direction, base, math.sqrt(R), 0.5 / nu)


class DecayAudit(NamedTuple):
    order: float
    distances: np.ndarray
    amplitudes: np.ndarray
    axis_amplitude: float
    far_ratio: float


def packet_decay_audit(coeffs: PacketCoefficients, row: int, delta: float = 0.25,
                       factors: Sequence[float] = (2.0, 4.0, 8.0), x_n: float = 0.0,
                       surface: SurfaceGraph | None = None) -> DecayAudit:
    """Fit ``|phi_T| ~ dist^-M`` at probes ``R^delta * factors`` cross radii off the axis.

    ``far_ratio`` compares the on-axis value at height R/2 with the value ten
    cross radii away at the same height.
    """
    R = coeffs.R
    part = coeffs.partition
    m = part.dim
    c = part.centers[coeffs.cap_ids[row]]
    om = coeffs.omegas[row, :m]
    unit = np.zeros(m)
    unit[0] = 1.0
    r = math.sqrt(R)
    dists = (R**delta) * np.asarray(factors, dtype=float)

    def at(height, d):
        xp = -om - height * c + d * r * unit
        return np.append(xp, height)

    pts = np.array([at(x_n, d) for d in dists])
    amps = np.abs(packet_eval(coeffs, row, pts, surface))
    slope = np.polyfit(np.log(dists), np.log(amps), 1)[0]
    axis_amp = float(np.abs(packet_eval(coeffs, row, at(x_n, 0.0)[None], surface))[0])
    half = np.array([at(R / 2, 0.0), at(R / 2, 10.0)])
    v = np.abs(packet_eval(coeffs, row, half, surface))
    return DecayAudit(float(-slope), dists, amps, axis_amp, float(v[0] / v[1]) if v[1] > 0 else math.inf)


# ----------------------------------------------------------------------------
# incidence geometry


@dataclass(frozen=True, eq=False)
class IncidenceConfig:
    R: float
    delta: float
    tubes1: list
    tubes2: list
    n: int
    caps1: np.ndarray | None = None  # cap centre of each tube in tubes1
    # T ~ B when B lies inside relation_factor * B*; the factor 10 of the
    # definition swallows the whole ball B_R at desk sizes
    relation_factor: float = 10.0

    @property
    def cube_side(self) -> float:
        return math.sqrt(self.R)

    @property
    def ball_radius(self) -> float:
        return self.R ** (1 - self.delta)


def cube_centers(R: float, n: int) -> np.ndarray:
    """Centres of the cubes of side R^(1/2) on the lattice, kept when the centre lies in B_R."""
    s = math.sqrt(R)
    k = int(math.ceil(R / s))
    ax = s * (np.arange(-k, k) + 0.5)
    c = np.stack(np.meshgrid(*([ax] * n), indexing="ij")).reshape(n, -1).T
    return c[np.sum(c * c, axis=1) <= R * R]


def ball_centers(R: float, Rp: float, n: int) -> np.ndarray:
    k = int(math.ceil(R / Rp))
    ax = Rp * np.arange(-k, k + 1)
    c = np.stack(np.meshgrid(*([ax] * n), indexing="ij")).reshape(n, -1).T
    return c[np.sqrt(np.sum(c * c, axis=1)) <= R]


class IncidenceStats(NamedTuple):
    cubes: np.ndarray  # centres of all cubes
    t2_count: np.ndarray  # |T2(q)| per cube
    classes: np.ndarray  # dyadic class of each cube (0 when no tube)
    in_class: np.ndarray  # bool mask of q(mu2)
    hits1: np.ndarray  # (|T1|, cubes) bool, R^delta T1 meets q
    lam: np.ndarray  # lambda(T1, mu2) per tube
    balls: np.ndarray
    lam_ball: np.ndarray  # (|T1|, balls)
    best_ball: np.ndarray  # index of B*(mu2, T1) or -1
    related: np.ndarray  # (|T1|, balls) bool, relation for this mu2


def dyadic_class(k: np.ndarray) -> np.ndarray:
    """Largest power of two not above k; zero for k = 0."""
    k = np.asarray(k)
    out = np.zeros(k.shape, dtype=int)
    nz = k > 0
    out[nz] = 2 ** np.floor(np.log2(k[nz])).astype(int)
    return out


def _hits(tubes, cubes, half, A):
    if not tubes:
        return np.zeros((0, len(cubes)), dtype=bool)
    return np.array([t.dilate(A).meets_cubes(cubes, half) for t in tubes])


def incidence_stats(config: IncidenceConfig, mu2: int, cache: dict | None = None) -> IncidenceStats:
    R = config.R
    A = R**config.delta
    half = 0.5 * config.cube_side
    cache = {} if cache is None else cache
    if "cubes" not in cache:
        cubes = cube_centers(R, config.n)
        cache["cubes"] = cubes
        cache["hits2"] = _hits(config.tubes2, cubes, half, A)
        cache["hits1"] = _hits(config.tubes1, cubes, half, A)
        Rp = config.ball_radius
        balls = ball_centers(R, Rp, config.n)
        corner = half * math.sqrt(config.n)
        dist = np.sqrt(np.sum((cubes[None, :, :] - balls[:, None, :]) ** 2, axis=2))
        cache["balls"] = balls
        cache["inside"] = dist + corner <= Rp  # (balls, cubes): q inside B
    cubes = cache["cubes"]
    hits1 = cache["hits1"]
    t2 = cache["hits2"].sum(axis=0) if len(config.tubes2) else np.zeros(len(cubes), int)
    classes = dyadic_class(t2)
    in_class = classes == mu2
    lam = (hits1 & in_class).sum(axis=1)
    lam_ball = (hits1 & in_class).astype(int) @ cache["inside"].T.astype(int)
    balls = cache["balls"]
    if lam_ball.size:
        best = np.where(lam_ball.max(axis=1) > 0, np.argmax(lam_ball, axis=1), -1)
    else:
        best = np.full(len(config.tubes1), -1)
    Rp = config.ball_radius
    bd = np.sqrt(np.sum((balls[:, None, :] - balls[None, :, :]) ** 2, axis=2))
    within = bd + Rp <= config.relation_factor * Rp * (1 + 1e-12)  # B inside factor * B*
    related = np.zeros((len(config.tubes1), len(balls)), dtype=bool)
    for i, b in enumerate(best):
        if b >= 0:
            related[i] = within[b]
    return IncidenceStats(cubes, t2, classes, in_class, hits1, lam, balls, lam_ball, best, related)


def related_ball_counts(config: IncidenceConfig) -> np.ndarray:
    """Number of balls each T1 tube is related to, over all occupied mu2 classes."""
    cache: dict = {}
    st = incidence_stats(config, 1, cache)
    rel = np.zeros_like(st.related)
    for mu2 in occupied_classes(st):
        rel |= incidence_stats(config, int(mu2), cache).related
    return rel.sum(axis=1)


def occupied_classes(stats: IncidenceStats) -> list:
    return sorted(int(c) for c in np.unique(stats.classes) if c > 0)


def lambda_classes(stats: IncidenceStats) -> list:
    return sorted(int(c) for c in np.unique(dyadic_class(stats.lam)) if c > 0)


def kakeya_bound_check(config: IncidenceConfig, mu2: int, lambda1: int, C: float, C_delta: float,
                       samples: int = 25, stats: IncidenceStats | None = None, cache: dict | None = None):
    """(lhs, rhs) for the plane-slab count against ``C R^(C_delta delta) |T2| / (mu2 lambda1)``.

    lhs is the largest, over cubes q0 in q(mu2) and over sampled pairs
    (xi', xi'') from the two cap regions, of the number of tubes in
    T1[mu2, lambda1] that meet q0, are not related to the ball holding q0, and
    whose cap meets the hyperplane through xi' with normal xi' - xi''.
    """
    st = stats or incidence_stats(config, mu2, cache)
    if config.caps1 is None:
        raise ValueError("config needs the cap centres of the T1 tubes")
    cls = dyadic_class(st.lam) == lambda1
    if not np.any(cls):
        raise EmptyClass(f"no tube has lambda in [{lambda1}, {2 * lambda1})")
    q0s = np.nonzero(st.in_class)[0]
    if q0s.size == 0:
        raise EmptyClass(f"no cube has multiplicity class {mu2}")
    caps = config.caps1
    s = config.R**-0.5
    # lattice samples of the two projections: T1 caps near +e1/2, T2 near -e1/2
    side = int(round(math.sqrt(samples)))
    a_pts = _sample_points(caps, side)
    b_pts = _sample_points(config_caps2(config), side)
    pairs = [(a, b) for a in a_pts for b in b_pts][:samples]
    # ball holding each cube (nearest centre)
    d = np.sum((st.cubes[q0s][:, None, :] - st.balls[None, :, :]) ** 2, axis=2)
    home = np.argmin(d, axis=1)
    best = 0
    for q, hb in zip(q0s, home):
        base = cls & st.hits1[:, q] & ~st.related[:, hb]
        if not np.any(base):
            continue
        for a, b in pairs:
            theta = (a - b) / np.linalg.norm(a - b)
            near = np.abs((caps - a) @ theta) <= s
            best = max(best, int(np.sum(base & near)))
    rhs = C * config.R ** (C_delta * config.delta) * len(config.tubes2) / (mu2 * lambda1)
    return best, rhs


def kakeya_rows(config: IncidenceConfig, C: float, C_delta: float, samples: int = 25) -> list:
    """One ``(R, delta, mu2, lambda1, T1, T2, lhs, rhs)`` row per nonempty class pair.

    T1 is the size of ``T1[mu2, lambda1]`` and T2 the size of the second family.
    """
    cache: dict = {}
    rows = []
    first = incidence_stats(config, 1, cache)
    for mu2 in occupied_classes(first):
        st = incidence_stats(config, mu2, cache)
        for lam1 in lambda_classes(st):
            lhs, rhs = kakeya_bound_check(config, mu2, lam1, C, C_delta, samples, stats=st)
            t1 = int(np.sum(dyadic_class(st.lam) == lam1))
            rows.append((config.R, config.delta, mu2, lam1, t1, len(config.tubes2), lhs, rhs))
    return rows


def _sample_points(caps: np.ndarray, side: int) -> np.ndarray:
    lo, hi = caps.min(axis=0), caps.max(axis=0)
    axes = [np.linspace(a, b, side) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T
    return pts[:side]


def config_caps2(config: IncidenceConfig) -> np.ndarray:
    # T2 directions are (-c, 1) up to scale; recover c from the direction
    return np.array([-t.direction[:-1] / t.direction[-1] for t in config.tubes2])


def random_incidence_config(n: int, R: float, delta: float, seed: int, count1: int = 24,
                            count2: int = 24, nu: float | None = None,
                            relation_factor: float = 10.0) -> IncidenceConfig:
    """Random unit-coefficient tube families from caps near +e1/2 and -e1/2.

    Positions omega are drawn from ``R^(1/2) Z^(n-1)`` within ``R / 2`` of the
    origin so every tube meets ``10 B_R``.
    """
    rng = np.random.default_rng(seed)
    m = n - 1
    s = R**-0.5
    e1 = np.zeros(m)
    e1[0] = 0.5

    def family(center, count, thick):
        k = int(round(0.25 / s))
        caps, tubes = [], []
        for _ in range(count):
            c = center + s * rng.integers(-k, k + 1, size=m)
            lim = int(R / 2 / math.sqrt(R))
            om = math.sqrt(R) * rng.integers(-lim, lim + 1, size=m).astype(float)
            if thick:
                om = np.append(om, rng.uniform(-0.25, 0.25) / (nu or 1.0 / R))
            caps.append(c)
            tubes.append(packet_tube(c, om, R, nu if thick else None))
        return np.array(caps), tubes

    caps1, t1 = family(e1, count1, False)
    _, t2 = family(-e1, count2, nu is not None)
    return IncidenceConfig(float(R), float(delta), t1, t2, n, caps1, relation_factor)


# ----------------------------------------------------------------------------
# induction-on-scales probe


class InductionRow(NamedTuple):
    R: float
    estimate: float


class InductionResult(NamedTuple):
    rows: list
    exponent: float | None


def _thick_values(g_hat: np.ndarray, density: LatticeDensity, t_values, surface, x_n, fft_size):
    """g(x) = sum_t e(x_n t) E(g_hat(., t))(x) dt on the slice grid."""
    total = None
    dt = t_values[1] - t_values[0] if len(t_values) > 1 else 1.0
    for j, t in enumerate(t_values):
        d = LatticeDensity(density.origin, density.spacing, g_hat[..., j])
        ax, v = extension_on_slices(d, surface, x_n, fft_size)
        v = v * np.exp(2j * np.pi * np.asarray(x_n) * t).reshape((-1,) + (1,) * density.dim) * dt
        total = v if total is None else total + v
    return ax, total


def induction_probe(surface: SurfaceGraph, nu: float, R_list: Sequence[float], p_prime: float,
                    candidates: int = 2, seed: int = 0, step: float = 0.5, cap_radius: float = 0.2):
    """Max over candidate pairs of ``||Ef g_nu||_{L^p'(B_R)} / (||f||_2 ||g_nu||_2)``."""
    for R in R_list:
        if not (1 / nu) * (1 - 1e-9) <= R <= (1 / nu**2) * (1 + 1e-9):
            raise ValueError(f"R = {R} lies outside [1/nu, 1/nu^2]")
    m = surface.base_dim
    Rmax = max(R_list)
    h = 1.0 / (8 * Rmax)
    fft = 1
    while 1.0 / (fft * h) > step:
        fft *= 2
    dx = 1.0 / (fft * h)
    x_n = np.arange(-Rmax, Rmax + dx / 2, dx)
    tcount = max(4, int(round(nu * 4 * Rmax)))
    t_values = -0.5 * nu + (np.arange(tcount) + 0.5) * nu / tcount
    e1 = np.zeros(m)
    e1[0] = 0.5
    best = {R: 0.0 for R in R_list}
    for j in range(candidates):
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        smooth = j % 2 == 0

        def prof(p, centre):
            r = np.sqrt(np.sum((p - centre) ** 2, axis=1)) / cap_radius
            base = _unit_bump("smooth-exponential", r)
            if smooth:
                return base
            return base * np.exp(2j * np.pi * rng.uniform(size=len(p)))

        f = density_on_ball(e1, cap_radius, h, lambda p: prof(p, e1))
        gd = density_on_ball(-e1, cap_radius, h, lambda p: prof(p, -e1))
        tw = _unit_bump("smooth-exponential", t_values / (0.5 * nu)) if smooth else \
            rng.uniform(0.5, 1.0, size=tcount)
        g_hat = gd.values[..., None] * tw
        ax, ef = extension_on_slices(f, surface, x_n, fft)
        _, gv = _thick_values(g_hat, gd, t_values, surface, x_n, fft)
        fn = f.l2()
        gn = math.sqrt(np.sum(np.abs(g_hat) ** 2) * h**m * (nu / tcount))
        grids = np.meshgrid(*([ax] * m), indexing="ij")
        r2 = sum(q * q for q in grids)
        prod = np.abs(ef * gv) ** p_prime
        for R in R_list:
            mask = (r2[None] + x_n.reshape((-1,) + (1,) * m) ** 2) <= R * R
            val = (np.sum(prod[mask]) * dx ** (m + 1)) ** (1 / p_prime) / (fn * gn)
            best[R] = max(best[R], float(val))
    rows = [InductionRow(float(R), best[R]) for R in R_list]
    if len(R_list) < 2:
        return InductionResult(rows, None)
    slope = np.polyfit(np.log([r.R for r in rows]), np.log([r.estimate for r in rows]), 1)[0]
    return InductionResult(rows, float(slope))


# ----------------------------------------------------------------------------
# spectral support of products of neighboring caps


def product_spectrum_fraction(u, v, predicate) -> float:
    """Share of the spectral mass of ``u * conj(v)`` (physical fields on one grid)
    at angular frequencies where ``predicate(xi)`` holds."""
    from .grid import Field

    w = Field(u.grid, u.physical().values * np.conj(v.physical().values)).frequency()
    mass = np.abs(w.values) ** 2
    tot = mass.sum()
    if tot == 0:
        return 1.0
    return float(mass[predicate(w.grid.freqs())].sum() / tot)


def save_packets(coeffs: PacketCoefficients, path) -> None:
    """Write coefficients in the flat field layout plus a ``.idx`` sidecar.

    The binary file is the magic, then (1, E, R) as the (d, N, L) header and
    the E complex coefficients.  The sidecar is a CSV with one ``cap,omega_*``
    row per coefficient, in the same order.
    """
    path = str(path)
    vals = np.ascontiguousarray(coeffs.coeffs, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<qqd", 1, vals.size, float(coeffs.R)) + vals.tobytes())
    k = coeffs.omegas.shape[1] if coeffs.omegas.ndim == 2 else 0
    with open(path + ".idx", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cap"] + [f"omega_{j}" for j in range(k)])
        for a, om in zip(coeffs.cap_ids, coeffs.omegas):
            w.writerow([int(a)] + [repr(float(v)) for v in om])


def load_packets(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Read back ``(cap_ids, omegas, coeffs, R)`` written by :func:`save_packets`."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise GridError("bad magic, not a packet file")
    off = len(MAGIC)
    _, count, R = struct.unpack_from("<qqd", data, off)
    off += struct.calcsize("<qqd")
    vals = np.frombuffer(data, dtype="<c16", count=count, offset=off).copy()
    with open(path + ".idx", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    caps = np.array([int(r[0]) for r in rows], dtype=int)
    omegas = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
    return caps, omegas, vals, R

"""Periodic Fourier lattice, sampled fields and smooth cutoffs.

Frequencies are angular: a lattice point ``k`` sits at ``pi * k / L`` and the
mode ``exp(i x . xi)`` is resolved exactly.  Transforms use the unitary DFT, so
the sum of ``|u|^2`` is the same in both representations.  Continuum integrals
are plain Riemann sums with cell volume ``(2L/N)^d``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import GridError, NonFiniteMultiplier, RepresentationMismatch

PHYSICAL = "physical"
FREQUENCY = "frequency"

# d * log2(N) above this would need more than 2**27 samples per field
DEFAULT_MEMORY_CAP = 27

MAGIC = b"RLAB1"


@dataclass(frozen=True)
class FourierGrid:
    dim: int
    n: int
    box_radius: float

    @property
    def freq_spacing(self) -> float:
        return math.pi / self.box_radius

    @property
    def spacing(self) -> float:
        return 2.0 * self.box_radius / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    def axis(self) -> np.ndarray:
        """Physical sample positions along one axis, starting at -L."""
        return self.spacing * np.arange(self.n) - self.box_radius

    def freq_axis(self) -> np.ndarray:
        """Angular frequencies along one axis, in FFT storage order."""
        return self.freq_spacing * np.fft.fftfreq(self.n, d=1.0 / self.n)

    def coords(self) -> np.ndarray:
        """Array of shape (d, N, ..., N) holding physical coordinates."""
        ax = self.axis()
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"))

    def freqs(self) -> np.ndarray:
        """Array of shape (d, N, ..., N) holding angular frequencies."""
        ax = self.freq_axis()
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"))

    def freq_index(self) -> np.ndarray:
        """Integer lattice labels k in {-N/2, ..., N/2-1}, FFT order."""
        ax = np.fft.fftfreq(self.n, d=1.0 / self.n).astype(int)
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"))


def make_grid(d: int, N: int, L: float, memory_cap: int = DEFAULT_MEMORY_CAP) -> FourierGrid:
    if int(d) != d or d < 1:
        raise GridError(f"dimension must be a positive integer, got {d}")
    if int(N) != N or N < 8 or (int(N) & (int(N) - 1)) != 0:
        raise GridError(f"points per axis must be a power of two >= 8, got {N}")
    if not (L > 0 and math.isfinite(L)):
        raise GridError(f"box radius must be positive, got {L}")
    if d * int(math.log2(N)) > memory_cap:
        raise GridError(
            f"grid with d={d}, N={N} has 2**{d * int(math.log2(N))} points, "
            f"above the cap 2**{memory_cap}"
        )
    return FourierGrid(int(d), int(N), float(L))


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples on a grid, in one of two representations."""

    grid: FourierGrid
    values: np.ndarray
    representation: str = PHYSICAL

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape:
            raise GridError(f"values have shape {vals.shape}, grid needs {self.grid.shape}")
        if self.representation not in (PHYSICAL, FREQUENCY):
            raise GridError(f"unknown representation {self.representation!r}")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def physical(self) -> "Field":
        return self if self.representation == PHYSICAL else transform(self, "inverse")

    def frequency(self) -> "Field":
        return self if self.representation == FREQUENCY else transform(self, "forward")

    def with_values(self, values, representation=None) -> "Field":
        return Field(self.grid, values, representation or self.representation)

    def __add__(self, other: "Field") -> "Field":
        b = other.physical() if self.representation == PHYSICAL else other.frequency()
        return self.with_values(self.values + b.values)

    def __sub__(self, other: "Field") -> "Field":
        return self + (-1.0) * other

    def __mul__(self, c) -> "Field":
        return self.with_values(self.values * c)

    __rmul__ = __mul__


def centered_phase(grid: FourierGrid) -> np.ndarray:
    """Signs (-1)^(k_1+...+k_d) in FFT order.

    Multiplying lattice coefficients a_k by these makes the physical samples
    equal ``N^(-d/2) sum_k a_k exp(i xi_k . x)`` at the true positions x, so a
    spectrum written in origin-centred form lands where it should.
    """
    k = grid.freq_index()
    return np.where(np.sum(k, axis=0) % 2 == 0, 1.0, -1.0)


def field_from_function(grid: FourierGrid, fn: Callable) -> Field:
    """Sample ``fn(x)`` where x has shape (d, N, ..., N)."""
    return Field(grid, np.broadcast_to(fn(grid.coords()), grid.shape), PHYSICAL)


def field_from_spectrum(grid: FourierGrid, fn: Callable) -> Field:
    """Frequency field with coefficients ``fn(xi)``."""
    return Field(grid, np.broadcast_to(fn(grid.freqs()), grid.shape), FREQUENCY)


def transform(field: Field, direction: Literal["forward", "inverse"]) -> Field:
    if direction == "forward":
        if field.representation != PHYSICAL:
            raise RepresentationMismatch("forward transform needs a physical field")
        return Field(field.grid, np.fft.fftn(field.values, norm="ortho"), FREQUENCY)
    if direction == "inverse":
        if field.representation != FREQUENCY:
            raise RepresentationMismatch("inverse transform needs a frequency field")
        return Field(field.grid, np.fft.ifftn(field.values, norm="ortho"), PHYSICAL)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def lp_norm(field: Field, p: float = 2.0, region: tuple | None = None) -> float:
    """Riemann-sum L^p norm; ``region`` is an optional ``(center, radius)`` ball."""
    if field.representation != PHYSICAL:
        raise RepresentationMismatch("lp_norm needs a physical field")
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = np.abs(field.values)
    if region is not None:
        center, radius = region
        x = field.grid.coords()
        c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * field.grid.dim)
        a = a[np.sum((x - c) ** 2, axis=0) <= radius**2]
    if a.size == 0:
        return 0.0
    if math.isinf(p):
        return float(a.max())
    scale = a.max()
    if scale == 0:
        return 0.0
    return float(scale * (np.sum((a / scale) ** p) * field.grid.cell_volume) ** (1.0 / p))


def apply_multiplier(field: Field, m) -> Field:
    """Multiply frequency coefficients by ``m``, a callable of the frequency
    mesh or an array on the lattice.  Returns a field in the input's
    representation."""
    f = field.frequency()
    vals = m(field.grid.freqs()) if callable(m) else m
    vals = np.broadcast_to(np.asarray(vals), field.grid.shape)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteMultiplier("multiplier has non-finite values")
    out = Field(field.grid, f.values * vals, FREQUENCY)
    return out if field.representation == FREQUENCY else out.physical()


def derivative(field: Field, axis: int) -> Field:
    """Spectral partial derivative along ``axis``."""
    return apply_multiplier(field, lambda xi: 1j * xi[axis])


def outer_quarter_fraction(field: Field) -> float:
    """Fraction of l^2 mass on frequencies with some |k_j| > N/4."""
    f = field.frequency()
    k = np.abs(f.grid.freq_index())
    outer = np.any(k > f.grid.n // 4, axis=0)
    total = np.sum(np.abs(f.values) ** 2)
    if total == 0:
        return 0.0
    return float(np.sum(np.abs(f.values[outer]) ** 2) / total)


def check_resolution(field: Field, tol: float = 1e-10) -> bool:
    """Warn when spectral mass reaches the outer quarter of the lattice."""
    frac = outer_quarter_fraction(field)
    if frac > tol:
        warnings.warn(
            f"{frac:.2e} of the spectral mass lies in the outer quarter of the lattice; "
            "aliasing may be visible",
            RuntimeWarning,
            stacklevel=2,
        )
        return False
    return True


@dataclass(frozen=True)
class BumpProfile:
    kind: Literal["smooth-exponential", "cosine-taper"] = "smooth-exponential"
    support_radius: float = 1.0


def _unit_bump(kind: str, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    if kind == "smooth-exponential":
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - ti * ti))
    elif kind == "cosine-taper":
        out[inside] = 0.5 * (1.0 + np.cos(np.pi * ti))
    else:
        raise ValueError(f"unknown bump kind {kind!r}")
    return out


def smooth_bump(profile: BumpProfile | None = None, center: float = 0.0, radius: float | None = None) -> Callable:
    """Return ``t -> b((t - center) / radius)`` with b supported in (-1, 1), b(0) = 1.

    ``radius`` defaults to ``profile.support_radius``.
    """
    profile = profile or BumpProfile()
    r = profile.support_radius if radius is None else radius
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    kind = profile.kind

    def bump(t):
        res = _unit_bump(kind, (np.asarray(t, dtype=float) - center) / r)
        return res if res.ndim else float(res)

    return bump


def radial_bump(grid: FourierGrid, radius: float, center=None, kind: str = "smooth-exponential") -> Field:
    """Physical field ``b(|x - center| / radius)``."""
    x = grid.coords()
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    r = np.sqrt(np.sum((x - c.reshape((-1,) + (1,) * grid.dim)) ** 2, axis=0))
    return Field(grid, _unit_bump(kind, r / radius), PHYSICAL)


def to_bytes(field: Field) -> bytes:
    """Serialize as magic, d, N, L (little-endian 64-bit) and interleaved
    re/im float64 physical samples in row-major order."""
    g = field.grid
    vals = np.ascontiguousarray(field.physical().values, dtype="<c16")
    return MAGIC + struct.pack("<qqd", g.dim, g.n, g.box_radius) + vals.tobytes(order="C")


def from_bytes(data: bytes) -> Field:
    if data[: len(MAGIC)] != MAGIC:
        raise GridError("bad magic, not an RLAB1 field")
    off = len(MAGIC)
    d, n, L = struct.unpack_from("<qqd", data, off)
    off += struct.calcsize("<qqd")
    grid = make_grid(d, n, L)
    expected = 16 * grid.size
    if len(data) - off != expected:
        raise GridError(f"payload has {len(data) - off} bytes, expected {expected}")
    vals = np.frombuffer(data, dtype="<c16", offset=off).reshape(grid.shape)
    return Field(grid, vals, PHYSICAL)


def save_field(field: Field, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(field))


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

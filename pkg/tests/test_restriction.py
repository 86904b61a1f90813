import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlab import constants
from rlab.calibrate import AXIS_GRID, axis_pair, axis_witness, separated_pair, smooth_density
from rlab.errors import (
    DomainViolation,
    InsufficientLevels,
    RegimeViolation,
    ResolutionLoss,
    SeparationViolation,
    ZeroDenominator,
)
from rlab.grid import Field, lp_norm, make_grid
from rlab.restriction import (
    LatticeDensity,
    axis_bound,
    bilinear_ratio,
    default_grid,
    density_on_ball,
    elliptic,
    extension_eval,
    extension_on_slices,
    extremal_pair,
    fit_loglog,
    hemisphere,
    k_estimate_and_fit,
    l2_bilinear_check,
    l2_bilinear_sides,
    make_neighborhood,
    neighborhood_mass_fraction,
    parabolic_rescale,
    paraboloid,
    product_norm,
    radon_hyperplane,
    regime_cells,
    slice_masses,
    spectral_width,
    surface_grad,
    surface_hess,
    surface_phi,
    trace_ratio,
)

# --- surfaces ------------------------------------------------------------------------


def test_surface_closed_forms():
    p = paraboloid(3)
    assert surface_phi(p, [0.0, 0.0]) == 0
    assert np.array_equal(surface_grad(p, [0.0, 0.0]), [0.0, 0.0])
    assert np.array_equal(surface_hess(p, [0.0, 0.0]), np.eye(2))
    h = hemisphere(3)
    assert surface_phi(h, [0.5, 0.0]) == pytest.approx(1 - math.sqrt(0.75))
    assert surface_phi(h, [0.3, 0.4]) == pytest.approx(1 - math.sqrt(0.75))
    with pytest.raises(DomainViolation):
        hemisphere(3, domain_radius=0.9)
    with pytest.raises(DomainViolation):
        surface_phi(p, [0.9, 0.9])


@pytest.mark.parametrize("seed", range(5))
def test_elliptic_hessian_bracket(seed):
    s = elliptic(3, 0.1, seed)
    assert surface_phi(s, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(surface_grad(s, [0.0, 0.0]), 0.0, atol=1e-15)
    t = np.linspace(-0.7, 0.7, 21)
    pts = np.stack(np.meshgrid(t, t), axis=-1).reshape(-1, 2)
    eig = np.linalg.eigvalsh(surface_hess(s, pts))
    assert eig.min() >= 0.9 - 1e-12 and eig.max() <= 1.1 + 1e-12


def test_hemisphere_derivatives_match_finite_differences():
    h = hemisphere(3)
    x = np.array([0.2, -0.3])
    e = 1e-6
    fd = [(surface_phi(h, x + e * v) - surface_phi(h, x - e * v)) / (2 * e) for v in np.eye(2)]
    assert np.allclose(surface_grad(h, x), fd, atol=1e-8)
    fd2 = np.array([(surface_grad(h, x + e * v) - surface_grad(h, x - e * v)) / (2 * e) for v in np.eye(2)])
    assert np.allclose(surface_hess(h, x), fd2, atol=1e-6)


# --- extension -------------------------------------------------------------------------


def test_point_mass_extension_has_constant_modulus():
    pts = np.array([[0.3, -0.2]])
    rng = np.random.default_rng(0)
    x = rng.uniform(-50, 50, (40, 3))
    vals = extension_eval((pts, [2.5]), paraboloid(3), x)
    assert np.allclose(np.abs(vals), 2.5)


def test_extension_at_origin_is_cap_area():
    d = density_on_ball([0.0, 0.0], 0.4, 1 / 256)
    got = extension_eval(d, paraboloid(3), [[0, 0, 0]])[0]
    assert got.real == pytest.approx(math.pi * 0.16, rel=1e-2)
    assert got.real == pytest.approx(d.l1())


@pytest.mark.parametrize("n", [2, 3])
def test_slice_evaluation_matches_direct_quadrature(n):
    d = smooth_density(n, 3, spacing=1 / 32)
    m = 64
    heights = np.array([-3.0, 0.0, 2.5])
    ax, vals = extension_on_slices(d, paraboloid(n), heights, m)
    rng = np.random.default_rng(n)
    for _ in range(10):
        i = rng.integers(len(heights))
        idx = tuple(rng.integers(m, size=n - 1))
        x = np.append([ax[j] for j in idx], heights[i])
        assert vals[(i,) + idx] == pytest.approx(extension_eval(d, paraboloid(n), [x])[0], abs=1e-10)


@pytest.mark.parametrize("n", [2, 3])
def test_trace_constant_is_stable_in_R(n):
    C = constants.get(f"trace_C_n{n}")
    ratios = [trace_ratio(smooth_density(n, 7), paraboloid(n), R) for R in (16.0, 32.0)]
    assert max(ratios) <= C
    assert max(ratios) / min(ratios) < 1.1


def test_trace_needs_fine_spacing():
    with pytest.raises(ResolutionLoss):
        trace_ratio(density_on_ball([0.0], 0.3, 1 / 16), paraboloid(2), 16.0)


# --- neighborhoods ---------------------------------------------------------------------


@pytest.mark.parametrize("n,profile", [(2, "random"), (3, "random"), (3, "smooth"), (2, "constant")])
def test_neighborhood_mass_and_slices(n, profile):
    s = paraboloid(n)
    center = [0.2] + [0.1] * (n - 2)
    f = make_neighborhood(s, center, 0.2, 2**-4, profile=profile, seed=3)
    assert neighborhood_mass_fraction(f) >= 0.999
    total = lp_norm(f.field.physical(), 2) ** 2
    assert np.sum(slice_masses(f)) == pytest.approx(total, rel=1e-2)


def test_one_slice_neighborhood_is_an_extension():
    s = paraboloid(2)
    grid = default_grid(2, 2**-5)
    f = make_neighborhood(s, [0.2], 0.1, 2**-5, grid=grid, slice_width=2**-5)
    assert f.slice_count() == 1


def test_neighborhood_needs_lattice_room():
    with pytest.raises(ResolutionLoss):
        make_neighborhood(paraboloid(2), [0.0], 0.5, 2**-8, grid=make_grid(2, 64, 2.0**8))


def test_bilinear_ratio_errors_and_single_mode():
    s = paraboloid(2)
    f = make_neighborhood(s, [0.0], 0.05, 2**-4)
    zero = make_neighborhood(s, [0.0], 0.05, 2**-4, profile=lambda rel, t: 0.0 * t)
    with pytest.raises(ZeroDenominator):
        bilinear_ratio(f, zero, 2.0)
    with pytest.raises(ValueError):
        bilinear_ratio(f, f, 2.5)
    # one lattice mode: |u| is constant, so ||u^2||_2 / ||u||_2^2 = volume^(-1/2)
    one = make_neighborhood(s, [0.0], 1e-3, 2**-4, profile=lambda rel, t: (np.abs(rel[0]) + np.abs(t) < 1e-12) * 1.0)
    assert np.count_nonzero(one.coeffs) == 1
    vol = (2 * one.grid.box_radius) ** 2
    assert bilinear_ratio(one, one, 2.0, region="full") == pytest.approx(vol**-0.5)


@pytest.mark.parametrize("n,p_prime", [(2, 2.0), (3, 1.5)])
def test_same_cap_pair_matches_linear_rate(n, p_prime):
    p = p_prime / (p_prime - 1)
    for mu in (2**-4, 2**-6):
        f, g = extremal_pair(paraboloid(n), "translated-cap", mu, mu, separation=0)
        assert 0.3 <= bilinear_ratio(f, g, p_prime) / mu ** ((n + 1) / (2 * p)) <= 3


def test_extremal_lower_bounds():
    mu, nu = 2**-6, 2**-3
    f, g = extremal_pair(paraboloid(3), "squashed-cap", mu, nu)
    assert bilinear_ratio(f, g, 1.5) >= 0.1 * mu ** (3 / 6) * nu ** (1 / 3)
    f, g = extremal_pair(paraboloid(2), "translated-cap", mu, nu)
    assert bilinear_ratio(f, g, 2.0) >= 0.1 * (mu * nu) ** 0.5


def test_extremal_regime_errors():
    with pytest.raises(RegimeViolation):
        extremal_pair(paraboloid(2), "translated-cap", 2**-6, 2**-4)
    with pytest.raises(RegimeViolation):
        extremal_pair(paraboloid(2), "squashed-cap", 2**-6, 2**-4)
    with pytest.raises(RegimeViolation):
        extremal_pair(paraboloid(3), "squashed-cap", 2**-6, 2**-2)
    with pytest.raises(RegimeViolation):
        extremal_pair(paraboloid(2), "planar-cap", 2**-3, 2**-4)


def test_hemisphere_and_paraboloid_agree_on_small_caps():
    for r in (0.1, 0.2):
        for mu in (2**-5, 2**-6):
            out = []
            for s in (paraboloid(2), hemisphere(2)):
                grid = default_grid(2, mu)
                f = make_neighborhood(s, [0.3], r, mu, grid=grid)
                g = make_neighborhood(s, [-0.3], r, mu, grid=grid)
                out.append(bilinear_ratio(f, g, 2.0))
            assert 0.5 <= out[0] / out[1] <= 2


# --- fits ------------------------------------------------------------------------------


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3))
def test_loglog_fit_recovers_exact_powers(a, b, c):
    mus = [2.0**-k for k in (5, 6, 7, 8) for _ in range(2)]
    nus = [2.0**-k for _ in range(4) for k in (3, 4)]
    r = [math.exp(c) * m**a * v**b for m, v in zip(mus, nus)]
    e_mu, e_nu, r2, icpt = fit_loglog(mus, nus, r)
    assert e_mu == pytest.approx(a, abs=1e-9) and e_nu == pytest.approx(b, abs=1e-9)
    assert icpt == pytest.approx(c, abs=1e-8)


def test_regime_cells():
    cells = regime_cells([2**-4, 2**-6], [2**-1, 2**-2, 2**-3, 2**-4, 2**-5])
    assert cells == [(2**-4, 2**-2), (2**-4, 2**-3), (2**-4, 2**-4), (2**-6, 2**-3), (2**-6, 2**-4), (2**-6, 2**-5)]


def test_fit_needs_levels():
    with pytest.raises(InsufficientLevels):
        k_estimate_and_fit(paraboloid(2), 2.0, [2**-6], [2**-3, 2**-4, 2**-5, 2**-6])


def test_small_fit_n2():
    mus = [2.0**-k for k in (4, 5, 6, 7)]
    nus = [2.0**-k for k in (2, 3, 4, 5, 6, 7)]
    fit = k_estimate_and_fit(paraboloid(2), 2.0, mus, nus, candidates=1)
    assert abs(fit.e_mu - 0.5) <= 0.1 and abs(fit.e_nu - 0.5) <= 0.1
    assert fit.r2 > 0.95


# --- axis bound ---------------------------------------------------------------------------


def test_axis_bound_zero_and_witness():
    a = Field(AXIS_GRID, np.zeros(AXIS_GRID.n))
    b, _ = axis_pair(0)
    assert axis_bound(a, b, 0.25, 2.0)[0] == 0.0
    for mu in (2**-2, 2**-4, 2**-6):
        for key, pp in (("p200", 2.0), ("p150", 1.5)):
            lhs, rhs = axis_bound(*axis_witness(mu), mu, pp, constants.get(f"axis_C_{key}"))
            assert 0.2 <= lhs / rhs <= 1


@pytest.mark.parametrize("seed", range(10))
def test_axis_bound_random_pairs(seed):
    a, b = axis_pair(seed)
    for mu in (2**-2, 2**-4, 2**-6):
        lhs, rhs = axis_bound(a, b, mu, 2.0, constants.get("axis_C_p200"))
        assert lhs <= rhs


# --- rescaling ------------------------------------------------------------------------


def test_rescale_identity_at_unit_rho():
    f = make_neighborhood(paraboloid(2), [0.2], 0.2, 2**-5, profile="smooth")
    out = parabolic_rescale(f, 1.0, 1.5)
    assert out.field is f and out.norm_factor == 1.0


@pytest.mark.parametrize("rho,mu,cap,box_factor", [(0.5, 2**-5, 0.25, 4), (0.25, 2**-6, 0.125, 4), (0.5, 2**-6, 0.25, 2)])
def test_rescale_norm_identity(rho, mu, cap, box_factor):
    s = paraboloid(2)
    grid = default_grid(2, mu, 256, box_factor)
    f = make_neighborhood(s, [0.25], cap, mu, profile="smooth", grid=grid)
    g = make_neighborhood(s, [-0.25], cap, mu, profile="smooth", grid=grid)
    for pp in (2.0, 1.5):
        F, G = parabolic_rescale(f, rho, pp), parabolic_rescale(g, rho, pp)
        ratio = product_norm(f, g, pp) / (F.norm_factor * product_norm(F.field, G.field, pp))
        assert ratio == pytest.approx(1.0, rel=2e-2)
        assert 0.5 <= spectral_width(F.field) / (mu / rho**2) <= 2


# --- Radon transform and the L^2 bilinear bound -----------------------------------------------


def gaussian(m, width=0.15, h=1 / 64):
    return density_on_ball(np.zeros(m), 0.9, h,
                           lambda p: np.exp(-np.sum(p**2, axis=1) / (2 * width**2)))


def test_radon_of_disc_through_centre():
    disc = density_on_ball([0.0, 0.0], 0.3, 1 / 64)
    assert radon_hyperplane(disc, [0, 0], [1, 0]).real == pytest.approx(0.6, rel=2e-2)


@given(st.floats(0, math.pi), st.floats(-0.2, 0.2))
def test_radon_of_radial_gaussian_ignores_direction(theta, s):
    g = gaussian(2)
    th = np.array([math.cos(theta), math.sin(theta)])
    expect = 0.15 * math.sqrt(2 * math.pi) * math.exp(-s * s / (2 * 0.15**2))
    assert radon_hyperplane(g, s * th, th).real == pytest.approx(expect, rel=1e-2)


def test_radon_fubini():
    g = gaussian(2)
    th = np.array([math.cos(0.3), math.sin(0.3)])
    s = np.arange(-1, 1, 1 / 128)
    vals = radon_hyperplane(g, s[:, None] * th, np.tile(th, (len(s), 1)))
    assert vals.real.sum() / 128 == pytest.approx(g.l1(), rel=1e-2)
    g3 = density_on_ball([0.0, 0.0, 0.0], 0.5, 1 / 32, lambda p: np.exp(-np.sum(p**2, axis=1) / (2 * 0.12**2)))
    for v in ([1, 0, 0], [0, 0.6, 0.8]):
        assert radon_hyperplane(g3, [0, 0, 0], v).real == pytest.approx(2 * math.pi * 0.12**2, rel=1e-2)


def test_l2_bound_zero_and_separation():
    f, g = separated_pair(2, 0)
    zero = LatticeDensity(f.origin, f.spacing, np.zeros_like(f.values))
    assert l2_bilinear_sides(zero, g, paraboloid(2)) == (0.0, 0.0)
    near = density_on_ball([0.2], 0.1, f.spacing)
    other = density_on_ball([-0.1], 0.1, f.spacing)
    with pytest.raises(SeparationViolation):
        l2_bilinear_sides(near, other, paraboloid(2))


def test_l2_bound_point_mass():
    h = 1 / 128
    point = density_on_ball([-0.5], 0.0, h, lambda p: np.full(len(p), 3.0))
    assert np.count_nonzero(point.values) == 1
    mass = point.l1()
    g = density_on_ball([0.4], 0.3, h, lambda p: np.cos(0.5 * np.pi * np.abs(p[:, 0] - 0.4) / 0.3) ** 2)
    lhs, rhs = l2_bilinear_sides(point, g, paraboloid(2))
    # |E point| = mass, so lhs is mass^2 ||Eg||^2 on B_R
    eg = trace_ratio(g, paraboloid(2), 6.0) ** 2 * 6.0 * g.l2() ** 2
    assert lhs == pytest.approx(mass**2 * eg, rel=1e-3)
    # on a line the Radon transform is evaluation: the sup is the point value
    assert rhs == pytest.approx(mass * 3.0 * g.l1() * g.linf())


@pytest.mark.parametrize("n", [2, 3])
def test_l2_bound_holds_on_a_few_pairs(n):
    C = constants.get(f"radon_l2_C_n{n}")
    for seed in range(100, 103):
        f, g = separated_pair(n, seed)
        l2_bilinear_check(f, g, paraboloid(n), C)

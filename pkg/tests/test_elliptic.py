import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multisoliton.elliptic import (
    BallProfile, LinearDependenceError, NotSolvableError, SingularityError, SolverError,
    apply_deltaV, apply_Nsigma, boundary_gram, boundary_profile, deltaV_residual,
    design_radiation, from_poincare, greens_H3, homogeneous_pair, hyperbolic_conjugate,
    hyperbolic_helmholtz, invert_deltaV, invert_Nsigma, no_radiation_profile,
    radial_integral, radiating_branch, reconstruct_on_axis, tail_slope, to_poincare,
)
from multisoliton.groundstate import LW, V, W, dW

RHO = np.linspace(0.01, 0.99, 99)


def starting_datum(r):
    return W(r) ** 3 * LW(r) ** 2


def bump(r):
    return np.exp(-4 * (r - 2) ** 2) * r ** 2


# ---------------------------------------------------------------- Delta + V

def test_homogeneous_pairs_wronskian():
    r = np.array([0.3, 1.0, 4.0])
    for ell in range(4):
        p = homogeneous_pair(ell)
        w = r ** 2 * (p.phi(r) * p.dpsi(r) - p.dphi(r) * p.psi(r))
        assert_allclose(w, p.wronskian, rtol=1e-9)
        res = apply_deltaV(p.psi, ell, 1.0, r, 1e-4)
        assert np.max(np.abs(res / p.psi(r))) < 1e-6


def test_starting_profile():
    u = invert_deltaV(starting_datum, 0)
    assert deltaV_residual(u, starting_datum) <= 1e-8
    assert abs(tail_slope(u) + 1) < 0.02
    # the datum is orthogonal to the scaling mode
    val = radial_integral(lambda s: starting_datum(s) * LW(s) * s ** 2)
    assert abs(val) < 1e-14
    # returned solution is V-orthogonal to the kernel
    pair = homogeneous_pair(0)
    assert abs(radial_integral(lambda s: u(s) * V(s) * pair.phi(s) * s ** 2)) < 1e-12


@pytest.mark.parametrize("ell", [0, 1, 2, 3])
def test_roundtrip(ell):
    def f(r):
        return apply_deltaV(bump, ell, 1.0, r, 1e-3 * np.minimum(1, r))
    u = invert_deltaV(f, ell, tol=1e-6, project=False)
    r = np.linspace(0.1, 6, 60)
    diff = u(r) - bump(r)
    if ell < 2:
        k = homogeneous_pair(ell).phi(r)
        diff -= np.linalg.lstsq(k[:, None], diff, rcond=None)[0] * k
    assert np.max(np.abs(diff)) <= 1e-6


def test_kernel_obstruction():
    with pytest.raises(NotSolvableError) as err:
        invert_deltaV(lambda r: LW(r) * np.exp(-r * r), 0)
    assert err.value.inner_product != 0
    with pytest.raises(NotSolvableError):
        invert_deltaV(lambda r: dW(r) / (1 + r ** 4), 1)


def test_scale_covariance():
    u = invert_deltaV(starting_datum, 0)
    for lam in (0.5, 2.0):
        def f(r, lam=lam):
            return lam ** 2 * starting_datum(lam * r)
        ul = invert_deltaV(f, 0, lam)
        r = np.array([0.3, 1.0, 5.0])
        assert_allclose(ul(r / lam), u(r), rtol=1e-10)
        assert deltaV_residual(ul, f, 0, lam) <= 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_deltaV_linear(a, b):
    def g(r):
        return np.exp(-r) * r ** 2
    ell = 2
    ua = invert_deltaV(starting_datum, ell)
    ub = invert_deltaV(g, ell)
    uc = invert_deltaV(lambda r: a * starting_datum(r) + b * g(r), ell)
    r = np.array([0.2, 1.0, 7.0])
    assert_allclose(uc(r), a * ua(r) + b * ub(r), atol=1e-12 * (1 + abs(a) + abs(b)))


def test_higher_degree_decay():
    u = invert_deltaV(starting_datum, 3)
    assert deltaV_residual(u, starting_datum, 3) <= 1e-7
    # an r^-5 datum forces r^-3, slower than the homogeneous r^-4
    assert abs(tail_slope(u, 1e2, 1e3) + 3) < 0.02
    # at l = 2 the forcing is resonant and produces r^-3 log r
    u2 = invert_deltaV(starting_datum, 2)
    r = np.array([1e3, 1e4])
    ratio = u2(r) * r ** 3 / np.log(r)
    assert ratio[1] == pytest.approx(ratio[0], rel=0.03)


# ---------------------------------------------------------------- N_sigma

@pytest.mark.parametrize("sigma", [1, 2, 3, 5])
def test_no_radiation_profile(sigma):
    g = no_radiation_profile(sigma)
    assert_allclose(apply_Nsigma(g, sigma)(RHO), -1 / (2 * RHO), rtol=1e-10)
    u = invert_Nsigma(lambda r: -1 / (2 * r), sigma)
    assert np.max(np.abs(u(RHO) - g(RHO))) <= 1e-8
    assert u(0.0) == pytest.approx(1 / (2 * (1 + sigma)), abs=1e-10)
    # interpolated closed form and spline derivatives agree with the formula
    gi = BallProfile.interpolate(0, g)
    assert_allclose(apply_Nsigma(gi, sigma)(RHO), -1 / (2 * RHO), rtol=1e-8)


def test_apply_trivial_cases():
    one = BallProfile.from_function(0, np.ones_like)
    assert_allclose(apply_Nsigma(one, 2)(RHO), -12.0)
    zero = BallProfile.from_function(3, np.zeros_like)
    assert np.all(apply_Nsigma(zero, 1.5)(RHO) == 0)
    assert np.all(invert_Nsigma(None, 2)(RHO) == 0)


def test_gradient_datum():
    u = invert_Nsigma(lambda r: -1 / r ** 2, 2, ell=1)
    assert abs(u(0.0)) > 0.1
    res = apply_Nsigma(u, 2)(RHO) + 1 / RHO ** 2
    assert np.max(np.abs(res * RHO ** 2)) < 1e-9


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.5])
@pytest.mark.parametrize("ell", [0, 1, 4])
def test_radiating_branch(sigma, ell):
    r = radiating_branch(ell, sigma)
    res = apply_Nsigma(r, sigma)(RHO)
    assert np.max(np.abs(res)) <= 1e-10 * np.max(np.abs(r(RHO)))
    gap = np.array([1e-6, 1e-8])
    lead = gap ** sigma * r(1 - gap)
    # remove the (1-rho)^sigma correction from the regular branch
    w = gap ** sigma
    limit = (lead[1] * w[0] - lead[0] * w[1]) / (w[0] - w[1])
    assert limit == pytest.approx(1.0, abs=1e-5)
    if ell == 0:
        exact = ((1 - RHO) ** -sigma - (1 + RHO) ** -sigma) / RHO
        assert_allclose(r(RHO), exact, rtol=1e-10)


def test_no_radiation_branch_bounded_and_stable():
    f = lambda r: np.cos(3 * r) / (1 + r)  # noqa: E731
    u1 = invert_Nsigma(f, 2, degree=40)
    u2 = invert_Nsigma(f, 2, degree=60)
    assert np.isfinite(u1.boundary_sup())
    assert u1.boundary_sup() == pytest.approx(u2.boundary_sup(), rel=1e-9)


def test_invert_with_boundary_datum():
    f = lambda r: r ** 2  # noqa: E731
    u = invert_Nsigma(f, 1.5, F=0.7, ell=2)
    assert_allclose(apply_Nsigma(u, 1.5)(RHO) * RHO ** 2, RHO ** 4, atol=1e-8)
    x = 1 - 1e-9
    assert (1 - x) ** 1.5 * u(x) == pytest.approx(0.7, abs=1e-4)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_nsigma_linear(a, b):
    f1 = lambda r: -1 / (2 * r)  # noqa: E731
    f2 = lambda r: np.sin(r)  # noqa: E731
    u1, u2 = invert_Nsigma(f1, 3), invert_Nsigma(f2, 3)
    u = invert_Nsigma(lambda r: a * f1(r) + b * f2(r), 3)
    assert_allclose(u(RHO), a * u1(RHO) + b * u2(RHO), atol=1e-10)


def test_nsigma_errors():
    with pytest.raises(ValueError):
        invert_Nsigma(lambda r: r, 0.0)
    with pytest.raises(SolverError):
        invert_Nsigma(lambda r: (1 - r) ** -1.5, 1.0)


# ------------------------------------------------------- hyperbolic picture

def test_poincare_map_endpoints():
    assert to_poincare(0.0) == 0.0 and from_poincare(0.0) == 0.0
    assert to_poincare(1.0) == 1.0 and from_poincare(1.0) == 1.0
    x = np.linspace(0, 0.999, 50)
    assert_allclose(from_poincare(to_poincare(x)), x, atol=1e-15)


def test_conjugation_roundtrip():
    u = no_radiation_profile(2)
    g = hyperbolic_conjugate(u, 2, "to_hyperbolic")
    back = hyperbolic_conjugate(g, 2, "from_hyperbolic")
    assert np.max(np.abs(back(RHO) - u(RHO))) <= 1e-10


@pytest.mark.parametrize("ell", [0, 2])
def test_conjugation_identity(ell):
    sigma = 1.5
    g = BallProfile.from_function(
        ell, lambda t: np.exp(t) * t ** ell,
        [lambda t: np.exp(t) * (t ** ell + ell * t ** (ell - 1)),
         lambda t: np.exp(t) * (t ** ell + 2 * ell * t ** (ell - 1) + ell * (ell - 1) * t ** (ell - 2))],
        variable="rho_tilde")
    u = hyperbolic_conjugate(g, sigma, "from_hyperbolic")
    rt = np.linspace(0.1, 0.95, 18)
    rho = from_poincare(rt)
    lhs = apply_Nsigma(u, sigma)(rho) / u(rho) * g(rt)
    rhs = hyperbolic_helmholtz(g, sigma, rt) / (4 * (1 - rho ** 2))
    assert_allclose(lhs, rhs, rtol=1e-9)


def test_green_radial_pulls_back_to_kernel():
    sigma = 2.0
    g = BallProfile.from_function(
        0, lambda t: greens_H3(np.stack([0 * t, 0 * t, t], -1), [0, 0, 0], sigma),
        variable="rho_tilde")
    u = hyperbolic_conjugate(g, sigma, "from_hyperbolic")
    rho = from_poincare(np.linspace(0.05, 0.95, 19))
    assert np.max(np.abs(apply_Nsigma(u, sigma)(rho)) / np.abs(u(rho))) <= 1e-6


def _hyperbolic_laplacian_3d(fun, p, h=1e-3):
    lap, grad = 0.0, np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        v = [fun(p + j * e) for j in (-2, -1, 0, 1, 2)]
        lap += (-v[0] + 16 * v[1] - 30 * v[2] + 16 * v[3] - v[4]) / (12 * h * h)
        grad[i] = (v[0] - 8 * v[1] + 8 * v[3] - v[4]) / (12 * h)
    q = 1 - p @ p
    return q * q * lap + 2 * q * (p @ grad)


@pytest.mark.parametrize("sigma", [0.5, 2.0, 3.0])
def test_green_function(sigma):
    za = np.array([0.1, -0.2, 0.3])
    rng = np.random.default_rng(1)
    fun = lambda p: greens_H3(p, za, sigma)  # noqa: E731
    worst = 0.0
    for _ in range(40):
        p = rng.uniform(-0.55, 0.55, 3)
        if np.linalg.norm(p - za) < 0.2:
            continue
        res = _hyperbolic_laplacian_3d(fun, p) - 4 * (sigma ** 2 - 1) * fun(p)
        worst = max(worst, abs(res) / abs(fun(p)))
    assert worst <= 1e-6
    x = np.array([1e-3, 1e-4])
    g = greens_H3(np.stack([0 * x, 0 * x, 1 - x], -1), [0, 0, 0], sigma)
    assert abs(np.log(g[1] / g[0]) / np.log(x[1] / x[0]) - (1 + sigma)) <= 0.02
    q = rng.uniform(-0.5, 0.5, (10, 3))
    assert_allclose(greens_H3(q, za, sigma), greens_H3(za, q, sigma), rtol=1e-14)
    with pytest.raises(SingularityError):
        greens_H3(za, za, sigma)


def test_green_normalization_near_pole():
    # G ~ 1/(2 s) with s the hyperbolic distance of |dz|^2/(1-|z|^2)^2
    za = np.array([0, 0, 0.4])
    eps = 1e-6
    s = eps / (1 - 0.16)
    assert greens_H3(za + [eps, 0, 0], za, 2.0) * 2 * s == pytest.approx(1.0, abs=1e-5)


def test_boundary_profile_limit():
    sigma, s_a = 2.0, 0.3
    c = np.array([-0.5, 0.2, 0.9])
    x = 1e-6
    omega = np.stack([np.sqrt(1 - c ** 2), 0 * c, c], -1)
    g = greens_H3((1 - x) * omega, [0, 0, s_a], sigma) / x ** (1 + sigma)
    assert_allclose(g, boundary_profile(s_a, sigma, c), rtol=1e-4)


# -------------------------------------------------------- radiation design

def test_design_single_zero_target():
    d = design_radiation([[0, 0, 0.2]], [0.0])
    assert np.all(d.coef == 0)


@pytest.mark.parametrize("sigma", [0.0, 1.0, 2.0])
def test_design_two_points(sigma):
    pts = [[0, 0, -0.4], [0, 0, 0.3]]
    d = design_radiation(pts, [1.0, 0.0], sigma=sigma)
    assert_allclose(reconstruct_on_axis(d, [-0.4, 0.3]), [1.0, 0.0], atol=1e-6)
    dg = design_radiation(pts, [1.0, 0.0], [0.5, -1.0], sigma=sigma)
    assert_allclose(reconstruct_on_axis(dg, [-0.4, 0.3]), [1.0, 0.0], atol=1e-6)
    assert_allclose(reconstruct_on_axis(dg, [-0.4, 0.3], derivative=True), [0.5, -1.0], atol=1e-6)
    assert np.isfinite(d.condition)


def test_gram_independence():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pts = [[0, 0, s] for s in rng.uniform(-0.8, 0.8, 3)]
        gram = boundary_gram(pts, 1.0)
        assert np.min(np.linalg.eigvalsh(gram)) > 0
    with pytest.raises(ValueError):
        design_radiation([[0, 0, 0.1], [0, 0, 0.1]], [1, 1])
    with pytest.raises(LinearDependenceError):
        design_radiation([[0, 0, s] for s in np.linspace(-0.5, 0.5, 12)], np.ones(12))


def test_ball_profile_export(tmp_path):
    g = no_radiation_profile(2)
    csv, side = g.export(tmp_path / "g")
    data = np.loadtxt(csv, delimiter=",", skiprows=1)
    assert_allclose(data[:, 1], g(data[:, 0]))
    assert '"sigma": 2' in side.read_text()


def test_punctures_metadata():
    p = BallProfile.from_function(0, lambda x: np.abs(x - 0.5) ** -1.0, punctures=[(0.5, -1.0)])
    assert p.punctures_consistent()
    q = BallProfile.from_function(0, lambda x: np.abs(x - 0.5) ** -2.0, punctures=[(0.5, -1.0)])
    assert not q.punctures_consistent()

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multisoliton.groundstate import LW, SQRT3, V, W, dW
from multisoliton.quadrature import (
    FluxSlice, InvalidSliceError, Y_scale_identity, box_grid, box_side_flux, com_closed_form,
    cubic_closed_form, energy_density_direct, flux_com, flux_energy, flux_momentum,
    global_cubic_orthogonality, kernel_constants, localized_com_integral,
    localized_cubic_integral, smoothstep_cutoff, supercritical_cancellation,
)

POHOZAEV = 3 * SQRT3 * np.pi ** 2 / 4


@pytest.mark.parametrize("R", [0.1, 1.0, 10.0, 100.0])
def test_localized_pairs_agree(R):
    for fn in (localized_cubic_integral, localized_com_integral):
        num, closed = fn(R)
        assert num == pytest.approx(closed, rel=1e-9)


def test_localized_at_one_exact():
    assert localized_cubic_integral(1.0)[0] == pytest.approx(0.00966796875, rel=1e-10)
    assert localized_com_integral(1.0)[0] == pytest.approx(0.00087890625, rel=1e-10)


def test_localized_global_limit():
    num, closed = localized_cubic_integral(1e3)
    assert abs(num) <= 1e-8 and abs(closed) <= 1e-8
    val, mag = global_cubic_orthogonality()
    assert abs(val) <= 1e-8 * mag


def test_localized_tail_and_small_r_slopes():
    R = np.geomspace(10, 1e4, 20)
    s3 = np.polyfit(np.log(R), np.log(np.abs(cubic_closed_form(R))), 1)[0]
    s5 = np.polyfit(np.log(R), np.log(np.abs(com_closed_form(R))), 1)[0]
    assert abs(s3 + 3) < 0.05 and abs(s5 + 5) < 0.05
    small = np.geomspace(1e-4, 1e-2, 10)
    nums = [localized_com_integral(r)[0] for r in small]
    assert abs(np.polyfit(np.log(small), np.log(nums), 1)[0] - 5) < 0.05


def test_localized_rejects_nonpositive():
    with pytest.raises(ValueError):
        localized_cubic_integral(0.0)


def test_kernel_constants():
    k = kernel_constants()
    assert k.c_grad > 0
    assert abs(k.c_scale) > 10 * k.c_scale_error
    assert k.c_grad == pytest.approx(k.closed_forms["c_grad"], rel=1e-10)
    assert k.c_scale == pytest.approx(k.closed_forms["c_scale"], rel=1e-10)
    assert k.off_diagonal <= 1e-10
    assert abs(k.orthogonality) <= 1e-8


def test_cutoff_is_c2():
    r0 = 1.0
    for edge in (r0, 2 * r0):
        for k in (0, 1, 2):
            lo = smoothstep_cutoff(edge - 1e-9, r0, k)
            hi = smoothstep_cutoff(edge + 1e-9, r0, k)
            assert abs(lo - hi) < 1e-6
    x = np.linspace(1.05, 1.95, 7)
    h = 1e-5
    fd = (smoothstep_cutoff(x + h) - smoothstep_cutoff(x - h)) / (2 * h)
    assert_allclose(fd, smoothstep_cutoff(x, 1.0, 1), atol=1e-8)


def test_Y_identity_sign_resolved():
    rep = Y_scale_identity()
    assert rep.finite_difference <= 1e-6
    assert rep.reduced <= 1e-6
    # the opposite sign combination is far from zero
    assert rep.reduced_printed > 1.0
    assert rep.scaling_mode <= 1e-8


def test_supercritical_cancellation():
    rep = supercritical_cancellation({7: 1.0, 9: -1.0})
    assert rep.relative <= 1e-8
    assert rep.scale > 0.1


# ------------------------------------------------------------------- fluxes

K = np.array([1.0, 0.5, -0.3])
KN = np.linalg.norm(K)
L = 1.5


def plane_wave(t, x):
    ph = x @ K - KN * t
    return np.cos(ph), KN * np.sin(ph), -np.sin(ph)[:, None] * K[None, :]


def h_lo(x):
    return 0.4 * np.sqrt(1 + (x ** 2).sum(-1))


def gh_lo(x):
    return 0.4 * x / np.sqrt(1 + (x ** 2).sum(-1))[:, None]


def h_hi(x):
    return 0.2 * np.cos(x[:, 0] + x[:, 1])


def gh_hi(x):
    s = -0.2 * np.sin(x[:, 0] + x[:, 1])
    return np.stack([s, s, 0 * s], -1)


@pytest.fixture(scope="module")
def box():
    X, Wt = box_grid(L, 16, 2)
    lo = FluxSlice.from_field(plane_wave, X, Wt, h_lo, gh_lo, 0.0, 0.0)
    hi = FluxSlice.from_field(plane_wave, X, Wt, h_hi, gh_hi, 0.0, 2.0)
    return lo, hi


def test_energy_closed_box_balance(box):
    lo, hi = box
    side = box_side_flux(plane_wave, L, h_lo, 0.0, h_hi, 2.0, "energy", n=16)
    assert abs(flux_energy(hi) - flux_energy(lo) + side) <= 1e-8 * flux_energy(hi)


def test_conserved_momentum_and_com_balance(box):
    lo, hi = box
    for cur, fn in (("momentum", flux_momentum), ("com", flux_com)):
        side = box_side_flux(plane_wave, L, h_lo, 0.0, h_hi, 2.0, cur, n=16)
        bal = fn(hi, form="conserved") - fn(lo, form="conserved") + side
        assert np.max(np.abs(bal)) <= 1e-8 * np.max(np.abs(fn(hi, form="conserved")))


def test_printed_momentum_not_conserved_on_curved_slices(box):
    lo, hi = box
    side = box_side_flux(plane_wave, L, h_lo, 0.0, h_hi, 2.0, "momentum", n=16)
    bal = flux_momentum(hi) - flux_momentum(lo) + side
    assert np.max(np.abs(bal)) > 1e-3


def test_flat_slice_reductions():
    X, Wt = box_grid(L, 12, 1)
    zero = lambda x: np.zeros(len(x))
    zg = lambda x: np.zeros((len(x), 3))
    s = FluxSlice.from_field(plane_wave, X, Wt, zero, zg, 0.3, 0.7)
    assert flux_energy(s) == pytest.approx(energy_density_direct(s), rel=1e-10)
    _, dt, grad = plane_wave(np.full(len(X), 0.7), X)
    phi = plane_wave(np.full(len(X), 0.7), X)[0]
    direct = 0.5 * np.dot(Wt, dt ** 2 + (grad ** 2).sum(1) - 0.3 * phi ** 2)
    assert flux_energy(s) == pytest.approx(direct, rel=1e-10)
    mom = -(dt[:, None] * grad).T @ Wt
    assert_allclose(flux_momentum(s), mom, rtol=1e-10)
    assert_allclose(flux_momentum(s, form="conserved"), mom, rtol=1e-10)


def _ball_grid(nr=120, nang=24):
    u, wu = np.polynomial.legendre.leggauss(nr)
    edges = np.linspace(0, 1, 5)
    uu = np.concatenate([0.5 * (b - a) * u + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    ww = np.concatenate([0.5 * (b - a) * wu for a, b in zip(edges[:-1], edges[1:])])
    r = uu / (1 - uu)
    wr = ww / (1 - uu) ** 2 * r ** 2
    c, wc = np.polynomial.legendre.leggauss(nang)
    ph = 2 * np.pi * np.arange(2 * nang) / (2 * nang)
    R, C, P = np.meshgrid(r, c, ph, indexing="ij")
    S = np.sqrt(1 - C ** 2)
    pts = np.stack([R * S * np.cos(P), R * S * np.sin(P), R * C], -1).reshape(-1, 3)
    wts = np.einsum("i,j,k->ijk", wr, wc, np.full(2 * nang, np.pi / nang)).ravel()
    return pts, wts


def test_static_soliton_energy():
    pts, wts = _ball_grid()
    r = np.linalg.norm(pts, axis=1)
    grad = (dW(r) / r)[:, None] * pts
    s = FluxSlice(pts, wts, 0.0, np.zeros_like(pts), V(r), W(r), 0.0, grad)
    # int |grad W|^2 = int W^6 and int V W^2 = 5 int W^6
    assert flux_energy(s) == pytest.approx(-2 * POHOZAEV, rel=1e-10)


def test_invalid_slice():
    X = np.zeros((2, 3))
    with pytest.raises(InvalidSliceError):
        FluxSlice(X, [1, 1], 0.0, [[1.01, 0, 0], [0, 0, 0]], 0.0, 0.0, 0.0, np.zeros((2, 3)))
    FluxSlice(X, [1, 1], 0.0, [[1.0, 0, 0], [0, 0, 0]], 0.0, 0.0, 0.0, np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_flux_bilinearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    n = 40
    pts = rng.normal(size=(n, 3))
    gh = rng.uniform(-0.5, 0.5, size=(n, 3))
    base = dict(points=pts, weights=rng.uniform(0, 1, n), h=rng.normal(size=n), grad_h=gh,
                w=rng.normal(size=n))
    f = [rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 3))]
    g = [rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 3))]
    sf = FluxSlice(**base, phi=f[0], Tphi=f[1], Xphi=f[2], t0=0.4)
    sg = sf.with_field(*g)
    sc = sf.with_field(*(alpha * a + beta * b for a, b in zip(f, g)))
    for fn in (flux_energy, flux_momentum, flux_com):
        expect = (alpha ** 2 * np.asarray(fn(sf)) + 2 * alpha * beta * np.asarray(fn(sf, sg))
                  + beta ** 2 * np.asarray(fn(sg)))
        assert_allclose(fn(sc), expect, rtol=1e-10, atol=1e-10)
        assert_allclose(fn(sf, sg), fn(sg, sf), rtol=1e-12, atol=1e-12)

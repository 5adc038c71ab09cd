import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multisoliton.admissibility import (
    DegenerateEigenvectorError, NotAdmissibleError, balanced_check, collinear_det,
    collinear_det_printed,
    family_config, find_admissible_scales, g_lambda, interaction_matrix,
    order_one_matrix, quartic, quartic_roots, strong_admissible_scan, strong_matrix,
    tail_certificate,
)
from multisoliton.kinematics import SolitonConfig, boost_collinear, collinear_family


def unit_config(vel):
    n = len(vel)
    return SolitonConfig(vel, np.ones(n), np.ones(n))


def test_quartic_roots():
    y1, y2 = quartic_roots()
    assert abs(y1 - 0.062) < 1e-3
    assert abs(y2 - 2.77) < 1e-2
    assert abs(quartic(y1)) < 1e-10
    # refined further than the printed two digits
    assert y1 == pytest.approx(0.0620201129191264, abs=1e-12)


def test_two_soliton_matrix():
    v = 0.4
    c = unit_config([[-v, 0, 0], [v, 0, 0]])
    a = interaction_matrix(c).matrix
    w = 2 * v / (1 + v * v)
    assert_allclose(a, [[0, np.sqrt(1 - w * w) / w]] * 1 + [[np.sqrt(1 - w * w) / w, 0]])
    assert np.linalg.det(a) == pytest.approx(-a[0, 1] ** 2)
    with pytest.raises(NotAdmissibleError):
        find_admissible_scales(a)


def test_permutation_similarity():
    c = unit_config([[0, 0, 0], [0.3, 0.1, 0], [-0.5, 0, 0.2]])
    a = interaction_matrix(c).matrix
    p = [2, 0, 1]
    cp = unit_config(c.velocities[p])
    assert_allclose(interaction_matrix(cp).matrix, a[np.ix_(p, p)], rtol=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.02, 0.97), st.floats(0.02, 0.97))
def test_collinear_det_matches_assembly(x1, x2):
    if abs(x1 - x2) < 1e-3:
        return
    a = interaction_matrix(unit_config(collinear_family(x1, x2))).matrix
    assert collinear_det(x1, x2) == pytest.approx(np.linalg.det(a), rel=1e-9, abs=1e-12)
    ratio = collinear_det(x1, x2) / collinear_det_printed(x1, x2)
    assert ratio == pytest.approx(((1 + x1) * (1 + x2)) ** 2, rel=1e-12)


def test_collinear_det_vanishes_and_changes_sign_at_root():
    y1, _ = quartic_roots()
    x2 = 0.9
    assert abs(collinear_det(y1 * x2, x2)) <= 1e-10
    assert np.sign(collinear_det((y1 - 1e-3) * x2, x2)) != np.sign(collinear_det((y1 + 1e-3) * x2, x2))
    with pytest.raises(ValueError):
        collinear_det(0.5, 0.5)


@pytest.mark.parametrize("branch", [0, 1])
def test_admissible_scales(branch):
    y1, y2 = quartic_roots()
    ratio = (y1, 1 / y2)[branch]
    c = unit_config(collinear_family(0.9, ratio * 0.9))
    a = interaction_matrix(c).matrix
    mu = find_admissible_scales(a)
    assert mu[0] == 1.0
    assert np.all(np.abs(mu) > 1e-3)
    assert np.linalg.norm(a @ mu) <= 1e-8 * np.linalg.norm(a) * np.linalg.norm(mu)
    # null vector via a different factorization
    w, v = np.linalg.eigh(a)
    k = np.argmin(np.abs(w))
    assert_allclose(v[:, k] / v[0, k], mu, atol=1e-8)
    # invariance under common rescaling
    assert_allclose(find_admissible_scales(3.7 * a), mu, atol=1e-10)


def test_perturbed_not_admissible_and_zero_entry():
    y1, _ = quartic_roots()
    c = unit_config(collinear_family(0.9 * y1 + 0.01, 0.9))
    with pytest.raises(NotAdmissibleError):
        find_admissible_scales(interaction_matrix(c))
    with pytest.raises(DegenerateEigenvectorError):
        find_admissible_scales(np.array([[0.0, 0, 0], [0, 1, 2], [0, 2, 1]]))


def test_boost_invariance():
    c = family_config()
    for v in (0.3, -0.55):
        cb = SolitonConfig(boost_collinear(c.velocities, v), c.scales, c.signs)
        assert_allclose(interaction_matrix(cb).matrix, interaction_matrix(c).matrix, atol=1e-10)


def test_balanced_residuals():
    c = family_config()
    ok, res = balanced_check(c)
    assert not ok
    # mirror symmetry x -> -x maps soliton a to 3-a and flips mu
    assert_allclose(res[0, 0], res[3, 0], rtol=1e-12)
    assert_allclose(res[1, 0], res[2, 0], rtol=1e-12)
    assert_allclose(res[:, 1:], 0)
    ok, res = balanced_check(c, np.zeros(4))
    assert ok and np.all(res == 0)


def test_strong_matrix_offdiagonal_closed_form():
    c = family_config()
    mu = c.mu
    for i in (2, 5, 9):
        m = strong_matrix(c, mu, i).matrix
        d = strong_matrix(c, mu, i, "definition").matrix
        for a in range(4):
            for b in range(4):
                if a == b:
                    assert m[a, a] == pytest.approx(-mu[a] * i / 2)
                    assert d[a, a] == pytest.approx(i * (i + 1) * mu[a] * g_lambda(0, i))
                    continue
                r = abs((c.velocities[a, 0] - c.velocities[b, 0])
                        / (1 - c.velocities[a, 0] * c.velocities[b, 0]))
                expect = -0.5 * (1 + r) ** (-i) * mu[b] / (r * (1 - r * r) ** (-i / 2))
                assert m[a, b] == pytest.approx(expect, rel=1e-14)
                assert d[a, b] == pytest.approx(expect, rel=1e-12)


def test_strong_admissibility_family():
    c = family_config(0.9)
    scan = strong_admissible_scan(c, i_max=10)
    assert all(abs(d["det"]) > 0.9 for d in scan["dets"])
    cert = scan["tail"]
    assert cert.certified
    assert cert.max_inv_gamma < 0.81 and cert.max_inv_speed < 2
    assert cert.printed_bound_at_start < 1


def test_det_tends_to_one():
    c = family_config()
    dets = [strong_matrix(c, None, i).det for i in range(11, 30)]
    gaps = np.abs(1 - np.array(dets))
    assert gaps[-1] < 1e-6
    assert np.all(np.diff(gaps) <= 0.1 * gaps[:-1])


def test_scan_errors():
    with pytest.raises(ValueError):
        strong_admissible_scan(family_config(), i_max=1)
    y1, _ = quartic_roots()
    other = family_config(0.9, y1)
    assert not tail_certificate(other, 11).certified


def test_order_one_matrix_nonsingular():
    assert abs(np.linalg.det(order_one_matrix(family_config()))) > 1e-4

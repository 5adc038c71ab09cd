import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multisoliton.kinematics import (
    InvalidVelocityError, OutOfDomainError, SolitonConfig, boost_collinear, delta4,
    gamma, local_coords, relative_speed,
)


def ball_vec(max_norm=0.95):
    return st.tuples(*(st.floats(-1, 1) for _ in range(3))).map(np.array).filter(
        lambda v: np.linalg.norm(v) < max_norm)


def test_gamma_values():
    assert gamma(0) == 1.0
    assert gamma([0.6, 0, 0]) == pytest.approx(1.25, abs=1e-15)
    g32 = 1 / np.sqrt(np.float32(1) - np.float32(0.81))
    assert gamma([0.9, 0, 0]) == pytest.approx(2.294157338705618, abs=1e-14)
    assert gamma([0.9, 0, 0]) == pytest.approx(float(g32), rel=1e-6)
    with pytest.raises(InvalidVelocityError):
        gamma([1.0, 0, 0])


def test_relative_speed_examples():
    za = np.array([0.3, -0.2, 0.5])
    assert_allclose(relative_speed(za, 0), za)
    assert_allclose(relative_speed([0.5, 0, 0], [-0.5, 0, 0]), [0.8, 0, 0])


def minkowski_rel(za, zb):
    """Velocity of a in b's frame by explicitly boosting the 4-velocity of a."""
    gb = gamma(zb)
    nb = np.linalg.norm(zb)
    ua = gamma(za) * np.array([1.0, *za])
    if nb == 0:
        return za
    n = zb / nb
    t = gb * (ua[0] - zb @ ua[1:])
    x = ua[1:] + (gb - 1) * (ua[1:] @ n) * n - gb * zb * ua[0]
    return x / t


@settings(max_examples=200, deadline=None)
@given(ball_vec(0.9), ball_vec(0.9))
def test_relative_speed_against_boost(za, zb):
    zab = relative_speed(za, zb)
    assert_allclose(zab, minkowski_rel(za, zb), atol=1e-9)
    assert np.linalg.norm(zab) < 1
    assert np.linalg.norm(zab) == pytest.approx(np.linalg.norm(relative_speed(zb, za)), rel=1e-9)
    assert gamma(zab) == pytest.approx(gamma(za) * gamma(zb) * (1 - za @ zb), rel=1e-9)
    assert_allclose(relative_speed(za, za), 0, atol=1e-12)


def cfg(vels):
    n = len(vels)
    return SolitonConfig(vels, np.ones(n), np.ones(n))


def test_local_coords_identity_and_worldline():
    c = cfg([[0, 0, 0], [0.5, 0, 0]])
    f = local_coords([1, 2, 3], 10.0, 0, c)
    assert_allclose(f.y, [1, 2, 3])
    assert f.t == 10.0
    f = local_coords([5.0, 0, 0], 10.0, 1, c)
    assert_allclose(f.y, 0, atol=1e-14)
    assert f.t == pytest.approx(10.0 / gamma([0.5, 0, 0]))
    with pytest.raises(OutOfDomainError):
        local_coords([0, 0, 0], 0.5, 0, c)


def test_log_correction_shift():
    c = SolitonConfig([[0, 0, 0], [0.5, 0, 0]], [1, 1], [1, 1],
                      log_corrections=[[0.1, 0, 0], [0, 0, 0]])
    f = local_coords([1, 0, 0], 100.0, 0, c)
    assert_allclose(f.y_tilde, [1 - 0.1 * np.log(100.0), 0, 0])


@settings(max_examples=100, deadline=None)
@given(ball_vec(0.8), ball_vec(0.8), ball_vec(0.1))
def test_frame_relation(za, zb, x):
    if np.allclose(za, zb, atol=1e-6):
        return
    c = cfg([za, zb])
    t = 50.0
    fa, fb = local_coords(10 * x, t, 0, c), local_coords(10 * x, t, 1, c)
    zab = relative_speed(za, zb)
    gab = gamma(zab)
    assert fa.t == pytest.approx(gab * (fb.t - zab @ fb.y), rel=1e-10)
    assert fa.y @ fa.y - fa.t ** 2 == pytest.approx(fb.y @ fb.y - fb.t ** 2, rel=1e-9)


def test_frame_relation_collinear_space():
    c = cfg([[-0.3, 0, 0], [0.6, 0, 0]])
    x, t = np.array([2.0, 1.0, -1.0]), 40.0
    fa, fb = local_coords(x, t, 0, c), local_coords(x, t, 1, c)
    zab = relative_speed(c.velocities[0], c.velocities[1])
    g = gamma(zab)
    expected = fb.y.copy()
    expected[0] = g * (fb.y[0] - zab[0] * fb.t)
    assert_allclose(fa.y, expected, atol=1e-12)


def test_delta4():
    c = cfg([[0, 0, 0], [0.5, 0, 0]])
    assert delta4(c, 1.0) == pytest.approx(2.5e-4)
    assert delta4(c) == pytest.approx(2.5e-4)
    c2 = cfg([[0, 0, 0], [0.25, 0, 0]])
    # gap halves; slack 1-0.25 vs 1-0.5 also changes, so compare with formula
    assert delta4(c2) == pytest.approx(0.25 * 0.75 / 1000)
    c3 = cfg([[0, 0, 0], [0.5, 0, 0], [0.5, 0.01, 0]])
    assert delta4(c3) == pytest.approx(0.01 * (1 - np.hypot(0.5, 0.01)) / 1000)
    with pytest.raises(ValueError):
        delta4(cfg([[0, 0, 0]]))


def test_config_roundtrip(tmp_path):
    c = SolitonConfig([[0, 0, 0], [0.5, 0, 0]], [1, 2], [1, -1],
                      higher_corrections={1: {(1, 0): [0.1, 0, 0]}})
    p = tmp_path / "c.json"
    c.save(p)
    d = json.loads(p.read_text())
    assert set(d) == {"velocities", "scales", "signs", "log_corrections", "centers",
                      "higher_corrections"}
    c2 = SolitonConfig.load(p)
    assert c2.to_dict() == c.to_dict()
    assert c.normalized()


def test_config_rejects_bad_input():
    with pytest.raises(InvalidVelocityError):
        cfg([[0.2, 0, 0], [0.2, 0, 0]])
    with pytest.raises(InvalidVelocityError):
        cfg([[1.2, 0, 0]])
    with pytest.raises(ValueError):
        SolitonConfig([[0, 0, 0]], [-1], [1])


def test_boost_preserves_relative_speeds():
    v = np.array([[-0.2, 0, 0], [0.1, 0, 0], [0.7, 0, 0]])
    w = boost_collinear(v, 0.4)
    for a in range(3):
        for b in range(3):
            assert_allclose(np.linalg.norm(relative_speed(v[a], v[b])),
                            np.linalg.norm(relative_speed(w[a], w[b])), atol=1e-14)

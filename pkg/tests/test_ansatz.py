import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from multisoliton.admissibility import NotAdmissibleError, family_config
from multisoliton.ansatz import (
    Ansatz, AnsatzTerm, LogPowerSeries, SchedulerStallError, SolitonTrack,
    build, build_supercritical, build_with_radiation, decay_report, f_start, face_rays,
    fit_decay, interaction_coefficients, newtonian_path, order_two_data, starting_step,
)
from multisoliton.groundstate import W
from multisoliton.kinematics import SolitonConfig

ORIGIN = np.zeros(3)


def bare(config):
    """Unmodulated boosted solitons of a configuration."""
    tracks = [SolitonTrack(config.velocities[a], config.scales[a], config.signs[a])
              for a in range(config.n)]
    return Ansatz(config, tracks)


def pair_config(v=0.5):
    return SolitonConfig([[0, 0, 0], [v, 0, 0]], [1.0, 1.0], [1.0, 1.0])


@pytest.fixture(scope="module")
def family():
    return family_config()


@pytest.fixture(scope="module")
def built(family):
    return build(family, 3)


# ------------------------------------------------------------- evaluation

def test_single_soliton_at_rest_fd_floor():
    cfg = SolitonConfig([ORIGIN], [1.0], [1.0])
    ans = bare(cfg)
    pts = [(np.array([0.3, 0.2, -0.4]), 200.0), (np.array([1.5, 0.0, 0.7]), 150.0),
           (np.array([0.0, 2.0, 0.0]), 300.0)]
    rep = ans.residual(pts, method="fd", h=1e-2)
    assert rep.valid.all()
    assert np.max(np.abs(rep.values)) <= 1e-6
    assert np.max(np.abs(ans.residual(pts).values)) <= 1e-14


def test_boosted_soliton_fd_floor():
    cfg = SolitonConfig([[0.5, 0, 0]], [1.0], [1.0])
    ans = bare(cfg)
    t = 200.0
    pts = [(np.array([0.5 * t + 0.3, 0.4, 0.0]), t), (np.array([0.5 * t - 1.0, 0.0, 0.8]), t)]
    coarse = ans.residual(pts, method="fd", h=2e-2)
    fine = ans.residual(pts, method="fd", h=1e-2)
    assert np.max(np.abs(fine.values)) <= 1e-6
    # fourth-order stencil: halving h shrinks the truncation error
    assert np.max(np.abs(fine.values)) < np.max(np.abs(coarse.values))


def test_modulated_soliton_matches_first_order_scaling():
    """W at lambda(t) = lambda0 exp(delta/lambda0) is W + delta dW/dlambda up to O(delta^2)."""
    y = np.array([[0.3, 0.1, 0.0], [1.2, 0.0, 0.5], [3.0, 1.0, 0.0]])
    r = np.linalg.norm(y, axis=-1)
    errs = []
    for c in (1e-2, 5e-3):
        tr = SolitonTrack(ORIGIN, 2.0, 1.0, delta=LogPowerSeries(((1, 0, c),)))
        ta = np.full(3, 10.0)
        lam = 2.0
        base = lam ** -0.5 * W(r / lam)
        h = 1e-6
        dlam = ((lam + h) ** -0.5 * W(r / (lam + h)) - (lam - h) ** -0.5 * W(r / (lam - h))) / (2 * h)
        errs.append(np.max(np.abs(tr.soliton(ta, y) - base - (c / 10) * dlam)))
    assert errs[1] < 0.3 * errs[0]


def test_cross_term_of_two_distant_solitons():
    cfg = pair_config()
    ans = bare(cfg)
    t = 1e3
    pts = [(np.array([0.3, 0.2, 0.0]), t), (np.array([0.0, 1.0, 0.5]), t),
           (np.array([-1.5, 0.0, 0.0]), t)]
    res = ans.residual(pts).values
    x = np.array([p[0] for p in pts])
    w0 = W(np.linalg.norm(x, axis=-1))
    tr1 = ans.tracks[1]
    w1 = tr1.soliton(*tr1.frame(np.full(3, t), x))
    assert_allclose(res, 5 * w0 ** 4 * w1, rtol=0.05)


# ---------------------------------------------------------------- f_start

def test_f_start_single_soliton_vanishes():
    state = f_start(SolitonConfig([ORIGIN], [1.0], [1.0]))
    assert state.diagnostics["leading_coefficient"] == [0.0]
    assert state.diagnostics["admissible"]


def test_f_start_two_solitons_matches_far_field():
    v = 0.6
    cfg = pair_config(v)
    state = f_start(cfg)
    t = 1e9
    # soliton 1 seen at the centre of soliton 0: rest-frame distance gamma v t
    far = t * W(v * t / np.sqrt(1 - v * v))
    assert_allclose(state.diagnostics["leading_coefficient"][0], far, rtol=1e-8)
    assert not state.diagnostics["admissible"]


def test_f_start_admissible_family(family):
    state = f_start(family)
    assert np.max(np.abs(state.diagnostics["leading_coefficient"])) <= 1e-8
    assert state.order["F0"] == (2, 0)


def test_non_admissible_config_refused():
    with pytest.raises(NotAdmissibleError):
        starting_step(pair_config())


# ----------------------------------------------------------- order two

def test_order_two_linear_systems_solved(family):
    data = order_two_data(family)
    assert data.solvability["log"] <= 1e-8
    assert data.solvability["const"] <= 1e-8


def test_starting_step_kernel_pairings(family):
    step = starting_step(family)
    for key, val in step.state.diagnostics["kernel_pairing"].items():
        assert val <= 1e-6, key
    assert step.state.order["F0"] == (3, 2)
    assert step.state.order["+"] == (5, 2)
    step.state.check()


def test_built_ansatz_decay(built):
    ans, state = built
    rep = decay_report(ans, state)
    for face, fits in rep["faces"].items():
        for fit in fits:
            assert fit["exponent"] >= 2.9, (face, fit)
    for fit in rep["interior"]:
        assert fit["exponent"] >= 4.9, fit


def test_rebuild_is_bitwise_identical(family, built):
    again, _ = build(family, 3)
    assert again.to_json() == built[0].to_json()


def test_serialization_roundtrip(built, tmp_path):
    ans, _ = built
    path = ans.save(tmp_path)
    doc = json.loads(path.read_text())
    assert doc["schema_version"]
    assert len(doc["terms"]) == len(ans.terms)
    names = {p.name for p in (tmp_path / "profiles").iterdir()}
    assert any(name.startswith("local_f0_2_0") for name in names)


# ------------------------------------------------------------ term records

@pytest.mark.parametrize("kind,j", [("modulation-∇", 1), ("modulation-Λ", 2),
                                    ("local-profile", 3), ("global-profile", 1)])
def test_order_two_log_limits(kind, j):
    with pytest.raises(ValueError):
        AnsatzTerm(0, 2, j, kind)


def test_term_kind_checked():
    with pytest.raises(ValueError):
        AnsatzTerm(0, 3, 0, "unknown")
    assert AnsatzTerm(0, 2, 1, "modulation-Λ", 0.5).to_dict()["coefficient"] == 0.5


# -------------------------------------------------------------- decay fits

def test_fit_pure_power():
    ts = np.geomspace(1e2, 1e5, 10)
    assert abs(fit_decay(ts, 3.0 * ts ** -4.0).exponent - 4.0) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.floats(1.5, 7.0), st.integers(0, 2), st.floats(0.1, 10.0))
def test_fit_recovers_log_power_law(p, k, c):
    ts = np.geomspace(1e2, 1e5, 12)
    vals = c * ts ** -p * np.log(ts) ** k
    # exact data: no cancellation floor, so the values are their own scale
    fit = fit_decay(ts, vals, scale=vals, log_power=k)
    assert abs(fit.exponent - p) <= 1e-5


def test_fit_marks_floor_unresolved():
    ts = np.geomspace(1e2, 1e5, 10)
    assert fit_decay(ts, np.full(10, 1e-15)).unresolved


# ---------------------------------------------------------- Newtonian path

def test_newtonian_free_motion():
    fit = newtonian_path(0.0, 1.0, 0.7, 1e6)
    assert abs(fit.c2) <= 1e-8


@pytest.mark.parametrize("c,v0", [(1.0, 1.0), (0.5, 2.0), (-0.3, 1.5)])
def test_newtonian_log_coefficient(c, v0):
    fit = newtonian_path(c, 1.0, v0, 1e6)
    assert fit.relative_error <= 0.02


def test_newtonian_bound_orbit_refused():
    from multisoliton.ansatz import RegimeError
    with pytest.raises(RegimeError):
        newtonian_path(-2.0, 1.0, 0.5, 1e3)


# ----------------------------------------------------------- radiative path

def test_radiation_cancels_leading_coefficient():
    cfg = SolitonConfig([[0, 0, 0], [0.5, 0, 0]], [1.0, 1.0], [1.0, 1.0])
    ans, state = build_with_radiation(cfg)
    before = np.abs(state.diagnostics["leading_coefficient"])
    assert np.all(before > 0.1)
    assert np.max(np.abs(state.diagnostics["residual_coefficient"])) <= 1e-8
    assert state.diagnostics["radiation_trace_norm"] > 0
    for tr in ans.tracks:
        assert not tr.delta and not tr.drift


def test_radiation_zero_targets_falls_back_to_modulation():
    with pytest.raises(NotAdmissibleError):
        build_with_radiation(pair_config(), targets=[0.0, 0.0])


# -------------------------------------------------------- supercritical path

def test_supercritical_leading_error_is_spherical():
    cfg = SolitonConfig([[0, 0, 0], [0.5, 0, 0], [-0.4, 0, 0]], [1.0] * 3, [1.0] * 3)
    ans, state = build_supercritical(cfg, {7: 1.0, 9: -1.0})
    for frac in state.diagnostics["higher_harmonic_fraction"].values():
        assert frac <= 1e-8
    assert all(not tr.delta for tr in ans.tracks)
    value, _ = interaction_coefficients(cfg, cfg.signs * state.diagnostics["far_field"])
    assert_allclose(state.diagnostics["leading_coefficient"], value)


# ------------------------------------------------------ higher-order passes

@pytest.fixture(scope="module")
def higher(family):
    """build(N_target=5) on the stock family; passes stop at the first unresolved order."""
    try:
        ans, state = build(family, 5)
        return ans, state, None
    except SchedulerStallError as err:
        return err.ansatz, err.state, err


def _log_square_coefficient(ans, a, offset):
    ts = np.geomspace(1e3, 1e6, 12)
    _, (rep,) = face_rays(ans, a, (offset,), ts)
    return np.polyfit(np.log(ts), rep.values * ts ** 3, 2)[0]


@pytest.mark.slow
def test_face_passes_remove_top_logs(built, higher):
    ans, state, _ = higher
    passes = {p["pass"]: p for p in state.diagnostics["passes"]}
    assert max(passes["improve_F(3,2)"]["reduction"]) < 0.1
    assert max(passes["improve_F(3,1)"]["reduction"]) < 0.1
    for a in (0, 1):
        off = (0.0, 3.0 * ans.tracks[a].scale, 0.0)
        before = _log_square_coefficient(built[0], a, off)
        after = _log_square_coefficient(ans, a, off)
        assert abs(after) < 0.05 * abs(before)


@pytest.mark.slow
def test_face_passes_are_incremental(built, higher):
    ans, state, _ = higher
    base = [t.to_dict() for t in built[0].terms]
    grown = [t.to_dict() for t in ans.terms]
    assert len(grown) > len(base)
    assert grown[:len(base)] == base
    history = state.history
    assert history.index("improve_F(3,2)") < history.index("improve_F(3,1)")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the t^-3 log^0 face coefficient is not resolved "
                                       "by the face extraction; the scheduler stalls there")
def test_build_reaches_order_five(higher):
    _, state, err = higher
    assert err is None
    assert min(state.order[f"F{a}"][0] for a in range(4)) >= 5

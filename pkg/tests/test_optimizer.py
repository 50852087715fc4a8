from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from augcontact import contact as ct
from augcontact import fixtures
from augcontact.optimizer import (SIGMA_CEIL, OptimizerError, Simulator, SolverOptions, ccd_step_bound, next_sigma,
                                  sigma_from_gradients, surface_min_distance)
from augcontact.scene import load_scene
from oracles import all_surface_pairs, scan_substep


def _sim(tmp_path, builder, options=None, **kw):
    return Simulator(load_scene(builder(tmp_path, **kw)), options)


# ---------------------------------------------------------------- penalty


def test_sigma_orthogonal_gives_floor():
    assert sigma_from_gradients([1, 0, 0], [0, 1, 0], 1e-7) == 1e-7


def test_sigma_unit_balance():
    g = np.array([0.6, 0.0, 0.8])
    assert sigma_from_gradients(-g, g, 1e-11) == pytest.approx(1.0)


def test_sigma_zero_barrier_gradient_is_nan():
    assert np.isnan(sigma_from_gradients(np.zeros(3), np.ones(3), 1e-11))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.floats(1e-3, 1e3))
def test_sigma_scale_invariant(v, c):
    gb, ge = np.array(v[:3]), np.array(v[3:])
    if gb @ gb < 1e-6:
        return
    a = sigma_from_gradients(gb, ge, 1e-11)
    b = sigma_from_gradients(c * gb, c * ge, 1e-11)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-11)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e6), st.integers(1, 200))
def test_sigma_schedule_non_decreasing(s0, n):
    s, seq = s0, [s0]
    for _ in range(n):
        s = next_sigma(s, s0)
        seq.append(s)
    assert all(b >= a for a, b in zip(seq, seq[1:]))
    assert seq[1] == pytest.approx(100 * s0)
    assert seq[-1] <= SIGMA_CEIL * s0


# ---------------------------------------------------------------- time stepping


def test_free_fall_is_exact(tmp_path):
    sim = _sim(tmp_path, fixtures.free_fall)
    s0 = sim.initial_state()
    s1, stats = sim.step(s0)
    h, g = sim.scene.h, sim.scene.gravity
    np.testing.assert_allclose(s1.x, s0.x + h * s0.v + h * h * g, rtol=0, atol=1e-10)
    np.testing.assert_allclose(s1.v, s0.v + h * g, atol=1e-8)
    # one full Newton step, after which the residual test passes
    assert stats.records[0].alpha == 1.0
    assert stats.records[1].ratio <= 1e-4 and stats.converged


def test_resting_tet_converges(tmp_path):
    sim = _sim(tmp_path, fixtures.falling_tet, frames=40)
    ratios = [stats.final_ratio for _, stats in sim.run()]
    assert max(ratios) <= 1e-4
    state = sim.initial_state()
    for state, _ in sim.run(40):
        pass
    # settled: resting within the barrier band above the floor
    assert 0 < surface_min_distance(sim, state.x) < sim.scene.dhat
    assert np.abs(state.v).max() < 0.05


def test_dropped_tet_never_penetrates(tmp_path):
    sim = _sim(tmp_path, fixtures.falling_tet, frames=100)
    m = sim.mesh
    pairs = all_surface_pairs(m.surface_tris, m.surface_edges, m.surface_vertices)
    seen = {"dmin": np.inf, "hits": 0, "steps": 0, "ccd": 0}

    def hook(a, b):
        d, hits = scan_substep(pairs, a, b, margin=sim.scene.dhat)
        seen["dmin"] = min(seen["dmin"], d)
        seen["hits"] += hits
        seen["steps"] += 1
        seen["ccd"] += ccd_step_bound(sim.topo, a, b - a, 0.0)[1]

    sim.iterate_hook = hook
    for _ in sim.run():
        pass
    assert seen["steps"] > 100
    assert seen["hits"] == 0 and seen["ccd"] == 0
    assert 0 < seen["dmin"] < sim.scene.dhat


def test_newton_cap_raises(tmp_path):
    sim = _sim(tmp_path, fixtures.falling_tet, SolverOptions(max_newton=1))
    with pytest.raises(OptimizerError) as err:
        sim.step(sim.initial_state())
    assert err.value.x is not None and np.all(np.isfinite(err.value.x))


def test_options_validate():
    with pytest.raises(ValueError):
        SolverOptions(friction_update="sometimes")
    with pytest.raises(ValueError):
        SolverOptions(precond="ilu")


def test_f32_mode_rounds_positions(tmp_path):
    sim = _sim(tmp_path, fixtures.free_fall, SolverOptions(fp32=True))
    s1, _ = sim.step(sim.initial_state())
    assert np.array_equal(s1.x, s1.x.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------- augmentation set


def _fake_pairs(ds):
    return [SimpleNamespace(key=("VF", i, 0), d=d) for i, d in enumerate(ds)]


def test_aug_set_rules(tmp_path):
    sim = _sim(tmp_path, fixtures.two_tet_squeeze)
    dhat = sim.scene.dhat
    aug = ct.AugLagState(sigma=1.0, sigma0=1.0)
    aug.mu[("VF", 9, 9)] = 0.5
    sim._update_aug_set(aug, _fake_pairs([0.5 * dhat, 0.02 * dhat]), None)
    assert aug.aug == [] and aug.mu == {("VF", 9, 9): 0.5}
    # near field: built from the pairs under the threshold
    sim._update_aug_set(aug, _fake_pairs([0.5 * dhat, 0.005 * dhat, 0.008 * dhat]), None)
    assert aug.aug == [("VF", 1, 0), ("VF", 2, 0)]
    assert aug.mu[("VF", 1, 0)] == 0.0
    assert aug.slack[("VF", 1, 0)] == pytest.approx(float(ct.slack_closed_form(0.0, 1.0, dhat, 0.005 * dhat)))
    # distance grew: set kept
    sim._update_aug_set(aug, _fake_pairs([0.5 * dhat, 0.009 * dhat, 0.006 * dhat, 0.007 * dhat]), None)
    assert aug.aug == [("VF", 1, 0), ("VF", 2, 0)]
    # distance shrank: rebuilt from the current near field
    sim._update_aug_set(aug, _fake_pairs([0.5 * dhat, 0.02 * dhat, 0.0005 * dhat, 0.006 * dhat]), None)
    assert aug.aug == [("VF", 2, 0), ("VF", 3, 0)]
    assert ("VF", 0, 0) not in aug.mu


def test_dual_update_only_touches_aug_set(tmp_path):
    sim = _sim(tmp_path, fixtures.two_tet_squeeze)
    state = sim.initial_state()
    for state, _ in sim.run(12):
        pass
    x = state.x.ravel()
    pairs = sim._pairs(x)
    assert pairs
    aug = ct.AugLagState(sigma=10.0, sigma0=10.0)
    aug.aug = [pairs[0].key]
    aug.mu = {pairs[0].key: 0.0}
    sim._dual_update(aug, x, pairs)
    assert set(aug.mu) == {pairs[0].key} and np.isfinite(aug.mu[pairs[0].key])
    assert aug.mu[pairs[0].key] >= 0.0


# ---------------------------------------------------------------- line search


def test_line_search_stops_before_crossing(tmp_path):
    sim = _sim(tmp_path, fixtures.falling_tet)
    x = sim.scene.x0.ravel().copy()
    lowest = sim.scene.x0[sim.free][:, 1].min()
    p = np.zeros_like(x).reshape(-1, 3)
    p[sim.free] = [0.0, -4 * lowest, 0.0]  # the lowest vertex reaches the floor at a quarter of the step
    p = p.ravel()
    y = x + p
    pairs = sim._pairs(x)
    aug = ct.AugLagState(sigma=sim.mscale, sigma0=sim.mscale)
    g, _ = sim._gradient_parts(x, y, pairs, aug, [], x)
    assert p @ g < 0
    alpha, xn, pn, truncated = sim._line_search(x, p, g, y, pairs, aug, [], x)
    assert truncated and 0 < alpha < 0.25
    m = sim.mesh
    dmin, hits = scan_substep(all_surface_pairs(m.surface_tris, m.surface_edges, m.surface_vertices), x, xn,
                              margin=1.0)
    assert hits == 0 and dmin > 0
    assert sim.lagrangian(xn, y, pn, aug, [], x) < sim.lagrangian(x, y, pairs, aug, [], x)


def test_line_search_full_step_without_contact(tmp_path):
    sim = _sim(tmp_path, fixtures.free_fall)
    s0 = sim.initial_state()
    x = s0.x.ravel()
    y = (s0.x + sim.scene.h * s0.v + sim.scene.h ** 2 * sim.scene.gravity).ravel()
    aug = ct.AugLagState()
    g, _ = sim._gradient_parts(x, y, [], aug, [], x)
    alpha, xn, _, truncated = sim._line_search(x, y - x, g, y, [], aug, [], x)
    assert alpha == 1.0 and not truncated


# ---------------------------------------------------------------- friction and ablations


def test_friction_anchors_converge(tmp_path):
    sim = _sim(tmp_path, fixtures.sliding_block, chi=0.5, frames=8)
    changes = [stats for _, stats in sim.run()]
    assert all(s.converged and s.anchor_change < 1e-8 for s in changes)
    assert any(r.n_active > 0 for s in changes for r in s.records)


def test_plain_barrier_matches_auglag(tmp_path):
    a = _sim(tmp_path / "a", fixtures.two_tet_squeeze)
    b = _sim(tmp_path / "b", fixtures.two_tet_squeeze, SolverOptions(auglag=False))
    for (sa, ra), (sb, rb) in zip(a.run(), b.run()):
        pass
    assert np.abs(sa.x - sb.x).max() <= 1e-6
    assert all(r.n_aug == 0 for r in rb.records)
    assert len({r.sigma for r in rb.records}) == 1


def test_scripted_motion_moves_nodes(tmp_path):
    sim = _sim(tmp_path, fixtures.twisting_rods, frames=3)
    for state, stats in sim.run():
        assert stats.converged
    target = sim.scene.scripted_positions(state.t)
    np.testing.assert_allclose(state.x[sim.scene.scripted], target[sim.scene.scripted], atol=1e-12)

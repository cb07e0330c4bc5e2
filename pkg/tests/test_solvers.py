import numpy as np
import pytest

from maskshaper import solvers
from maskshaper.bark import band_psd
from maskshaper.masking import tonality
from maskshaper.shaping import apply_gains, compose_response
from maskshaper.signal_io import stft
from maskshaper.solvers import (
    SolverConfig, SolverDiverged, baseline_gains, estreder_gains, evaluate_loss, loss_l0,
    loss_power, need_mask, prepare_scene, processed_thresholds, solve_gains, total_loss,
    update_lambda,
)

from _support import amp_for_spl, band_boost_db, sine, single_band_scene, synthetic_scene


def rows(noise, thr, n_bands=26):
    return np.full((1, n_bands), float(noise)), np.full((1, n_bands), float(thr))


def test_estreder_examples():
    assert estreder_gains(*rows(60, 52))[0, 0] == 8.0
    assert estreder_gains(*rows(50, 52))[0, 0] == 0.0
    assert estreder_gains(*rows(52, 52))[0, 0] == 0.0
    assert estreder_gains(*rows(70, 52))[0, 0] == 10.0
    assert estreder_gains(*rows(70, 52)).shape == (1, 24)


def test_estreder_never_negative():
    rng = np.random.default_rng(0)
    g = estreder_gains(rng.uniform(0, 100, (50, 26)), rng.uniform(0, 100, (50, 26)))
    assert np.all(g >= 0) and np.all(g <= 10)


def test_need_mask_examples():
    noise = np.zeros((1, 26))
    thr = np.ones((1, 26))
    assert not need_mask(noise, thr).active.any()
    noise[0, 9] = 5.0  # band 10
    m = need_mask(noise, thr, 3)
    assert np.flatnonzero(m.active[0]).tolist() == list(range(6, 13))  # bands 7..13
    noise = np.zeros((1, 26))
    noise[0, 25] = 5.0  # band 26
    m = need_mask(noise, thr, 2)
    assert np.flatnonzero(m.active[0]).tolist() == [23]  # band 24 only
    with pytest.raises(ValueError):
        need_mask(noise, thr, 0)


def test_need_implies_active():
    rng = np.random.default_rng(1)
    m = need_mask(rng.uniform(0, 1, (40, 26)), np.full((40, 26), 0.9), 3)
    for n, nu in zip(*np.nonzero(m.need)):
        lo, hi = max(0, nu - 3), min(23, nu + 3)
        assert m.active[n, lo:hi + 1].all()


def test_l0_examples():
    assert loss_l0(np.zeros((10, 26)), np.ones((10, 26))) == 0.0
    noise = np.zeros((10, 26))
    noise[3, 7] = 13.0
    assert loss_l0(noise, np.zeros((10, 26))) == pytest.approx(0.05)


def test_power_loss_examples():
    x = np.random.default_rng(2).normal(size=8192) * 0.1
    spec = stft(x)
    assert loss_power(spec, spec) == 0.0
    up = spec.with_frames(spec.frames * 10 ** (2 / 20))
    assert loss_power(spec, up) == pytest.approx(2.0, abs=1e-9)
    sign = np.where(np.arange(spec.n_frames) % 2 == 0, 2.0, -2.0)[:, None]
    alt = spec.with_frames(spec.frames * 10 ** (sign / 20))
    assert loss_power(spec, alt) == pytest.approx(2.0, abs=1e-9)


def test_total_loss_examples():
    assert total_loss(0.7, 3.0, 0.0, 1.0) == 0.7
    assert total_loss(0.7, 1.0, 5.0, 1.0) == 0.7
    assert total_loss(0.5, 3.0, 2.0, 1.0) == pytest.approx(4.5)
    assert total_loss(0.5, 3.0, 2.0, None) == 0.5
    with pytest.raises(ValueError):
        total_loss(0.5, 3.0, -1.0, 1.0)


def test_update_lambda_examples():
    assert update_lambda(0.0, 0.5, 1.0, 1e-3) == 0.0
    assert update_lambda(0.1, 3.0, 1.0, 1e-3) == pytest.approx(0.102)
    assert update_lambda(0.001, 1.0, 3.0, 1e-3) == 0.0


def test_evaluate_loss_matches_reference_pipeline():
    scene = synthetic_scene(0, seed=11)
    g = np.random.default_rng(3).uniform(-3, 6, (scene.n_frames, 24))
    ev = evaluate_loss(g, scene.frames(), scene.masking, 0.3, 1.0, with_grad=False)
    thr = processed_thresholds(scene, g)
    assert ev.l0 == pytest.approx(loss_l0(scene.noise_db, thr.db), rel=1e-10)
    lp = loss_power(scene.music, apply_gains(scene.music, g), scene.calibration)
    assert ev.l_power == pytest.approx(lp, rel=1e-10)
    assert ev.total == pytest.approx(total_loss(ev.l0, lp, 0.3, 1.0), rel=1e-10)


@pytest.mark.parametrize("lam,dp", [(0.0, None), (0.7, 0.5)])
def test_gradient_central_differences(lam, dp):
    scene = synthetic_scene(1, seed=12)
    batch = scene.frames()
    rng = np.random.default_rng(4)
    g = rng.uniform(-4, 9, (scene.n_frames, 24))
    ev = evaluate_loss(g, batch, scene.masking, lam, dp)
    errs = []
    for _ in range(20):
        n, nu = rng.integers(scene.n_frames), rng.integers(24)
        up, dn = g.copy(), g.copy()
        up[n, nu] += 1e-3
        dn[n, nu] -= 1e-3
        fd = (evaluate_loss(up, batch, scene.masking, lam, dp, False).total
              - evaluate_loss(dn, batch, scene.masking, lam, dp, False).total) / 2e-3
        errs.append(abs(fd - ev.grad[n, nu]) / max(abs(fd), abs(ev.grad[n, nu]), 1e-12))
    assert max(errs) <= 1e-4


def _l0_frozen_tonality(scene, g):
    # thresholds of the filtered music with the unprocessed tonality held fixed
    p = scene.music.power
    ph = p * 10 ** (compose_response(g) / 10)
    thr = scene.masking.thresholds(band_psd(ph, scene.calibration.power_scale).linear,
                                   tonality(p).alpha)
    return loss_l0(scene.noise_db, thr.db)


def test_l0_monotone_in_single_gain_at_fixed_tonality():
    rng = np.random.default_rng(5)
    for i in range(4):
        scene = synthetic_scene(i, seed=13)
        g = rng.uniform(-5, 5, (scene.n_frames, 24))
        base = _l0_frozen_tonality(scene, g)
        for _ in range(10):
            h = g.copy()
            h[:, rng.integers(24)] += rng.uniform(0.1, 3.0)
            assert _l0_frozen_tonality(scene, h) <= base + 1e-12


def test_tonality_feedback_can_raise_l0():
    # boosting a dominant low band makes the frame more tonal, which enlarges
    # the masking offset everywhere; with tonality recomputed L0 may rise
    scene = synthetic_scene(0, seed=13)
    batch = scene.frames()
    g = np.zeros((scene.n_frames, 24))
    h = g.copy()
    h[:, 2] = 3.0
    before = evaluate_loss(g, batch, scene.masking, with_grad=False).l0
    after = evaluate_loss(h, batch, scene.masking, with_grad=False).l0
    assert after > before
    assert _l0_frozen_tonality(scene, h) <= _l0_frozen_tonality(scene, g)


def test_fully_masked_scene_returns_zeros():
    music = sine(1000.0, amp_for_spl(80.0), 0.3)
    noise = sine(1000.0, amp_for_spl(10.0), 0.3)
    scene = prepare_scene(stft(music), stft(noise))
    assert not scene.mask.active.any()
    g, trace = solve_gains(scene)
    assert not np.any(g)
    assert len(trace) == 1 and trace.rows[0].l0 == 0.0


def test_single_band_against_grid_oracle():
    nu = 18
    scene, _, _ = single_band_scene(nu)
    g, trace = solve_gains(scene)
    assert trace.rows[-1].l0 <= 0.1
    batch = scene.frames()
    # oracle: smallest single-band gain (0.05 dB grid) reaching the least L0
    grid = np.arange(0.0, 10.0 + 1e-9, 0.05)
    vals = []
    for v in grid:
        h = np.zeros((scene.n_frames, 24))
        h[:, nu - 1] = v
        vals.append(evaluate_loss(h, batch, scene.masking, with_grad=False).l0)
    vals = np.array(vals)
    best = grid[np.flatnonzero(vals <= vals.min() + 1e-9)[0]]
    oracle = np.zeros((scene.n_frames, 24))
    oracle[:, nu - 1] = best
    got = band_boost_db(scene, g, nu)
    want = band_boost_db(scene, oracle, nu)
    assert np.max(np.abs(got - want)) <= 0.25


def test_zero_budget_raises_lambda():
    scene, _, _ = single_band_scene(18)
    g, trace = solve_gains(scene, SolverConfig(delta_p_max=0.0))
    lam = trace.column("lam")
    assert np.all(lam >= 0)
    assert lam[-1] > 0 and np.any(np.diff(lam) > 0)
    assert trace.rows[-1].l_power <= 0.2


def test_solver_invariants_on_random_scenes():
    for i in range(3):
        scene = synthetic_scene(i, seed=14)
        for dp in (None, 1.0):
            g, trace = solve_gains(scene, SolverConfig(delta_p_max=dp, max_iters=150))
            assert np.all((g >= -5) & (g <= 10))
            assert not np.any(g[~scene.mask.active])
            assert np.all(trace.column("lam") >= 0)


def test_solver_deterministic():
    scene = synthetic_scene(2, seed=15)
    cfg = SolverConfig(delta_p_max=1.0, max_iters=60)
    a, ta = solve_gains(scene, cfg)
    b, tb = solve_gains(scene, cfg)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ta.column("total"), tb.column("total"))


def test_smoothing_in_loop_runs():
    scene = synthetic_scene(3, seed=16)
    g, _ = solve_gains(scene, SolverConfig(smoothing_in_loop=True, max_iters=40))
    assert np.all((g >= -5) & (g <= 10)) and not np.any(g[~scene.mask.active])


def test_baseline_pipeline():
    scene = synthetic_scene(4, seed=17)
    g = baseline_gains(scene)
    assert np.all((g >= 0) & (g <= 10)) and not np.any(g[~scene.mask.active])


def test_divergence_reports_trace(monkeypatch):
    scene = synthetic_scene(0, seed=18)
    real = solvers.evaluate_loss
    calls = {"n": 0}

    def flaky(*a, **k):
        ev = real(*a, **k)
        calls["n"] += 1
        if calls["n"] > 3 and k.get("with_grad", True) and len(a) < 6:
            ev.total = float("nan")
        return ev

    monkeypatch.setattr(solvers, "evaluate_loss", flaky)
    with pytest.raises(SolverDiverged) as info:
        solve_gains(scene, SolverConfig(max_iters=50, tolerance=0.0))
    assert info.value.trace is not None and len(info.value.trace) >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(step_size=0)
    with pytest.raises(ValueError):
        SolverConfig(reach_radius=0)

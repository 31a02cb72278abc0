import dataclasses

import numpy as np
import pytest

from eventsve import kernels
from eventsve.errors import InputError
from eventsve.smoke import weber_contrast_single
from eventsve.stereo import ParticleMeasurement
from eventsve.synth import (SimConfig, SmokePuff, average_gradient, default_scene, load_scene, render_exposures,
                            save_scene, simulate_events, sve_radiance, evaluate_run)

SCENE = default_scene()
CFG = SimConfig()
TAU_GRID = np.array([[CFG.transmittances[0], CFG.transmittances[1]],
                     [CFG.transmittances[2], CFG.transmittances[3]]])


def tau_map(shape):
    return np.tile(TAU_GRID, (shape[0] // 2, shape[1] // 2))


def test_full_transmission_ignores_airlight():
    clear = dataclasses.replace(SCENE, puffs=(), base_transmission=1.0)
    a = render_exposures(dataclasses.replace(clear, airlight=0.0), 0.0)
    b = render_exposures(dataclasses.replace(clear, airlight=500.0), 0.0)
    np.testing.assert_array_equal(a.values, b.values)
    J = sve_radiance(clear, 0.0)
    expected = np.clip(np.round(CFG.gain * tau_map(J.shape) * J), 0, 65535)
    np.testing.assert_array_equal(a.values, expected)


def test_opaque_smoke_shows_airlight_only():
    A = 3.0
    fog = SmokePuff(p0=(0.0, 0.0, 120.0), velocity=(0.0, 0.0, 0.0), sigma=1e5, depth=1e3)
    opaque = dataclasses.replace(SCENE, puffs=(fog,), airlight=A)
    m = render_exposures(opaque, 0.0)
    expected = np.round(CFG.gain * tau_map(m.values.shape) * A)
    np.testing.assert_array_equal(m.values, expected)


def test_mid_smoke_matches_scattering_formula():
    clear = dataclasses.replace(SCENE, puffs=(), base_transmission=1.0)
    J = sve_radiance(clear, 0.0)
    t, A = 0.55, SCENE.airlight
    m = render_exposures(dataclasses.replace(clear, base_transmission=t), 0.0)
    I = J * t + A * (1 - t)
    expected = np.clip(CFG.gain * tau_map(J.shape) * I, 0, 65535)
    assert np.max(np.abs(m.values - expected)) <= 0.5 + 1e-9


def test_denser_smoke_never_raises_contrast():
    thin = sve_radiance(dataclasses.replace(SCENE, base_transmission=0.9), 0.0)
    thick = sve_radiance(dataclasses.replace(SCENE, base_transmission=0.5), 0.0)
    assert np.all(weber_contrast_single(thick) <= weber_contrast_single(thin) + 1e-12)


def test_rendering_is_deterministic():
    a = render_exposures(SCENE, 2000.0, dataclasses.replace(CFG, read_noise=3.0, seed=5))
    b = render_exposures(SCENE, 2000.0, dataclasses.replace(CFG, read_noise=3.0, seed=5))
    assert a.values.tobytes() == b.values.tobytes()


def test_static_scene_no_noise_is_silent():
    static = dataclasses.replace(SCENE, puffs=(), particles=tuple(
        dataclasses.replace(p, velocity=(0.0, 0.0, 0.0), wobble_amp=0.0, log_rate=0.0) for p in SCENE.particles))
    s = simulate_events(static, SCENE.rig.left, (0.0, 500.0), dataclasses.replace(CFG, event_noise_rate=0.0))
    assert len(s) == 0


def test_event_simulation_deterministic():
    cfg = dataclasses.replace(CFG, seed=3)
    a = simulate_events(SCENE, SCENE.rig.right, (0.0, 300.0), cfg, view_id="right")
    b = simulate_events(SCENE, SCENE.rig.right, (0.0, 300.0), cfg, view_id="right")
    assert len(a) > 0
    for name in "tuvp":
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_step_of_two_thresholds(backend):
    C = 0.15
    logi = np.array([[0.0, 0.0], [2 * C, 0.0]])
    t, i, p = kernels.integrate_fire(logi, np.array([0.0, 10.0]), np.zeros(2), C, backend=backend)
    assert i.tolist() == [0, 0] and p.tolist() == [1, 1]


def brute_force_events(logi, C):
    """Reference integrate-and-fire written pixel by pixel."""
    counts = np.zeros((logi.shape[1], 2), dtype=int)
    for n in range(logi.shape[1]):
        ref = logi[0, n]
        for x in logi[1:, n]:
            while x - ref >= C - 1e-9 * C:
                ref += C
                counts[n, 0] += 1
            while ref - x >= C - 1e-9 * C:
                ref -= C
                counts[n, 1] += 1
    return counts


def moving_disc(T=300, size=24):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    frames = []
    for k in range(T):
        cx = 4 + 16 * k / T
        d = np.hypot(xx - cx, yy - 12)
        frames.append(np.log(1.0 + 40.0 / (1 + np.exp((d - 4.0) / 0.4))))
    return np.array(frames).reshape(T, -1)


def test_moving_disc_matches_brute_force():
    logi = moving_disc()
    t, i, p = kernels.integrate_fire(logi, np.arange(len(logi)) * 10.0, logi[0].copy(), 0.15)
    oracle = brute_force_events(logi, 0.15)
    total = oracle.sum()
    assert total > 100
    assert abs(len(t) - total) <= 0.1 * total
    assert np.sum(p > 0) == oracle[:, 0].sum() and np.sum(p < 0) == oracle[:, 1].sum()


def test_ramp_reversal_swaps_polarities():
    ramp = np.linspace(0.0, 1.3, 50)[:, None] * np.linspace(0.5, 1.5, 7)[None, :]
    up = kernels.integrate_fire(ramp, np.arange(50.0), ramp[0].copy(), 0.15)
    down_l = ramp[::-1].copy()
    down = kernels.integrate_fire(down_l, np.arange(50.0), down_l[0].copy(), 0.15)
    assert np.sum(up[2] > 0) == np.sum(down[2] < 0) > 0
    assert np.sum(up[2] < 0) == np.sum(down[2] > 0) == 0


def test_simulated_interval_checked():
    with pytest.raises(InputError):
        simulate_events(SCENE, SCENE.rig.left, (0.0, SCENE.duration_us + 100.0))


def test_average_gradient_examples():
    assert average_gradient(np.full((10, 10), 4.0)) == 0.0
    g = 0.7
    ramp = g * np.tile(np.arange(12.0), (9, 1))
    assert average_gradient(ramp) == pytest.approx(g / np.sqrt(2.0), rel=1e-12)
    assert average_gradient(ramp, (2, 6, 3, 9)) == pytest.approx(g / np.sqrt(2.0), rel=1e-12)
    with pytest.raises(InputError):
        average_gradient(ramp, (5, 5, 0, 4))
    with pytest.raises(InputError):
        average_gradient(ramp, (0, 4, 0, 40))


def truth_measurement(p, t=0.0, shift=(0.0, 0.0, 0.0)):
    X = p.position(t, SCENE.plane_axes) + np.asarray(shift)
    return ParticleMeasurement(t_us=t, centroid_w=X, dh=float(SCENE.separation_height(X)), D=(1.0, 1.0),
                               S_f=(1.0, 1.0), S=(np.pi * p.radius ** 2,) * 2, re_left=p.radius,
                               re_right=p.radius, r_e=p.radius, d_e=2 * p.radius, reprojection_error=0.0)


def test_evaluate_perfect_run():
    ev = evaluate_run(SCENE, [truth_measurement(p) for p in SCENE.particles], windows=1)
    assert ev.detection_rate == 1.0 and ev.false_positives == 0
    for rec in ev.per_particle.values():
        assert rec["dh_max_abs_err"] == 0.0 and rec["re_median_rel"] == 0.0


def test_evaluate_counts_spurious_detection():
    ms = [truth_measurement(p) for p in SCENE.particles]
    ms.append(truth_measurement(SCENE.particles[0], shift=(30.0, 0.0, 0.0)))
    ev = evaluate_run(SCENE, ms, windows=1)
    assert ev.false_positives == 1 and ev.detections == 3


def test_scene_file_round_trip(tmp_path):
    save_scene(SCENE, tmp_path / "scene.yaml")
    back = load_scene(tmp_path / "scene.yaml")
    assert back.particles == SCENE.particles and back.puffs == SCENE.puffs
    assert back.backdrop == SCENE.backdrop
    assert back.rig.to_dict() == SCENE.rig.to_dict()
    np.testing.assert_array_equal(render_exposures(back, 100.0).values, render_exposures(SCENE, 100.0).values)


def test_default_scene_ground_truth():
    A = SCENE.particle("A")
    assert SCENE.separation_height(A.position(0.0, SCENE.plane_axes)) == pytest.approx(15.94, abs=1e-9)
    assert sorted(p.radius for p in SCENE.particles) == [0.5, 1.0, 1.5]

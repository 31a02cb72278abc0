import math

import numpy as np
import pytest

from eventsve.errors import (ConfigError, IllConditionedError, InputError, InvariantError, NumericError,
                             ProjectionError)
from eventsve.stereo import (CameraModel, ColumnAxis, StereoRig, epipolar_match, equivalent_radius,
                             euler_to_matrix, ideal_pixels, in_valid_region, load_calibration, measure_particle,
                             object_distance, project, save_calibration, scale_factor, separation_height,
                             size_histogram, reference_rig, triangulate, triangulate_many, undistort,
                             undistorted_area)

RIG = reference_rig()


def oracle_project(f, cx, cy, dist, R, t, P):
    """Scalar re-implementation of the pinhole + radial-tangential model."""
    X = [sum(R[i][j] * P[j] for j in range(3)) + t[i] for i in range(3)]
    x, y = X[0] / X[2], X[1] / X[2]
    k1, k2, p1, p2, k3 = dist
    r2 = x * x + y * y
    rad = 1 + k1 * r2 + k2 * r2 ** 2 + k3 * r2 ** 3
    xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return f * xd + cx, f * yd + cy


def volume_points(n, seed):
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        P = rng.uniform([-40, -40, 90], [30, 20, 190], (4 * n, 3))
        ok = in_valid_region(RIG.left, P) & in_valid_region(RIG.right, P)
        pts.extend(P[ok])
    return np.array(pts[:n])


# -- camera model --------------------------------------------------------------

def test_optical_axis_projects_to_principal_point():
    cam = CameraModel(f=1000.0, cx=640.0, cy=512.0)
    for Z in (1.0, 50.0, 1e4):
        np.testing.assert_allclose(project(cam, [0.0, 0.0, Z]), [640.0, 512.0])


def test_similar_triangles():
    cam = CameraModel(f=800.0, cx=600.0, cy=400.0)
    assert project(cam, [30.0, 0.0, 120.0])[0] == pytest.approx(600.0 + 800.0 * 30.0 / 120.0, abs=1e-12)


def test_right_camera_matches_scalar_oracle():
    cam = RIG.right
    R = cam.R.tolist()
    for P in volume_points(200, 0):
        exp = oracle_project(cam.f, cam.cx, cam.cy, cam.distortion, R, cam.t.tolist(), P.tolist())
        np.testing.assert_allclose(project(cam, P), exp, rtol=0, atol=1e-9)
    assert cam.f == 1959.47


def test_behind_camera_raises():
    with pytest.raises(ProjectionError):
        project(RIG.left, [0.0, 0.0, -5.0])


def test_undistort_zero_distortion_and_principal_point():
    cam = CameraModel(f=500.0, cx=320.0, cy=240.0)
    np.testing.assert_allclose(undistort(cam, [420.0, 140.0]), [0.2, -0.2], atol=1e-15)
    for c in RIG.cameras:
        np.testing.assert_allclose(undistort(c, c.principal_point), [0.0, 0.0], atol=1e-15)


def test_undistort_round_trip():
    for cam in RIG.cameras:
        uv = project(cam, volume_points(300, 1))
        back = cam.f * _distort_norm(cam, undistort(cam, uv)) + cam.principal_point
        assert np.max(np.abs(back - uv)) < 1e-6


def _distort_norm(cam, xy):
    from eventsve.stereo import distort

    return distort(cam, xy)


def test_undistort_outside_radius():
    with pytest.raises(NumericError):
        undistort(RIG.right, [[-8000.0, -6000.0]])
    assert np.isnan(undistort(RIG.right, [[-8000.0, -6000.0]], strict=False)).all()


def test_camera_and_rig_invariants():
    with pytest.raises(InvariantError):
        CameraModel(f=1.0, cx=0, cy=0, R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ConfigError):
        CameraModel(f=0.0, cx=0, cy=0)
    left = CameraModel(f=1.0, cx=0, cy=0)
    with pytest.raises(InvariantError):
        StereoRig(CameraModel(f=1.0, cx=0, cy=0, t=[1.0, 0, 0]), left)
    with pytest.raises(InvariantError):
        StereoRig(left, left)
    R = euler_to_matrix((0.3, -0.2, 0.1))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


# -- triangulation -------------------------------------------------------------

def test_round_trip_1000_points():
    P = volume_points(1000, 2)
    Q, err, _ = triangulate_many(RIG, project(RIG.left, P), project(RIG.right, P))
    assert np.max(np.linalg.norm(Q - P, axis=1)) < 1e-6
    assert np.all(err >= 0)


def test_reference_point_is_outside_the_right_view():
    P = np.array([10.0, -5.0, 300.0])
    assert not in_valid_region(RIG.right, P)
    with pytest.raises(NumericError):
        triangulate(RIG, project(RIG.left, P), project(RIG.right, P))


def test_single_triangulation():
    P = volume_points(1, 3)[0]
    Q, err = triangulate(RIG, project(RIG.left, P), project(RIG.right, P))
    assert np.linalg.norm(Q - P) < 1e-6 and err < 1e-6


def test_point_on_baseline_is_ill_conditioned():
    left = CameraModel(f=1000.0, cx=500.0, cy=500.0)
    right = CameraModel(f=1000.0, cx=500.0, cy=500.0, t=np.array([0.0, 0.0, -100.0]))
    rig = StereoRig(left, right)  # right camera sits 100 mm ahead on the optical axis
    P = np.array([0.0, 0.0, 300.0])
    with pytest.raises(IllConditionedError):
        triangulate(rig, project(left, P), project(right, P))


def test_refinement_never_worse_than_dlt():
    rng = np.random.default_rng(4)
    P = volume_points(200, 4)
    uv_l = project(RIG.left, P) + rng.normal(0, 0.5, (200, 2))
    uv_r = project(RIG.right, P) + rng.normal(0, 0.5, (200, 2))
    _, err, err0 = triangulate_many(RIG, uv_l, uv_r)
    assert np.all(err <= err0 + 1e-12)


# -- epipolar matching ---------------------------------------------------------

def test_consistent_pair_matches_at_zero_distance():
    P = volume_points(1, 5)
    pairs = epipolar_match(RIG, project(RIG.left, P), [100.0], project(RIG.right, P), [100.0])
    assert len(pairs) == 1 and pairs[0][:2] == (0, 0) and pairs[0][2] < 1e-9


def test_time_skew_blocks_match():
    P = volume_points(1, 6)
    assert epipolar_match(RIG, project(RIG.left, P), [0.0], project(RIG.right, P), [40_000.0],
                          max_dt_us=12.0) == []


def test_twenty_particles_assignment():
    P = volume_points(20, 7)
    rng = np.random.default_rng(7)
    perm = rng.permutation(20)
    uv_l = project(RIG.left, P)
    uv_r = project(RIG.right, P[perm])
    pairs = epipolar_match(RIG, uv_l, np.zeros(20), uv_r, np.zeros(20))
    correct = sum(perm[j] == i for i, j, _ in pairs)
    assert correct >= 19


def test_tie_break_prefers_smaller_time_gap():
    P = volume_points(1, 8)
    uv_r = project(RIG.right, P)
    pairs = epipolar_match(RIG, project(RIG.left, P), [50.0], np.vstack([uv_r, uv_r]), [60.0, 52.0])
    assert pairs[0][:2] == (0, 1)


# -- metrology -----------------------------------------------------------------

def test_separation_height_examples():
    axis = ColumnAxis(np.array([1.0, 2.0, 3.0]), np.array([1.0, -8.0, 3.0]))
    assert separation_height(axis, axis.P1) == 0.0
    assert separation_height(axis, axis.P2) == pytest.approx(10.0, abs=1e-12)
    for lam in (0.0, 0.25, 0.6, 1.0):
        assert separation_height(axis, axis.P1 + lam * (axis.P2 - axis.P1)) == pytest.approx(10.0 * lam, abs=1e-12)
    assert abs(np.linalg.norm(axis.n_hat) - 1.0) < 1e-12
    with pytest.raises(InvariantError):
        ColumnAxis(np.zeros(3), np.zeros(3))


def test_separation_height_rigid_invariance():
    rng = np.random.default_rng(9)
    P1, P2, P3 = rng.normal(size=(3, 3)) * 20
    R = euler_to_matrix(rng.uniform(-np.pi, np.pi, 3))
    t = rng.normal(size=3) * 50
    a = separation_height(ColumnAxis(P1, P2), P3)
    b = separation_height(ColumnAxis(R @ P1 + t, R @ P2 + t), R @ P3 + t)
    assert a == pytest.approx(b, abs=1e-9)


def test_object_distance_examples():
    cam = CameraModel(f=1000.0, cx=10.0, cy=20.0)
    assert object_distance(cam, [10.0, 20.0]) == 1000.0
    cam = CameraModel(f=300.0, cx=0.0, cy=0.0)
    assert object_distance(cam, [400.0, 0.0]) == 500.0


def test_scale_factor_examples():
    cam = CameraModel(f=1000.0, cx=0.0, cy=0.0)
    assert scale_factor(cam, 500.0, object_distance(cam, [0.0, 0.0])) == 0.5
    assert scale_factor(cam, 1000.0, 1000.0) == 2 * scale_factor(cam, 500.0, 1000.0)
    assert scale_factor(cam, 500.0, 1000.0, mode="literal") == pytest.approx(500.0 * cam.mu / 1000.0)
    with pytest.raises(InputError):
        scale_factor(cam, 0.0, 1000.0)
    with pytest.raises(ConfigError):
        scale_factor(cam, 1.0, 1.0, mode="other")


@pytest.mark.parametrize("S,r", [(math.pi, 1.0), (4 * math.pi, 2.0)])
def test_equivalent_radius_examples(S, r):
    S_out, r_e, d_e = equivalent_radius(S, 1.0)
    assert S_out == S and r_e == pytest.approx(r, rel=1e-15) and d_e == 2 * r_e


def test_rasterized_disc_radius():
    yy, xx = np.mgrid[-12:13, -12:13]
    count = int(np.sum(xx ** 2 + yy ** 2 <= 100))
    _, r_e, _ = equivalent_radius(count, 0.1)
    assert abs(r_e - 1.0) <= 0.03
    with pytest.raises(InputError):
        equivalent_radius(0.0, 0.1)


def test_radius_and_area_scaling():
    S1, r1, _ = equivalent_radius(50.0, 0.1)
    S2, r2, _ = equivalent_radius(50.0, 0.3)
    assert r2 == pytest.approx(3 * r1, rel=1e-14) and S2 == pytest.approx(9 * S1, rel=1e-14)


def sphere_rim(cam, X, rho, n=720):
    C = cam.center
    w = X - C
    dist = np.linalg.norm(w)
    w = w / dist
    a = np.cross(w, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(w, a)
    centre = X - w * rho * rho / dist
    radius = rho * np.sqrt(1 - (rho / dist) ** 2)
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return centre + radius * (np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b)


def test_sphere_size_constant_across_depths():
    cam = RIG.left
    rho = 1.0
    radii = []
    for z in (90.0, 130.0, 170.0, 210.0):
        X = np.array([-12.0, -10.0, z])
        contour = project(cam, sphere_rim(cam, X, rho))
        D = float(np.linalg.norm(cam.to_camera(X)))
        Sf = scale_factor(cam, D, object_distance(cam, ideal_pixels(cam, project(cam, X))))
        radii.append(equivalent_radius(undistorted_area(cam, contour), Sf)[1])
    radii = np.array(radii)
    assert (radii.max() - radii.min()) / radii.mean() < 0.02
    assert abs(radii.mean() - rho) < 0.02


def test_measurement_invariants():
    P = volume_points(1, 10)[0]
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    ring = np.column_stack([np.cos(ang), np.sin(ang)]) * 8.0
    uv_l, uv_r = project(RIG.left, P), project(RIG.right, P)
    axis = ColumnAxis(np.array([0.0, 0.0, 100.0]), np.array([0.0, -10.0, 100.0]))
    m = measure_particle(RIG, axis, uv_l, uv_r, uv_l + ring, uv_r + ring, 0.0)
    assert m.d_e == 2 * m.r_e
    assert abs(m.r_e - math.sqrt(m.S_mean / math.pi)) <= 1e-12 * m.r_e
    assert m.r_e == pytest.approx(math.sqrt(m.re_left * m.re_right), rel=1e-15)
    assert m.reprojection_error >= 0
    np.testing.assert_allclose(m.centroid_w, P, atol=1e-6)


# -- histogram -----------------------------------------------------------------

def test_histogram_single_measurement():
    counts, edges, modes = size_histogram([0.73])
    assert counts.tolist() == [1] and len(edges) == 2 and len(modes) == 1


def test_histogram_two_modes():
    rng = np.random.default_rng(11)
    r = np.concatenate([rng.normal(0.5, 0.1, 400), rng.normal(1.5, 0.1, 400)])
    _, _, modes = size_histogram(r, bin_width=0.05)
    assert len(modes) == 2
    assert abs(modes[0] - 0.5) < 0.1 and abs(modes[1] - 1.5) < 0.1


def test_histogram_empty():
    with pytest.raises(InputError):
        size_histogram([])


def test_calibration_round_trip(tmp_path):
    save_calibration(RIG, tmp_path / "cal.json")
    back = load_calibration(tmp_path / "cal.json")
    for a, b in zip(RIG.cameras, back.cameras):
        assert a.to_dict() == b.to_dict()
        assert a.valid_radius == b.valid_radius

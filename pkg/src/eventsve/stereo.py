"""Stereo event-camera geometry: projection, triangulation and particle metrology.

Extrinsics follow ``X_cam = R @ X_world + t`` with the world frame pinned to
the left camera. Distortion is the five-term radial-tangential model
``(k1, k2, p1, p2, k3)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks
from scipy.spatial.transform import Rotation

from .errors import (ConfigError, IllConditionedError, InputError, InvariantError,
                     NumericError, ProjectionError)

CALIBRATION_FIELDS = ("f", "cx", "cy", "distortion", "R", "t", "mu")
MIN_RAY_ANGLE_DEG = 0.5


@dataclass(frozen=True)
class CameraModel:
    f: float
    cx: float
    cy: float
    distortion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mu: float = 0.00486
    width: int = 1280
    height: int = 1024
    valid_radius: float | None = None  # undistorted radius where the model is invertible

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if self.f <= 0 or self.mu <= 0:
            raise ConfigError("focal length and pixel pitch must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvariantError("rotation matrix is not orthonormal with det +1", locus="calibration")
        dist = tuple(float(d) for d in self.distortion)
        if len(dist) != 5:
            raise ConfigError("distortion needs five coefficients (k1, k2, p1, p2, k3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "distortion", dist)
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "mu", float(self.mu))
        if self.valid_radius is None:
            object.__setattr__(self, "valid_radius", fold_radius(dist))

    @property
    def principal_point(self):
        return np.array([self.cx, self.cy])

    @property
    def center(self):
        """Optical centre in world coordinates."""
        return -self.R.T @ self.t

    def to_camera(self, P_w):
        return np.asarray(P_w, dtype=np.float64) @ self.R.T + self.t

    def to_dict(self):
        return {
            "f": self.f, "cx": self.cx, "cy": self.cy,
            "distortion": list(self.distortion),
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
            "mu": self.mu, "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in CALIBRATION_FIELDS if k not in d]
        if missing:
            raise ConfigError(f"calibration entry missing fields {missing}")
        return cls(f=d["f"], cx=d["cx"], cy=d["cy"], distortion=tuple(d["distortion"]),
                   R=np.array(d["R"], dtype=np.float64).reshape(3, 3), t=np.array(d["t"], dtype=np.float64),
                   mu=d["mu"], width=int(d.get("width", 1280)), height=int(d.get("height", 1024)))


@dataclass(frozen=True)
class StereoRig:
    left: CameraModel
    right: CameraModel

    def __post_init__(self):
        if not (np.array_equal(self.left.R, np.eye(3)) and not np.any(self.left.t)):
            raise InvariantError("left camera defines the world frame: R must be I and t must be 0",
                                 locus="calibration.left")
        if np.linalg.norm(self.right.t) <= 0:
            raise InvariantError("stereo baseline must be non-zero", locus="calibration.right")

    @property
    def baseline(self):
        return float(np.linalg.norm(self.right.center - self.left.center))

    @property
    def cameras(self):
        return (self.left, self.right)

    def to_dict(self):
        return {"left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(CameraModel.from_dict(d["left"]), CameraModel.from_dict(d["right"]))


def save_calibration(rig, path):
    Path(path).write_text(json.dumps(rig.to_dict(), indent=2) + "\n")


def load_calibration(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"calibration file {path} is not valid JSON: {exc}") from exc
    return StereoRig.from_dict(data)


def euler_to_matrix(angles):
    """Extrinsic x-y-z rotation, ``R = Rz @ Ry @ Rx``."""
    return Rotation.from_euler("xyz", angles).as_matrix()


# Event-camera calibration of the reference rig.
REFERENCE_RIG = {
    "left": dict(f=1703.25, cx=582.69, cy=497.77, distortion=(-0.11, 0.22, -0.01, 0.01, 0.00),
                 euler=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)),
    "right": dict(f=1959.47, cx=502.29, cy=387.05, distortion=(0.13, -5.68, -0.02, 0.01, 0.00),
                  euler=(-0.360, 1.410, 0.171), t=(-105.90, -28.25, 149.75)),
}


def reference_rig(mu=0.00486, width=1280, height=1024):
    cams = []
    for side in ("left", "right"):
        p = REFERENCE_RIG[side]
        R = np.eye(3) if side == "left" else euler_to_matrix(p["euler"])
        cams.append(CameraModel(f=p["f"], cx=p["cx"], cy=p["cy"], distortion=p["distortion"], R=R,
                                t=np.array(p["t"]), mu=mu, width=width, height=height))
    return StereoRig(*cams)


# -- projection ------------------------------------------------------------

def fold_radius(distortion, margin=0.9, cap=1.0):
    """Largest undistorted radius (times ``margin``) over which radial distortion is monotone."""
    if not any(distortion):
        return float("inf")  # the pinhole model inverts everywhere
    k1, k2, _, _, k3 = distortion
    r = np.linspace(0.0, cap / margin, 20001)
    x = r * r
    slope = 1.0 + 3.0 * k1 * x + 5.0 * k2 * x * x + 7.0 * k3 * x ** 3
    bad = np.nonzero(slope <= 0)[0]
    if bad.size == 0:
        return cap
    return float(min(cap, margin * r[bad[0]]))


def _radial(distortion, r):
    k1, k2, _, _, k3 = distortion
    x = r * r
    return r * (1.0 + x * (k1 + x * (k2 + x * k3)))


def in_valid_region(camera, P_w):
    """True where P_w projects in front of the camera, inside the sensor and the invertible zone."""
    Xc = camera.to_camera(np.asarray(P_w, dtype=np.float64))
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.hypot(Xc[..., 0], Xc[..., 1]) / z
        uv = camera.f * distort(camera, Xc[..., :2] / z[..., None]) + camera.principal_point
    return ((z > 0) & (r <= camera.valid_radius) & (uv[..., 0] >= 0) & (uv[..., 0] <= camera.width - 1)
            & (uv[..., 1] >= 0) & (uv[..., 1] <= camera.height - 1))


def distort(camera, xy):
    k1, k2, p1, p2, k3 = camera.distortion
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(camera, xy):
    """d(distorted)/d(normalized), shape (..., 2, 2)."""
    k1, k2, p1, p2, k3 = camera.distortion
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    drad = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2  # d radial / d r2
    J = np.empty(xy.shape[:-1] + (2, 2))
    J[..., 0, 0] = radial + x * drad * 2 * x + 2 * p1 * y + p2 * 6 * x
    J[..., 0, 1] = x * drad * 2 * y + 2 * p1 * x + p2 * 2 * y
    J[..., 1, 0] = y * drad * 2 * x + p1 * 2 * x + 2 * p2 * y
    J[..., 1, 1] = radial + y * drad * 2 * y + p1 * 6 * y + 2 * p2 * x
    return J


def project(camera, P_w):
    """World point(s) to distorted pixel coordinates, shape (..., 2)."""
    P_w = np.asarray(P_w, dtype=np.float64)
    Xc = camera.to_camera(P_w)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise ProjectionError("point behind or on the camera plane")
    xy = Xc[..., :2] / z[..., None]
    return camera.f * distort(camera, xy) + camera.principal_point


def project_jacobian(camera, P_w):
    """Pixels and d(pixel)/d(P_w) for point(s) P_w, shapes (..., 2) and (..., 2, 3)."""
    P_w = np.asarray(P_w, dtype=np.float64)
    Xc = camera.to_camera(P_w)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise ProjectionError("point behind or on the camera plane")
    xy = Xc[..., :2] / z[..., None]
    dn = np.zeros(Xc.shape[:-1] + (2, 3))
    dn[..., 0, 0] = 1.0 / z
    dn[..., 1, 1] = 1.0 / z
    dn[..., 0, 2] = -xy[..., 0] / z
    dn[..., 1, 2] = -xy[..., 1] / z
    J = camera.f * distort_jacobian(camera, xy) @ dn @ camera.R
    return camera.f * distort(camera, xy) + camera.principal_point, J


def undistort(camera, uv, max_iter=20, tol=1e-14, strict=True):
    """Pixel coordinates to normalized image coordinates ``(x, y)`` (ray ``(x, y, 1)``).

    Newton iteration on the forward model; converges to machine precision in
    a handful of steps inside ``camera.valid_radius``. Pixels beyond that
    radius raise, or come back as NaN when ``strict`` is false.
    """
    uv = np.asarray(uv, dtype=np.float64)
    target = (uv - camera.principal_point) / camera.f
    outside = np.hypot(target[..., 0], target[..., 1]) > 1.05 * _radial(camera.distortion, camera.valid_radius)
    if np.any(outside):
        if strict:
            raise NumericError("pixel outside the calibrated undistortion radius")
        target = np.where(outside[..., None], 0.0, target)
        xy = undistort(camera, target * camera.f + camera.principal_point, max_iter, tol)
        return np.where(outside[..., None], np.nan, xy)
    xy = target.copy()
    for _ in range(max_iter):
        resid = distort(camera, xy) - target
        if np.all(np.abs(resid) < tol):
            return xy
        J = distort_jacobian(camera, xy)
        xy = xy - np.linalg.solve(J, resid[..., None])[..., 0]
    resid = distort(camera, xy) - target
    if np.any(np.abs(resid) * camera.f > 1e-9):
        raise NumericError(f"undistortion did not converge in {max_iter} iterations")
    return xy


def ideal_pixels(camera, uv, strict=True):
    """Distortion-free pixel coordinates of ``uv`` (same intrinsics, no lens terms)."""
    return camera.f * undistort(camera, uv, strict=strict) + camera.principal_point


def rays(camera, uv):
    """Unit viewing rays in world coordinates for pixel(s) ``uv``."""
    xy = undistort(camera, uv)
    d = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    d = d @ camera.R  # R^T d for row vectors
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


# -- triangulation ---------------------------------------------------------

def _dlt(rig, xy_l, xy_r):
    """Linear triangulation from normalized coordinates; batched over the first axis."""
    rows = []
    for cam, xy in ((rig.left, xy_l), (rig.right, xy_r)):
        P = np.hstack([cam.R, cam.t[:, None]])
        rows.append(xy[:, 0:1] * P[2] - P[0])
        rows.append(xy[:, 1:2] * P[2] - P[1])
    A = np.stack(rows, axis=1)  # (N, 4, 4)
    # inhomogeneous least squares on X: A[:, :, :3] X = -A[:, :, 3]
    M = A[:, :, :3]
    b = -A[:, :, 3]
    MtM = np.einsum("nij,nik->njk", M, M)
    Mtb = np.einsum("nij,ni->nj", M, b)
    return np.linalg.solve(MtM, Mtb[..., None])[..., 0]


def reprojection_error(rig, P, uv_l, uv_r):
    """RMS pixel residual over both views, per point."""
    el = np.linalg.norm(project(rig.left, P) - uv_l, axis=-1)
    er = np.linalg.norm(project(rig.right, P) - uv_r, axis=-1)
    return np.sqrt(0.5 * (el * el + er * er))


def triangulate_many(rig, uv_l, uv_r, iterations=10):
    """Batched triangulation. Returns ``(P, reproj_err, init_err)``."""
    uv_l = np.atleast_2d(np.asarray(uv_l, dtype=np.float64))
    uv_r = np.atleast_2d(np.asarray(uv_r, dtype=np.float64))
    xy_l = undistort(rig.left, uv_l)
    xy_r = undistort(rig.right, uv_r)
    dl = np.column_stack([xy_l, np.ones(len(xy_l))]) @ rig.left.R
    dr = np.column_stack([xy_r, np.ones(len(xy_r))]) @ rig.right.R
    cosang = np.sum(dl * dr, axis=1) / (np.linalg.norm(dl, axis=1) * np.linalg.norm(dr, axis=1))
    angle = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    if np.any(angle < MIN_RAY_ANGLE_DEG):
        raise IllConditionedError(f"rays meet at {angle.min():.3g} deg (< {MIN_RAY_ANGLE_DEG} deg)")
    P = _dlt(rig, xy_l, xy_r)
    err0 = reprojection_error(rig, P, uv_l, uv_r)
    err = err0.copy()
    for _ in range(iterations):
        ul, Jl = project_jacobian(rig.left, P)
        ur, Jr = project_jacobian(rig.right, P)
        r = np.concatenate([ul - uv_l, ur - uv_r], axis=1)  # (N, 4)
        J = np.concatenate([Jl, Jr], axis=1)  # (N, 4, 3)
        JtJ = np.einsum("nij,nik->njk", J, J)
        Jtr = np.einsum("nij,ni->nj", J, r)
        step = np.linalg.solve(JtJ, Jtr[..., None])[..., 0]
        cand = P - step
        try:
            cerr = reprojection_error(rig, cand, uv_l, uv_r)
        except ProjectionError:
            break
        better = cerr <= err
        P = np.where(better[:, None], cand, P)
        err = np.where(better, cerr, err)
        if np.all(np.abs(step) < 1e-13 * (1.0 + np.abs(P))):
            break
    return P, err, err0


def triangulate(rig, uv_l, uv_r):
    """World point and RMS reprojection error for one stereo correspondence."""
    P, err, _ = triangulate_many(rig, [uv_l], [uv_r])
    return P[0], float(err[0])


# -- epipolar matching -----------------------------------------------------

def essential_matrix(rig):
    t = rig.right.t
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    return tx @ rig.right.R


def epipolar_distance(rig, uv_l, uv_r):
    """Symmetric point-to-epipolar-line distance in pixels for all pairs.

    Returns an ``(N_left, N_right)`` matrix.
    """
    E = essential_matrix(rig)
    xl = np.column_stack([undistort(rig.left, np.atleast_2d(uv_l)), np.ones(len(np.atleast_2d(uv_l)))])
    xr = np.column_stack([undistort(rig.right, np.atleast_2d(uv_r)), np.ones(len(np.atleast_2d(uv_r)))])
    lines_r = xl @ E.T  # epipolar lines in the right image, one per left point
    lines_l = xr @ E  # and vice versa
    num = np.abs(lines_r @ xr.T)  # (Nl, Nr) == |xr^T E xl|
    d_r = num / np.hypot(lines_r[:, 0], lines_r[:, 1])[:, None] * rig.right.f
    d_l = num / np.hypot(lines_l[:, 0], lines_l[:, 1])[None, :] * rig.left.f
    return 0.5 * (d_l + d_r)


def epipolar_match(rig, uv_l, t_l, uv_r, t_r, max_epi_px=3.0, max_dt_us=12.0):
    """Greedy one-to-one matching under epipolar and time-window gates.

    Returns a list of ``(i_left, j_right, distance_px)`` sorted by left index.
    """
    uv_l = np.asarray(uv_l, dtype=np.float64).reshape(-1, 2)
    uv_r = np.asarray(uv_r, dtype=np.float64).reshape(-1, 2)
    if len(uv_l) == 0 or len(uv_r) == 0:
        return []
    dist = epipolar_distance(rig, uv_l, uv_r)
    dt = np.abs(np.asarray(t_l, dtype=np.float64)[:, None] - np.asarray(t_r, dtype=np.float64)[None, :])
    cand = [(dist[i, j], dt[i, j], i, j) for i, j in zip(*np.nonzero((dist <= max_epi_px) & (dt <= max_dt_us)))]
    cand.sort()
    used_l, used_r, pairs = set(), set(), []
    for d, _, i, j in cand:
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((int(i), int(j), float(d)))
    return sorted(pairs)


# -- column axis and metrology ---------------------------------------------

@dataclass(frozen=True)
class ColumnAxis:
    P1: np.ndarray
    P2: np.ndarray

    def __post_init__(self):
        P1 = np.asarray(self.P1, dtype=np.float64)
        P2 = np.asarray(self.P2, dtype=np.float64)
        if np.linalg.norm(P2 - P1) == 0:
            raise InvariantError("column axis endpoints coincide", locus="column")
        object.__setattr__(self, "P1", P1)
        object.__setattr__(self, "P2", P2)

    @property
    def n_hat(self):
        d = self.P2 - self.P1
        return d / np.linalg.norm(d)


def separation_height(axis, P3):
    """Signed axial projection of ``P3 - P1``."""
    return float((np.asarray(P3, dtype=np.float64) - axis.P1) @ axis.n_hat)


def object_distance(camera, p3):
    """Distance in pixels from the optical centre to image point ``p3``."""
    off = np.asarray(p3, dtype=np.float64) - camera.principal_point
    return float(np.sqrt(camera.f ** 2 + off @ off))


def scale_factor(camera, D, d, mode="consistent"):
    """Millimetres per pixel at object distance ``D`` (mm) and image distance ``d`` (px).

    ``mode="literal"`` evaluates ``D * mu / d`` as written, which only has
    mm/pixel units if ``d`` is taken in millimetres.
    """
    if D <= 0 or d <= 0:
        raise InputError("object and image distances must be positive")
    if mode == "consistent":
        return D / d
    if mode == "literal":
        return D * camera.mu / d
    raise ConfigError(f"unknown scale-factor mode {mode!r}")


def equivalent_radius(pixel_area, S_f):
    """Physical area, equivalent radius and diameter from a pixel area."""
    if pixel_area <= 0:
        raise InputError("pixel area must be positive")
    S = pixel_area * S_f * S_f
    r_e = float(np.sqrt(S / np.pi))
    return S, r_e, 2.0 * r_e


@dataclass(frozen=True)
class ParticleMeasurement:
    t_us: float
    centroid_w: np.ndarray
    dh: float
    D: tuple  # per view, mm
    S_f: tuple  # per view, mm/px
    S: tuple  # per view, mm^2
    re_left: float
    re_right: float
    r_e: float
    d_e: float
    reprojection_error: float
    state: str = ""

    def __post_init__(self):
        if self.reprojection_error < 0:
            raise InvariantError("negative reprojection error")

    @property
    def S_mean(self):
        """Geometric mean of the per-view areas; ``r_e == sqrt(S_mean / pi)``."""
        return float(np.sqrt(self.S[0] * self.S[1]))


def undistorted_area(camera, contour):
    """Shoelace area of a pixel contour after removing lens distortion.

    Distortion stretches or shrinks the image locally, so an area measured on
    raw pixels does not match the pinhole scale factor.
    """
    xy = ideal_pixels(camera, np.asarray(contour, dtype=np.float64).reshape(-1, 2))
    x, y = xy[:, 0], xy[:, 1]
    return float(abs(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def measure_particle(rig, axis, uv_l, uv_r, contour_l, contour_r, t_us, mode="consistent", state=""):
    """Triangulate a matched pair and convert both contours to an equivalent size.

    ``uv_l``/``uv_r`` are raw pixel centroids and the contours raw pixel
    polygons; areas and image distances are evaluated in ideal pixels.
    """
    P, err = triangulate(rig, uv_l, uv_r)
    Ds, Sfs, Ss, res = [], [], [], []
    for cam, uv, contour in ((rig.left, uv_l, contour_l), (rig.right, uv_r, contour_r)):
        D = float(np.linalg.norm(cam.to_camera(P)))
        Sf = scale_factor(cam, D, object_distance(cam, ideal_pixels(cam, np.asarray(uv, dtype=np.float64))), mode)
        S, r_e, _ = equivalent_radius(undistorted_area(cam, contour), Sf)
        Ds.append(D)
        Sfs.append(Sf)
        Ss.append(S)
        res.append(r_e)
    r_e = float(np.sqrt(res[0] * res[1]))
    return ParticleMeasurement(t_us=t_us, centroid_w=P, dh=separation_height(axis, P), D=tuple(Ds),
                               S_f=tuple(Sfs), S=tuple(Ss), re_left=res[0], re_right=res[1], r_e=r_e,
                               d_e=2.0 * r_e, reprojection_error=err, state=state)


def size_histogram(radii, bin_width=0.05, prominence=0.2):
    """Fixed-width histogram of equivalent radii and its prominent modes.

    Modes are interior local maxima whose prominence is at least
    ``prominence`` times the tallest bin. Returns ``(counts, edges, modes)``
    with modes as bin-centre radii.
    """
    r = np.asarray(radii, dtype=np.float64)
    if r.size == 0:
        raise InputError("size histogram needs at least one measurement")
    lo = np.floor(r.min() / bin_width) * bin_width
    n = max(1, int(np.floor((r.max() - lo) / bin_width)) + 1)
    edges = lo + bin_width * np.arange(n + 1)
    idx = np.clip(((r - lo) / bin_width).astype(int), 0, n - 1)
    counts = np.bincount(idx, minlength=n)
    padded = np.concatenate([[0], counts, [0]])
    peaks, _ = find_peaks(padded, prominence=max(prominence * counts.max(), 1e-9))
    centers = 0.5 * (edges[:-1] + edges[1:])
    return counts, edges, [float(centers[p - 1]) for p in peaks]

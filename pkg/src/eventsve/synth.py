"""Synthetic combustion scenes, sensor simulators and run evaluation.

The scene lives around a backdrop plane that faces the SVE camera. The
burning column, its surface glow and the flame plume are painted on that
plane; particles are spheres near it; smoke puffs are Gaussian blobs of
optical depth anywhere in front of it. Every camera renders from the same
3-D description, so the stereo views and the SVE frame agree.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.special import erfc

from . import kernels
from .errors import ConfigError, InputError
from .events import EventStream
from .stereo import (CameraModel, StereoRig, project, reference_rig, undistort)
from .sve import RawSveMosaic

STATES = ("combusting", "extinguished", "partial")
PUFF_CUTOFF = 5.0


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.15
    event_noise_rate: float = 0.2  # events / px / s
    pixel_jitter: float = 0.5  # px, for synthetic point tracks
    transmittances: tuple = (1.0, 0.25, 0.0625, 0.015625)
    seed: int = 0
    dt_us: float = 10.0
    bit_depth: int = 16
    gain: float = 2000.0  # counts per unit radiance at transmittance 1
    read_noise: float = 0.0  # counts
    edge_sigma_px: float = 0.35
    log_floor: float = 1e-3
    chunk_steps: int = 100

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ConfigError("contrast threshold must be positive")
        if self.event_noise_rate < 0 or self.dt_us <= 0:
            raise ConfigError("noise rate must be >= 0 and dt positive")
        if len(self.transmittances) != 4:
            raise ConfigError("the SVE sensor has four transmittances")


# -- scene description -----------------------------------------------------

@dataclass(frozen=True)
class ParticleTruth:
    name: str
    radius: float  # mm
    state: str
    p0: tuple  # mm, position at t = 0
    velocity: tuple = (0.0, 0.0, 0.0)  # mm / us
    wobble_amp: float = 0.0  # mm, circular wobble in the backdrop plane
    wobble_period_us: float = 1000.0
    radiance: float = 1.0  # at t = 0; extinguished particles use it as albedo
    log_rate: float = 0.0  # d(log radiance)/dt per us

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"particle {self.name}: radius must be positive")
        if self.state not in STATES:
            raise ConfigError(f"particle {self.name}: unknown state {self.state!r}")

    def position(self, t, plane_axes):
        t = np.asarray(t, dtype=np.float64)
        p = np.asarray(self.p0)[None, :] + np.asarray(self.velocity)[None, :] * t.reshape(-1, 1)
        if self.wobble_amp:
            ph = 2.0 * np.pi * t.reshape(-1, 1) / self.wobble_period_us
            e1, e2 = plane_axes
            p = p + self.wobble_amp * (np.cos(ph) * e1 + np.sin(ph) * e2) - self.wobble_amp * e1
        return p if t.ndim else p[0]

    def radiance_at(self, t, background):
        if self.state == "extinguished":
            return self.radiance * background
        return self.radiance * np.exp(self.log_rate * np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class SmokePuff:
    p0: tuple
    velocity: tuple
    sigma: float  # mm
    depth: float  # peak line-of-sight optical depth

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.asarray(self.p0)[None, :] + np.asarray(self.velocity)[None, :] * t.reshape(-1, 1)


@dataclass(frozen=True)
class Backdrop:
    ambient: float = 1.0
    column_radius: float = 4.0  # mm
    column_radiance: float = 2.0
    surface_radiance: float = 60.0
    surface_width: float = 1.0  # mm
    flame_peak: float = 30.0
    flame_width: float = 5.0  # mm
    flame_length: float = 14.0  # mm


@dataclass(frozen=True)
class SceneTruth:
    particles: tuple
    P1: tuple  # burning-surface centre on the column axis
    P2: tuple  # point further up the axis
    plane_normal: tuple  # backdrop plane normal, towards the SVE camera
    puffs: tuple = ()
    base_transmission: float = 0.95
    airlight: float = 6.0
    backdrop: Backdrop = field(default_factory=Backdrop)
    duration_us: float = 6000.0
    rig: StereoRig | None = None
    sve_camera: CameraModel | None = None

    def __post_init__(self):
        if not 0.0 < self.base_transmission <= 1.0:
            raise ConfigError("base transmission must lie in (0, 1]")
        if self.duration_us <= 0:
            raise ConfigError("scene duration must be positive")

    @property
    def n_hat(self):
        d = np.asarray(self.P2, dtype=np.float64) - np.asarray(self.P1)
        return d / np.linalg.norm(d)

    @property
    def plane_axes(self):
        """In-plane unit vectors (lateral, up)."""
        n = np.asarray(self.plane_normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        up = self.n_hat - (self.n_hat @ n) * n
        up /= np.linalg.norm(up)
        return np.cross(up, n), up

    def particle(self, name):
        for p in self.particles:
            if p.name == name:
                return p
        raise KeyError(name)

    def separation_height(self, P):
        return (np.asarray(P) - np.asarray(self.P1)) @ self.n_hat


# -- serialization ---------------------------------------------------------

def _tolist(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, list)):
        return [_tolist(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def scene_to_dict(truth):
    d = {
        "particles": [{k: _tolist(v) for k, v in asdict(p).items()} for p in truth.particles],
        "puffs": [{k: _tolist(v) for k, v in asdict(p).items()} for p in truth.puffs],
        "column": {"P1": _tolist(truth.P1), "P2": _tolist(truth.P2)},
        "plane_normal": _tolist(truth.plane_normal),
        "base_transmission": truth.base_transmission,
        "airlight": truth.airlight,
        "backdrop": asdict(truth.backdrop),
        "duration_us": truth.duration_us,
    }
    if truth.rig is not None:
        d["rig"] = truth.rig.to_dict()
    if truth.sve_camera is not None:
        d["sve_camera"] = truth.sve_camera.to_dict()
    return d


def scene_from_dict(d):
    try:
        particles = tuple(ParticleTruth(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                          for p in d["particles"])
        puffs = tuple(SmokePuff(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                      for p in d.get("puffs", []))
        rig = StereoRig.from_dict(d["rig"]) if "rig" in d else None
        sve = CameraModel.from_dict(d["sve_camera"]) if "sve_camera" in d else None
        return SceneTruth(particles=particles, P1=tuple(d["column"]["P1"]), P2=tuple(d["column"]["P2"]),
                          plane_normal=tuple(d["plane_normal"]), puffs=puffs,
                          base_transmission=float(d.get("base_transmission", 0.95)),
                          airlight=float(d.get("airlight", 6.0)), backdrop=Backdrop(**d.get("backdrop", {})),
                          duration_us=float(d.get("duration_us", 6000.0)), rig=rig, sve_camera=sve)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed scene description: {exc}") from None


def save_scene(truth, path):
    Path(path).write_text(yaml.safe_dump(scene_to_dict(truth), sort_keys=True))


def load_scene(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing scene file {path}")
    return scene_from_dict(yaml.safe_load(path.read_text()))


# -- default scene ---------------------------------------------------------

SCENE_CENTRE = (0.0, -14.0, 108.0)
DEFAULT_DH = 15.94


def look_at(centre, target, down_hint=(0.0, 1.0, 0.0)):
    """Rotation and translation of a camera at ``centre`` looking at ``target``."""
    z = np.asarray(target, dtype=np.float64) - centre
    z /= np.linalg.norm(z)
    x = np.cross(down_hint, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return R, -R @ np.asarray(centre, dtype=np.float64)


def sve_fixture(rig, centre=SCENE_CENTRE, distance=160.0, f=1700.0, width=640, height=512):
    """SVE camera on the bisector of the two event views, aimed at ``centre``."""
    c = np.asarray(centre, dtype=np.float64)
    b = sum((cam.center - c) / np.linalg.norm(cam.center - c) for cam in rig.cameras)
    b /= np.linalg.norm(b)
    R, t = look_at(c + distance * b, c)
    cam = CameraModel(f=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, distortion=(0, 0, 0, 0, 0),
                      R=R, t=t, width=width, height=height)
    return cam, b


def default_scene(rig=None, duration_us=6000.0):
    """Three particles, one per radiative state, beside a bright flame core in light smoke.

    The flame zone is the brightest structure so it forms the top smoke-map
    region; the particles sit in clearer air to either side.
    """
    rig = reference_rig() if rig is None else rig
    sve, normal = sve_fixture(rig)
    c = np.asarray(SCENE_CENTRE)
    up = np.array([0.0, -1.0, 0.0])
    up = up - (up @ normal) * normal
    up /= np.linalg.norm(up)
    lat = np.cross(up, normal)
    P1 = c - 10.0 * up
    P2 = P1 + 30.0 * up

    def at(a, h):
        return tuple(P1 + a * lat + h * up)

    C = 0.15
    particles = (
        ParticleTruth("A", 0.5, "combusting", at(9.0, DEFAULT_DH), radiance=6.0, log_rate=1.5 * C / 1000.0),
        ParticleTruth("B", 1.5, "partial", at(-11.0, 4.0), velocity=tuple(1.2e-3 * up), radiance=8.0,
                      log_rate=-0.6 * C / 1000.0),
        ParticleTruth("C", 1.0, "extinguished", at(-4.0, 12.0), wobble_amp=0.03, wobble_period_us=500.0,
                      radiance=0.2),
    )

    def puff(a, h, depth_off, va, vh, sigma, tau):
        p0 = np.asarray(at(a, h)) + depth_off * normal
        return SmokePuff(tuple(p0), tuple(va * lat + vh * up), sigma, tau)

    puffs = (
        puff(-16.0, 20.0, 4.0, 0.8e-3, 0.3e-3, 1.8, 0.4),
        puff(15.0, 23.0, 6.0, -0.7e-3, 0.5e-3, 2.0, 0.4),
        puff(14.0, -5.0, 3.0, 0.3e-3, 0.8e-3, 1.6, 0.35),
        puff(-14.0, -4.0, 5.0, 0.6e-3, 0.7e-3, 0.9, 0.4),
        puff(12.0, 9.0, 2.0, 0.5e-3, -0.6e-3, 0.8, 0.35),
        puff(-13.0, 27.0, 3.0, -0.4e-3, -0.7e-3, 1.0, 0.4),
    )
    return SceneTruth(particles=particles, P1=tuple(P1), P2=tuple(P2), plane_normal=tuple(normal), puffs=puffs,
                      duration_us=duration_us, rig=rig, sve_camera=sve,
                      backdrop=Backdrop(surface_radiance=200.0, flame_peak=150.0, flame_width=3.0))


# -- rendering -------------------------------------------------------------

def pixel_rays(camera, uv):
    """Unit world-frame rays through pixels ``uv`` (NaN outside the undistortion zone)."""
    xy = undistort(camera, uv, strict=False)
    d = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1) @ camera.R
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def backdrop_radiance(truth, origin, dirs):
    """Static radiance of the backdrop plane seen along ``dirs`` from ``origin``."""
    n = np.asarray(truth.plane_normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    P1 = np.asarray(truth.P1, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ((P1 - origin) @ n) / denom
    X = origin + lam[..., None] * dirs
    lat, up = truth.plane_axes
    a = (X - P1) @ lat
    h = (X - P1) @ up
    b = truth.backdrop
    J = np.full(a.shape, b.ambient)
    inside = np.abs(a) <= b.column_radius
    J = np.where(inside & (h < 0), b.column_radiance, J)
    surf = np.exp(-0.5 * (h / b.surface_width) ** 2) * (np.abs(a) <= b.column_radius)
    J = J + b.surface_radiance * surf
    # plume fades in over the surface width so the backdrop stays continuous
    rise = 0.5 * erfc(-h / (np.sqrt(2.0) * b.surface_width))
    plume = rise * np.exp(-0.5 * (a / b.flame_width) ** 2 - np.maximum(h, 0.0) / b.flame_length)
    J = J + b.flame_peak * plume
    return np.where(np.isfinite(J) & (lam > 0), J, b.ambient)


def _ray_point_dist2(origin, dirs, points):
    """Squared distance from each point (T, 3) to each ray (N, 3) -> (T, N)."""
    w = points - origin
    proj = w @ dirs.T
    return np.maximum((w * w).sum(axis=1)[:, None] - proj * proj, 0.0), proj


def _columns_near(camera, uv, X, radius_mm, margin_px):
    """Indices of pixels ``uv`` within the projected box of points X (T, 3) grown by the radius."""
    Xc = camera.to_camera(X)
    front = Xc[:, 2] > 0
    if uv is None or not np.any(front):
        return None if uv is None else np.empty(0, dtype=np.int64)
    pix = project(camera, X[front])
    r = radius_mm * camera.f / Xc[front, 2].min() + margin_px
    lo, hi = pix.min(axis=0) - r, pix.max(axis=0) + r
    return np.nonzero((uv[:, 0] >= lo[0]) & (uv[:, 0] <= hi[0]) & (uv[:, 1] >= lo[1]) & (uv[:, 1] <= hi[1]))[0]


def scene_intensity(truth, camera, dirs, background, times, edge_sigma_px=0.35, uv=None):
    """Observed intensity I = J t + A (1 - t) at ``times`` for rays ``dirs``; shape (T, N).

    When the pixel coordinates ``uv`` of the rays are given, each particle and
    puff is only evaluated on pixels near its projection. Skipped particle
    terms are below 1e-12; puffs are cut at ``PUFF_CUTOFF`` standard
    deviations, where their optical depth is below 4e-6 of the peak.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    origin = camera.center
    J = np.broadcast_to(background, (len(times),) + background.shape).copy()
    lat_up = truth.plane_axes
    for p in truth.particles:
        X = p.position(times, lat_up)
        cols = _columns_near(camera, uv, X, p.radius, 8.0 * edge_sigma_px + 2.0)
        sub = dirs if cols is None else dirs[cols]
        if len(sub) == 0:
            continue
        d2, depth = _ray_point_dist2(origin, sub, X)
        sigma = edge_sigma_px * np.abs(depth) / camera.f  # mm at the particle
        cov = 0.5 * erfc((np.sqrt(d2) - p.radius) / (np.sqrt(2.0) * sigma))
        cov = np.where(depth > 0, cov, 0.0)
        bg = background_at(truth, X) if p.state == "extinguished" else 0.0
        Jp = np.broadcast_to(p.radiance_at(times, bg), times.shape)[:, None]
        if cols is None:
            J = J * (1.0 - cov) + Jp * cov
        else:
            J[:, cols] = J[:, cols] * (1.0 - cov) + Jp * cov
    tau = np.zeros_like(J)
    for s in truth.puffs:
        X = s.position(times)
        cols = _columns_near(camera, uv, X, PUFF_CUTOFF * s.sigma, 2.0)
        sub = dirs if cols is None else dirs[cols]
        if len(sub) == 0:
            continue
        d2, depth = _ray_point_dist2(origin, sub, X)
        val = np.where(depth > 0, s.depth * np.exp(-0.5 * d2 / (s.sigma * s.sigma)), 0.0)
        if cols is None:
            tau += val
        else:
            tau[:, cols] += val
    trans = truth.base_transmission * np.exp(-tau)
    return J * trans + truth.airlight * (1.0 - trans)


def background_at(truth, X):
    """Backdrop radiance behind world points X (T, 3), seen along the plane normal."""
    n = np.asarray(truth.plane_normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    X = np.atleast_2d(X)
    return backdrop_radiance(truth, X + 50.0 * n, np.broadcast_to(-n, X.shape))


def sve_radiance(truth, t, camera=None, edge_sigma_px=0.35):
    cam = truth.sve_camera if camera is None else camera
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    uv = np.stack([u.ravel(), v.ravel()], axis=-1)
    dirs = pixel_rays(cam, uv)
    bg = backdrop_radiance(truth, cam.center, dirs)
    return scene_intensity(truth, cam, dirs, bg, [t], edge_sigma_px)[0].reshape(cam.height, cam.width)


def mosaic_from_radiance(radiance, config=SimConfig(), rng=None):
    """Scale by each macro-pixel's transmittance, add read noise, quantize and clip."""
    H, W = radiance.shape
    if H % 2 or W % 2:
        raise InputError("radiance image needs even dimensions")
    tau = np.empty((H, W))
    taus = config.transmittances
    tau[0::2, 0::2], tau[0::2, 1::2], tau[1::2, 0::2], tau[1::2, 1::2] = taus
    counts = config.gain * tau * radiance
    if config.read_noise > 0:
        rng = np.random.default_rng(config.seed) if rng is None else rng
        counts = counts + rng.normal(0.0, config.read_noise, counts.shape)
    vmax = 2 ** config.bit_depth - 1
    return RawSveMosaic(np.clip(np.round(counts), 0, vmax), taus, bit_depth=config.bit_depth)


def render_exposures(truth, t, config=SimConfig()):
    """Raw SVE mosaic of the scene at time ``t`` (us)."""
    rng = np.random.default_rng([config.seed, 7, int(round(t))])
    return mosaic_from_radiance(sve_radiance(truth, t, edge_sigma_px=config.edge_sigma_px), config, rng)


# -- event simulation ------------------------------------------------------

def _dynamic_mask(truth, camera, t_grid, margin_px=4.0):
    """Pixels whose intensity may change: neighbourhoods of projected particles and puffs."""
    H, W = camera.height, camera.width
    mask = np.zeros((H, W), dtype=bool)
    lat_up = truth.plane_axes
    items = [(p.position(t_grid, lat_up), p.radius + 3 * p.wobble_amp, 1.0) for p in truth.particles]
    items += [(s.position(t_grid), PUFF_CUTOFF * s.sigma, 0.0) for s in truth.puffs]
    for X, rad_mm, extra in items:
        Xc = camera.to_camera(X)
        front = Xc[:, 2] > 0
        if not np.any(front):
            continue
        X, Xc = X[front], Xc[front]
        with np.errstate(invalid="ignore"):
            uv = project(camera, X)
        r_px = rad_mm * camera.f / Xc[:, 2] + margin_px + extra
        for (u, v), r in zip(uv, r_px):
            u0, u1 = int(max(0, np.floor(u - r))), int(min(W, np.ceil(u + r) + 1))
            v0, v1 = int(max(0, np.floor(v - r))), int(min(H, np.ceil(v + r) + 1))
            if u0 < u1 and v0 < v1:
                mask[v0:v1, u0:u1] = True
    return mask


def _noise_events(shape, interval, rate, seed, view_index):
    """Poisson background events, independent per pixel.

    Per-pixel counts come from one generator keyed by (seed, view), so the
    draw does not depend on any processing order.
    """
    H, W = shape
    t0, t1 = interval
    lam = rate * (t1 - t0) * 1e-6
    if lam <= 0:
        return (np.empty(0, np.int64),) * 3 + (np.empty(0, np.int8),)
    rng = np.random.default_rng([seed, 11, view_index])
    counts = rng.poisson(lam, H * W)
    pix = np.repeat(np.arange(H * W), counts)
    t = np.floor(rng.uniform(t0, t1, pix.size)).astype(np.int64)
    p = np.where(rng.random(pix.size) < 0.5, 1, -1).astype(np.int8)
    return t, pix % W, pix // W, p


def simulate_events(truth, camera, interval, config=SimConfig(), view_id="left", backend=None):
    """Integrate-and-fire event stream of ``camera`` over ``interval`` (us)."""
    t0, t1 = interval
    if t0 < 0 or t1 > truth.duration_us + 1e-9 or t1 <= t0:
        raise InputError(f"interval {interval} outside the scene duration")
    steps = int(round((t1 - t0) / config.dt_us))
    t_grid = t0 + config.dt_us * np.arange(steps + 1)
    mask = _dynamic_mask(truth, camera, t_grid[::10])
    vv, uu = np.nonzero(mask)
    uv = np.stack([uu, vv], axis=-1).astype(np.float64)
    dirs = pixel_rays(camera, uv)
    ok = np.isfinite(dirs).all(axis=1)
    uu, vv, dirs = uu[ok], vv[ok], dirs[ok]
    bg = backdrop_radiance(truth, camera.center, dirs)
    C = config.contrast_threshold
    ts, idx, ps = [], [], []
    ref = None
    chunk = max(1, min(config.chunk_steps, int(4e6 // max(len(dirs), 1))))
    uv = np.stack([uu, vv], axis=-1).astype(np.float64)
    for s in range(0, steps, chunk):
        tt = t_grid[s:min(steps, s + chunk) + 1]
        logi = np.log(scene_intensity(truth, camera, dirs, bg, tt, config.edge_sigma_px, uv) + config.log_floor)
        if ref is None:
            ref = np.ascontiguousarray(logi[0].copy())
        t, i, p = kernels.integrate_fire(logi, tt, ref, C, backend=backend)
        ts.append(t)
        idx.append(i)
        ps.append(p)
    t = np.concatenate(ts) if ts else np.empty(0, np.int64)
    i = np.concatenate(idx) if idx else np.empty(0, np.int64)
    p = np.concatenate(ps) if ps else np.empty(0, np.int8)
    u, v = uu[i], vv[i]
    vi = 0 if view_id == "left" else 1
    nt, nu, nv, npol = _noise_events((camera.height, camera.width), (t0, t1), config.event_noise_rate,
                                     config.seed, vi)
    t = np.concatenate([t, nt])
    u = np.concatenate([u, nu])
    v = np.concatenate([v, nv])
    p = np.concatenate([p, npol])
    order = np.lexsort((p, u, v, t))
    return EventStream(view_id, t[order], u[order], v[order], p[order], (camera.width, camera.height))


def linear_track_events(p0, velocity, t0, duration, n, jitter=0.0, rng=None):
    """Point events along ``p(t) = p0 + v (t - t0)`` with optional Gaussian jitter.

    Returns ``(xy, t)`` with timestamps uniform in ``[t0, t0 + duration)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    t = np.sort(rng.uniform(t0, t0 + duration, n))
    xy = np.asarray(p0, dtype=np.float64)[None, :] + np.asarray(velocity)[None, :] * (t - t0)[:, None]
    if jitter > 0:
        xy = xy + rng.normal(0.0, jitter, xy.shape)
    return xy, t


# -- ground truth helpers --------------------------------------------------

def particle_tracks(truth, camera, times):
    """Projected centres (T, 2) and image radii (T,) of every particle."""
    out = {}
    for p in truth.particles:
        X = p.position(np.asarray(times, dtype=np.float64), truth.plane_axes)
        uv = project(camera, X)
        D = np.linalg.norm(camera.to_camera(X), axis=1)
        out[p.name] = (uv, p.radius * camera.f / D)
    return out


def registration_homography(truth, camera):
    """Homography from ``camera``'s normalized coordinates to SVE pixels via the backdrop plane."""
    s = truth.sve_camera
    n = np.asarray(truth.plane_normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    d0 = n @ np.asarray(truth.P1)
    Ce = camera.center
    K = np.array([[s.f, 0, s.cx], [0, s.f, s.cy], [0, 0, 1.0]])
    M = s.R + np.outer(s.R @ Ce + s.t, n) / (d0 - n @ Ce)
    H = K @ M @ camera.R.T
    return H / H[2, 2]


def scale_targets(rig=None, seed=2024, n=10, lengths=(60.0, 95.0)):
    """Bars of known length inside the rig's common valid volume: ``(A, B, L)``."""
    from .stereo import in_valid_region

    rig = reference_rig() if rig is None else rig
    rng = np.random.default_rng(seed)
    A, B = [], []
    while len(A) < n:
        c = rng.uniform([-40, -40, 90], [30, 20, 190])
        L = rng.uniform(*lengths)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        a, b = c - 0.5 * L * d, c + 0.5 * L * d
        ends = np.stack([a, b])
        if all(np.all(in_valid_region(cam, ends)) for cam in rig.cameras):
            A.append(a)
            B.append(b)
    A, B = np.array(A), np.array(B)
    return A, B, np.linalg.norm(B - A, axis=1)


# -- evaluation ------------------------------------------------------------

@dataclass
class RunEvaluation:
    per_particle: dict
    detections: int
    false_positives: int
    detection_rate: float
    dh_abs_percentiles: dict
    re_rel_percentiles: dict

    def to_dict(self):
        return {"per_particle": self.per_particle, "detections": self.detections,
                "false_positives": self.false_positives, "detection_rate": self.detection_rate,
                "dh_abs_percentiles": self.dh_abs_percentiles, "re_rel_percentiles": self.re_rel_percentiles}


def evaluate_run(truth, measurements, gate_mm=2.0, windows=None):
    """Match measurements to the nearest true particle at their reference time.

    A measurement farther than ``gate_mm`` from every particle counts as a
    false positive. ``windows`` (number of frames) sets the detection-rate
    denominator; by default each particle is expected once per window.
    """
    lat_up = truth.plane_axes
    per = {p.name: {"dh_err": [], "re_err": [], "re_rel": [], "dh_true": [], "dh": [], "re": [],
                    "radius": p.radius, "n": 0} for p in truth.particles}
    fp = 0
    for m in measurements:
        best, best_d = None, np.inf
        for p in truth.particles:
            X = p.position(m.t_us, lat_up)
            dist = float(np.linalg.norm(np.asarray(m.centroid_w) - X))
            if dist < best_d:
                best, best_d = p, dist
        if best is None or best_d > gate_mm:
            fp += 1
            continue
        rec = per[best.name]
        X = best.position(m.t_us, lat_up)
        dh_true = float(truth.separation_height(X))
        rec["n"] += 1
        rec["dh_true"].append(dh_true)
        rec["dh"].append(float(m.dh))
        rec["dh_err"].append(float(m.dh) - dh_true)
        rec["re"].append(float(m.r_e))
        rec["re_err"].append(float(m.r_e) - best.radius)
        rec["re_rel"].append((float(m.r_e) - best.radius) / best.radius)
    for rec in per.values():
        rec["re_median"] = float(np.median(rec["re"])) if rec["re"] else None
        rec["re_median_rel"] = ((rec["re_median"] - rec["radius"]) / rec["radius"]) if rec["re"] else None
        rec["dh_max_abs_err"] = float(np.max(np.abs(rec["dh_err"]))) if rec["dh_err"] else None
    expected = len(truth.particles) * (windows if windows else 1)
    detections = sum(rec["n"] for rec in per.values())
    dh_all = np.abs(np.concatenate([rec["dh_err"] for rec in per.values()] + [[]]))
    re_all = np.abs(np.concatenate([rec["re_rel"] for rec in per.values()] + [[]]))
    pct = lambda x: {str(q): float(np.percentile(x, q)) for q in (50, 90, 100)} if x.size else {}  # noqa: E731
    return RunEvaluation(per, detections, fp, min(1.0, detections / max(expected, 1)), pct(dh_all), pct(re_all))


def average_gradient(image, roi=None):
    """Mean of sqrt((gx^2 + gy^2) / 2) with forward differences over ``roi``.

    ``roi`` is ``(row0, row1, col0, col1)`` (half-open); differences use the
    pixel to the right and below, so the last row and column are dropped.
    """
    img = np.asarray(image, dtype=np.float64)
    if roi is None:
        roi = (0, img.shape[0], 0, img.shape[1])
    r0, r1, c0, c1 = (int(x) for x in roi)
    if not (0 <= r0 < r1 <= img.shape[0] and 0 <= c0 < c1 <= img.shape[1]):
        raise InputError(f"roi {roi} outside the image or empty")
    sub = img[r0:r1, c0:c1]
    if sub.shape[0] < 2 or sub.shape[1] < 2:
        raise InputError("roi needs at least 2x2 pixels")
    gx = sub[:-1, 1:] - sub[:-1, :-1]
    gy = sub[1:, :-1] - sub[:-1, :-1]
    return float(np.mean(np.sqrt((gx * gx + gy * gy) / 2.0)))

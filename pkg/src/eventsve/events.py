"""Event streams, particle extraction, motion compensation and HDR gating."""
from __future__ import annotations

import io
import logging
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from . import kernels
from .errors import (ConfigError, DegenerateObservationError, InputError, InvariantError, ParseError)
from .stereo import undistort

log = logging.getLogger(__name__)

VIEWS = ("left", "right")
STATES = ("combusting", "extinguished", "partial")
UNCLASSIFIABLE = "unclassifiable"
MAX_SYNC_OFFSET_US = 12.0
CSV_HEADER = "t_us,u,v,p"
BINARY_MAGIC = b"EVT1"
RECORD = np.dtype([("t", "<u4"), ("u", "<u2"), ("v", "<u2"), ("p", "i1")])


@dataclass(frozen=True)
class Event:
    t: int
    u: int
    v: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events of one view; ``t`` in microseconds since the trigger."""

    view_id: str
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    sensor_dims: tuple = (1280, 1024)  # (width, height)
    sync_offset_us: float = 0.0

    def __post_init__(self):
        if self.view_id not in VIEWS:
            raise InputError(f"view_id must be one of {VIEWS}, got {self.view_id!r}")
        t = np.asarray(self.t, dtype=np.int64)
        u = np.asarray(self.u, dtype=np.int64)
        v = np.asarray(self.v, dtype=np.int64)
        p = np.asarray(self.p, dtype=np.int8)
        if not (len(t) == len(u) == len(v) == len(p)):
            raise InputError("event field arrays differ in length")
        if abs(self.sync_offset_us) > MAX_SYNC_OFFSET_US:
            raise InvariantError(f"sync offset {self.sync_offset_us} us exceeds {MAX_SYNC_OFFSET_US} us",
                                 locus=f"stream {self.view_id}")
        w, h = self.sensor_dims
        checks = ((t < 0, "negative timestamp"), ((u < 0) | (u >= w) | (v < 0) | (v >= h), "pixel outside sensor"),
                  (np.abs(p) != 1, "polarity not +/-1"))
        for bad, what in checks:
            if np.any(bad):
                i = int(np.argmax(bad))
                raise InvariantError(what, locus=f"{self.view_id} event {i}")
        if len(t) > 1 and np.any(np.diff(t) < 0):
            i = int(np.argmax(np.diff(t) < 0)) + 1
            raise InvariantError("timestamps decrease", locus=f"{self.view_id} event {i}")
        for name, arr in (("t", t), ("u", u), ("v", v), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sensor_dims", tuple(int(x) for x in self.sensor_dims))

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return Event(int(self.t[i]), int(self.u[i]), int(self.v[i]), int(self.p[i]))

    @classmethod
    def from_arrays(cls, view_id, t, u, v, p, sensor_dims=(1280, 1024), sync_offset_us=0.0):
        """Build a stream from unsorted arrays; a stable sort on t is applied with a warning."""
        t = np.asarray(t, dtype=np.int64)
        if len(t) > 1 and np.any(np.diff(t) < 0):
            warnings.warn(f"{view_id} stream timestamps not monotone; sorted", RuntimeWarning, stacklevel=2)
            order = np.argsort(t, kind="stable")
            t, u, v, p = t[order], np.asarray(u)[order], np.asarray(v)[order], np.asarray(p)[order]
        return cls(view_id, t, u, v, p, sensor_dims, sync_offset_us)

    def slice_time(self, t0, t1):
        """Indices of events with ``t0 <= t < t1``."""
        return slice(int(np.searchsorted(self.t, t0, "left")), int(np.searchsorted(self.t, t1, "left")))


# -- codecs ----------------------------------------------------------------

def _rebase(t, u, v, p):
    trig = np.nonzero(p == 0)[0]
    if trig.size == 0:
        return t, u, v, p
    if trig.size > 1:
        warnings.warn("several trigger events; using the first", RuntimeWarning, stacklevel=3)
    t0 = t[trig[0]]
    keep = (p != 0) & (t >= t0)
    if np.any((p != 0) & (t < t0)):
        warnings.warn("dropping events recorded before the trigger", RuntimeWarning, stacklevel=3)
    return t[keep] - t0, u[keep], v[keep], p[keep]


def _parse_csv(data):
    text = data.decode("ascii", errors="strict") if isinstance(data, bytes) else data
    rows = []
    offset = 0
    lines = text.splitlines(keepends=True)
    if not lines:
        return [np.empty(0, np.int64)] * 4
    first = lines[0].strip()
    start = 0
    if first.replace(" ", "") == CSV_HEADER:
        offset += len(lines[0].encode())
        start = 1
    for line in lines[start:]:
        s = line.strip()
        if s:
            parts = s.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError
                rec = tuple(int(x) for x in parts)
            except ValueError:
                raise ParseError(f"malformed event record {s!r}", offset=offset) from None
            if rec[3] not in (-1, 0, 1):
                raise ParseError(f"polarity must be -1, 0 or 1 in {s!r}", offset=offset)
            rows.append(rec)
        offset += len(line.encode())
    if not rows:
        return [np.empty(0, np.int64)] * 4
    arr = np.array(rows, dtype=np.int64)
    return [arr[:, i] for i in range(4)]


def _parse_binary(data):
    if len(data) < 8:
        raise ParseError("truncated binary header", offset=len(data))
    if data[:4] != BINARY_MAGIC:
        raise ParseError("bad magic bytes", offset=0)
    (n,) = struct.unpack("<I", data[4:8])
    need = 8 + n * RECORD.itemsize
    if len(data) < need:
        whole = (len(data) - 8) // RECORD.itemsize
        raise ParseError(f"binary stream declares {n} records but holds {whole}",
                         offset=8 + whole * RECORD.itemsize)
    if len(data) > need:
        raise ParseError("trailing bytes after the last record", offset=need)
    rec = np.frombuffer(data, dtype=RECORD, count=n, offset=8)
    bad = np.nonzero(~np.isin(rec["p"], (-1, 0, 1)))[0]
    if bad.size:
        raise ParseError("polarity must be -1, 0 or 1", offset=8 + int(bad[0]) * RECORD.itemsize)
    return [rec[k].astype(np.int64) for k in ("t", "u", "v", "p")]


def load_stream(source, view_id="left", sensor_dims=(1280, 1024), sync_offset_us=0.0, fmt=None):
    """Read a CSV or binary event file (format sniffed from the magic bytes)."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise InputError(f"missing event stream {path}")
        data = path.read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
        if isinstance(data, str):
            data = data.encode()
    if fmt is None:
        fmt = "binary" if data[:4] == BINARY_MAGIC else "csv"
    t, u, v, p = _parse_binary(data) if fmt == "binary" else _parse_csv(data)
    t, u, v, p = _rebase(t, u, v, p)
    return EventStream.from_arrays(view_id, t, u, v, p, sensor_dims, sync_offset_us)


def encode_csv(stream):
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    if len(stream):
        np.savetxt(buf, np.column_stack([stream.t, stream.u, stream.v, stream.p]), fmt="%d", delimiter=",")
    return buf.getvalue().encode("ascii")


def encode_binary(stream):
    if len(stream) and (stream.t.max() > 0xFFFFFFFF or max(stream.u.max(), stream.v.max()) > 0xFFFF):
        raise InputError("event fields exceed the binary record range")
    rec = np.empty(len(stream), dtype=RECORD)
    rec["t"], rec["u"], rec["v"], rec["p"] = stream.t, stream.u, stream.v, stream.p
    return BINARY_MAGIC + struct.pack("<I", len(stream)) + rec.tobytes()


def save_stream(stream, path, fmt=None):
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix in (".bin", ".evt") else "csv"
    path.write_bytes(encode_binary(stream) if fmt == "binary" else encode_csv(stream))
    return path


# -- parameters and observation types -------------------------------------

@dataclass(frozen=True)
class EventParams:
    r_s: float = 4.0  # px
    r_t: float = 500.0  # us
    min_core: int = 8
    window_us: float = 1000.0
    theta_pos: float = 0.8
    theta_vis: float | None = None  # None -> the smoke map's upper region boundary
    kappa: float = 2.0  # inside/ring radiance ratio that counts as particle-like
    ring_px: int = 3
    alpha: float = 3.0  # alpha-shape circumradius bound, px
    density_radius: float = 2.0  # px, neighbourhood for the fringe cut
    density_floor: float = 0.5  # fraction of the median neighbour count; 0 disables
    min_events: int = 12
    mixed_fraction: float = 0.15
    eccentricity_flag: float = 0.9

    def __post_init__(self):
        if self.r_s <= 0 or self.r_t <= 0 or self.window_us <= 0:
            raise ConfigError("r_s, r_t and the window length must be positive")
        if not 0.5 <= self.theta_pos <= 1.0:
            raise ConfigError("theta_pos must lie in [0.5, 1]")
        if self.min_core < 1 or self.kappa < 1.0:
            raise ConfigError("min_core must be >= 1 and kappa >= 1")


@dataclass(frozen=True)
class EventCluster:
    view_id: str
    window: tuple
    label: int
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def positive_fraction(self):
        return float(np.mean(self.p > 0)) if len(self.p) else 0.0

    @property
    def xy(self):
        return np.column_stack([self.u, self.v]).astype(np.float64)


@dataclass(frozen=True)
class ParticleObservation:
    view_id: str
    window: tuple
    state: str
    events_used: np.ndarray  # (N, 2) compensated coordinates
    velocity: np.ndarray | None  # px/us; None when compensation was impossible
    contour: np.ndarray  # (V, 2) closed polygon, counter-clockwise, last vertex != first
    centroid: np.ndarray
    pixel_area: float
    t_ref: float  # instant the centroid refers to
    flags: tuple = ()

    def __post_init__(self):
        if self.state not in STATES:
            raise InvariantError(f"unknown particle state {self.state!r}", locus=self.view_id)
        lo, hi = self.contour.min(axis=0), self.contour.max(axis=0)
        if np.any(self.centroid < lo - 1e-9) or np.any(self.centroid > hi + 1e-9):
            raise InvariantError("centroid outside the contour bounding box",
                                 locus=f"{self.view_id} window {self.window}")
        if not self.pixel_area > 0:
            raise InvariantError("non-positive contour area", locus=f"{self.view_id} window {self.window}")


@dataclass(frozen=True)
class GateResult:
    accept: bool
    f_mean: float
    contrast: float
    theta_vis: float


# -- clustering ------------------------------------------------------------

def expected_neighbours(density, r_s, r_t):
    """Mean neighbour count of uniform noise with ``density`` events per px per us."""
    return density * np.pi * r_s * r_s * 2.0 * r_t


def iter_windows(stream, window_us, t_end=None):
    """Non-overlapping windows ``[k*dt, (k+1)*dt)`` covering the stream."""
    if t_end is None:
        t_end = int(stream.t[-1]) + 1 if len(stream) else 0
    k = 0
    while k * window_us < t_end:
        yield (k * window_us, (k + 1) * window_us)
        k += 1


def cluster_events(stream, window, params=EventParams()):
    """Density clusters of the events inside ``window``; noise is dropped.

    Clusters come back ordered by their earliest event.
    """
    t0, t1 = window
    if t1 <= t0:
        raise InputError("empty time window")
    sl = stream.slice_time(t0, t1)
    t, u, v, p = stream.t[sl], stream.u[sl], stream.v[sl], stream.p[sl]
    labels = kernels.density_cluster(u, v, t, params.r_s, params.r_t, params.min_core)
    out = []
    for lab in range(int(labels.max(initial=-1)) + 1):
        sel = labels == lab
        out.append(EventCluster(stream.view_id, (t0, t1), lab, t[sel], u[sel], v[sel], p[sel]))
    return out


# -- registration ----------------------------------------------------------

@dataclass(frozen=True)
class Registration:
    """Planar mapping from one event view into HDR pixel coordinates.

    ``H`` acts on undistorted normalized coordinates of the event camera.
    """

    camera: object
    H: np.ndarray
    hdr_shape: tuple  # (height, width)

    def to_hdr(self, uv):
        xy = undistort(self.camera, np.asarray(uv, dtype=np.float64), strict=False)
        h = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1) @ np.asarray(self.H).T
        return h[..., :2] / h[..., 2:3]

    def in_bounds(self, xy):
        h, w = self.hdr_shape
        return (np.isfinite(xy).all(axis=-1) & (xy[..., 0] >= 0) & (xy[..., 0] <= w - 1)
                & (xy[..., 1] >= 0) & (xy[..., 1] <= h - 1))

    def to_dict(self):
        return {"H": [float(x) for x in np.asarray(self.H).ravel()], "hdr_shape": list(self.hdr_shape)}


def footprint_mask(points_hdr, shape, dilate=1):
    """Raster mask of the convex footprint of registered points, dilated by ``dilate`` px."""
    from skimage.draw import polygon as draw_polygon

    mask = np.zeros(shape, dtype=bool)
    pts = np.asarray(points_hdr, dtype=np.float64)
    pts = pts[np.isfinite(pts).all(axis=1)]
    if len(pts) == 0:
        return mask
    ij = np.rint(pts[:, ::-1]).astype(int)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < shape[0]) & (ij[:, 1] >= 0) & (ij[:, 1] < shape[1])
    mask[ij[ok, 0], ij[ok, 1]] = True
    try:
        hull = ConvexHull(pts)
        rr, cc = draw_polygon(pts[hull.vertices, 1], pts[hull.vertices, 0], shape)
        mask[rr, cc] = True
    except (QhullError, ValueError):
        pass
    if dilate > 0:
        mask = ndimage.binary_dilation(mask, iterations=dilate)
    return mask


def _inside_ring_means(values, mask, ring_px):
    ring = ndimage.binary_dilation(mask, iterations=ring_px) & ~mask
    if not mask.any() or not ring.any():
        return np.nan, np.nan
    return float(values[mask].mean()), float(values[ring].mean())


def radiance_contrast(hdr_values, mask, ring_px=3):
    """Log ratio of mean radiance inside ``mask`` to the surrounding ring."""
    inside, ring = _inside_ring_means(hdr_values, mask, ring_px)
    if not np.isfinite(inside) or not np.isfinite(ring):
        return 0.0
    tiny = 1e-12 * max(float(hdr_values.max()), 1.0)
    return float(np.log((inside + tiny) / (ring + tiny)))


# -- classification and geometry ------------------------------------------

def classify_state(cluster, hdr, smoke, registration, params=EventParams()):
    """Radiative state of a cluster from its polarity balance and HDR footprint.

    Returns one of ``STATES`` or ``UNCLASSIFIABLE`` when the footprint does
    not register inside the HDR frame.
    """
    pts = registration.to_hdr(cluster.xy)
    if not np.all(registration.in_bounds(pts)):
        return UNCLASSIFIABLE
    values = hdr.values if hasattr(hdr, "values") else np.asarray(hdr)
    mask = footprint_mask(pts, values.shape, dilate=0)
    contrast = radiance_contrast(values, mask, params.ring_px)
    pos = cluster.positive_fraction
    bright = contrast >= np.log(params.kappa)
    dark = contrast <= -np.log(params.kappa)
    if pos >= params.theta_pos and bright:
        return "combusting"
    if dark and min(pos, 1.0 - pos) >= params.mixed_fraction:
        return "extinguished"
    return "partial"


def select_geometry_events(cluster, state):
    """Events that delineate the particle for the given state, as (t, xy, p)."""
    if state == "combusting":
        sel = cluster.p > 0
    elif state in ("extinguished", "partial"):
        sel = np.ones(len(cluster), dtype=bool)
    else:
        raise InputError(f"cannot select geometry events for state {state!r}")
    if not np.any(sel):
        raise DegenerateObservationError("no events left after polarity selection",
                                         locus=f"{cluster.view_id} window {cluster.window}")
    return cluster.t[sel].astype(np.float64), cluster.xy[sel], cluster.p[sel]


def warp(xy, t, v, t0):
    """Shift event coordinates back to ``t0`` under constant velocity ``v`` (px/us)."""
    xy = np.asarray(xy, dtype=np.float64)
    dt = (np.asarray(t, dtype=np.float64) - t0)[:, None]
    return xy - np.asarray(v, dtype=np.float64)[None, :] * dt


def motion_compensate(xy, t, window):
    """Constant-velocity compensation from the two half-window event sets.

    Velocity is the difference of half-window centroids divided by the
    difference of their mean timestamps. Returns ``(xy_comp, v)``; ``v`` is
    None (and ``xy`` is unchanged) when a half holds fewer than two events.
    """
    xy = np.asarray(xy, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    t0, t1 = window
    mid = 0.5 * (t0 + t1)
    first, second = t < mid, t >= mid
    if first.sum() < 2 or second.sum() < 2:
        return xy.copy(), None
    c1, c2 = xy[first].mean(axis=0), xy[second].mean(axis=0)
    dt = t[second].mean() - t[first].mean()
    if dt <= 0:
        return xy.copy(), None
    v = (c2 - c1) / dt
    return warp(xy, t, v, t0), v


def hdr_gate(points, smoke, hdr, registration, theta_vis=None, params=EventParams()):
    """Accept a footprint when it is visible enough and looks like a particle in HDR."""
    theta = smoke.visibility_threshold if theta_vis is None else float(theta_vis)
    pts = registration.to_hdr(np.asarray(points, dtype=np.float64))
    if not np.any(registration.in_bounds(pts)):
        return GateResult(False, float("nan"), 0.0, theta)
    values = hdr.values if hasattr(hdr, "values") else np.asarray(hdr)
    mask = footprint_mask(pts, values.shape, dilate=1)
    f_mean = float(smoke.f[mask].mean())
    contrast = radiance_contrast(values, mask, params.ring_px)
    accept = bool(f_mean <= theta and abs(contrast) >= np.log(params.kappa))
    return GateResult(accept, f_mean, contrast, theta)


# -- envelope --------------------------------------------------------------

def polygon_area(poly):
    """Signed shoelace area (positive for counter-clockwise)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_simple_polygon(poly):
    """True when no two non-adjacent edges of the closed polygon intersect."""
    n = len(poly)
    if n < 3:
        return False
    a = poly
    b = np.roll(poly, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]

    def orient(p, q, r):
        return np.sign((q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0]))

    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]
    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    if np.any(proper):
        return False

    def on_seg(p, q, r):
        return ((np.minimum(p[:, 0], q[:, 0]) <= r[:, 0]) & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0]))
                & (np.minimum(p[:, 1], q[:, 1]) <= r[:, 1]) & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1])))

    touch = (((o1 == 0) & on_seg(p1, p2, q1)) | ((o2 == 0) & on_seg(p1, p2, q2))
             | ((o3 == 0) & on_seg(q1, q2, p1)) | ((o4 == 0) & on_seg(q1, q2, p2)))
    return not np.any(touch)


def _convex_hull(pts):
    hull = ConvexHull(pts)
    return pts[hull.vertices]  # counter-clockwise in 2-D


def alpha_shape(pts, alpha):
    """Outer boundary of the alpha complex as a CCW polygon, or None.

    None means the complex is empty, disconnected or pinched; callers fall
    back to the convex hull. Interior holes are filled.
    """
    tri = Delaunay(pts)
    s = tri.simplices
    a, b, c = pts[s[:, 0]], pts[s[:, 1]], pts[s[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area2 = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        circ = la * lb * lc / (2.0 * area2)
    keep = np.nonzero((area2 > 1e-12) & (circ <= alpha))[0]
    if keep.size == 0:
        return None
    # connectivity of kept triangles through shared edges
    kept = set(keep.tolist())
    nbr = tri.neighbors
    comp = {int(keep[0])}
    stack = [int(keep[0])]
    while stack:
        k = stack.pop()
        for m in nbr[k]:
            if m >= 0 and m in kept and m not in comp:
                comp.add(int(m))
                stack.append(int(m))
    if len(comp) != len(kept):
        return None
    edges = {}
    for k in keep:
        tri_v = s[k]
        for e in ((tri_v[0], tri_v[1]), (tri_v[1], tri_v[2]), (tri_v[2], tri_v[0])):
            key = (min(e), max(e))
            edges[key] = edges.get(key, 0) + 1
    boundary = [e for e, n in edges.items() if n == 1]
    adj = {}
    for x, y in boundary:
        adj.setdefault(x, []).append(y)
        adj.setdefault(y, []).append(x)
    if any(len(v) != 2 for v in adj.values()):
        return None
    loops, seen = [], set()
    for start in sorted(adj):
        if start in seen:
            continue
        loop, prev, cur = [start], None, start
        seen.add(start)
        while True:
            nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
            if nxt == start:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        loops.append(pts[loop])
    outer = max(loops, key=lambda lp: abs(polygon_area(lp)))
    if polygon_area(outer) < 0:
        outer = outer[::-1]
    return outer


def point_in_polygon(pt, poly):
    """Even-odd test; points on an edge may fall either way."""
    x, y = pt
    px, py = poly[:, 0], poly[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    straddle = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = px + (y - py) * (qx - px) / (qy - py)
    return bool(np.count_nonzero(straddle & (x < xc)) % 2)


def dense_core(xy, radius=2.0, floor=0.5):
    """Drop sparse fringe events before delineating the envelope.

    Keeps events with at least ``floor`` times the median number of
    neighbours within ``radius`` px. Threshold crossings start while an edge
    barely covers a pixel, so the outermost events lie beyond the true
    boundary and are also the sparsest. Returns ``xy`` unchanged when
    ``floor <= 0`` or fewer than three events would survive.
    """
    xy = np.asarray(xy, dtype=np.float64)
    if floor <= 0 or len(xy) < 4:
        return xy
    counts = cKDTree(xy).query_ball_point(xy, radius, return_length=True)
    keep = counts >= floor * np.median(counts)
    if keep.sum() < 3:
        return xy
    return xy[keep]


def contour_extract(xy, alpha=3.0):
    """Polygonal envelope of event coordinates.

    Returns ``(polygon, centroid, pixel_area)``. The centroid is the mean of
    all coordinates (duplicates included); the polygon is the alpha shape of
    the distinct coordinates, or their convex hull when the alpha shape is
    not a single simple region.
    """
    xy = np.asarray(xy, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 3:
        raise DegenerateObservationError("need at least three event coordinates", locus="contour")
    pts = np.unique(xy, axis=0)
    if len(pts) < 3 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
        raise DegenerateObservationError("event coordinates are collinear", locus="contour")
    poly = None
    if len(pts) > 3 and alpha is not None and alpha > 0:
        try:
            poly = alpha_shape(pts, alpha)
        except QhullError:
            poly = None
        if poly is not None and not is_simple_polygon(poly):
            poly = None
        # an unclosed ring gives a thin band around an empty middle
        if poly is not None and not point_in_polygon(pts.mean(axis=0), poly):
            poly = None
    if poly is None:
        poly = _convex_hull(pts)
    area = polygon_area(poly)
    return poly, xy.mean(axis=0), abs(area)


def eccentricity(xy):
    cov = np.cov(np.asarray(xy, dtype=np.float64).T)
    ev = np.sort(np.linalg.eigvalsh(cov))
    if ev[1] <= 0:
        return 0.0
    return float(np.sqrt(max(0.0, 1.0 - ev[0] / ev[1])))


# -- per-window extraction -------------------------------------------------

@dataclass
class ExtractionStats:
    events_in: int = 0
    events_clustered: int = 0
    events_gated: int = 0
    clusters: int = 0
    accepted: int = 0
    rejected: int = 0
    unclassifiable: int = 0
    degenerate: int = 0
    records: list = field(default_factory=list)

    def merge(self, other):
        for name in ("events_in", "events_clustered", "events_gated", "clusters", "accepted", "rejected",
                     "unclassifiable", "degenerate"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.records.extend(other.records)


def extract_window(stream, window, frame, registration, params=EventParams()):
    """Observations and bookkeeping for one view and one time window.

    ``frame`` is a pair ``(hdr, smoke)`` for the SVE frame at the window start.
    """
    hdr, smoke = frame
    stats = ExtractionStats()
    sl = stream.slice_time(*window)
    stats.events_in = sl.stop - sl.start
    obs = []
    for cl in cluster_events(stream, window, params):
        stats.clusters += 1
        stats.events_clustered += len(cl)
        rec = {"view": stream.view_id, "window": list(window), "label": cl.label, "n": len(cl),
               "centroid": [float(x) for x in cl.xy.mean(axis=0)]}
        stats.records.append(rec)
        if len(cl) < params.min_events:
            rec["outcome"] = "small"
            stats.rejected += 1
            continue
        state = classify_state(cl, hdr, smoke, registration, params)
        rec["state"] = state
        if state == UNCLASSIFIABLE:
            rec["outcome"] = "unclassifiable"
            stats.unclassifiable += 1
            continue
        try:
            t, xy, _ = select_geometry_events(cl, state)
            v = None
            if state == "partial":
                xy, v = motion_compensate(xy, t, window)
            gate = hdr_gate(xy, smoke, hdr, registration, params.theta_vis, params)
            rec.update(f_mean=gate.f_mean, contrast=gate.contrast)
            if not gate.accept:
                rec["outcome"] = "rejected"
                stats.rejected += 1
                continue
            poly, centroid, area = contour_extract(dense_core(xy, params.density_radius, params.density_floor),
                                                   params.alpha)
        except DegenerateObservationError as exc:
            rec["outcome"] = f"degenerate: {exc}"
            stats.degenerate += 1
            continue
        flags = ("eccentric",) if eccentricity(xy) > params.eccentricity_flag else ()
        compensated = state == "partial" and v is not None
        t_ref = float(window[0]) if compensated else 0.5 * (window[0] + window[1])
        obs.append(ParticleObservation(stream.view_id, tuple(window), state, xy,
                                       np.asarray(v) if v is not None else None, poly, centroid, area,
                                       t_ref, flags))
        rec["outcome"] = "accepted"
        stats.accepted += 1
        stats.events_gated += len(cl)
    return obs, stats


def extract_observations(stream, frames, registration, params=EventParams(), threads=1, t_end=None):
    """Run :func:`extract_window` over consecutive windows; output is in window order.

    ``frames[k]`` is the ``(hdr, smoke)`` pair for window ``k``; windows
    without a frame are skipped.
    """
    windows = [w for k, w in enumerate(iter_windows(stream, params.window_us, t_end)) if k < len(frames)]

    def work(k):
        return extract_window(stream, windows[k], frames[k], registration, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(windows))))
    else:
        results = [work(k) for k in range(len(windows))]
    observations, stats = [], ExtractionStats()
    for obs, st in results:
        observations.extend(obs)
        stats.merge(st)
    return observations, stats


def with_state(obs, state):
    return replace(obs, state=state)

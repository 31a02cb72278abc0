"""Stage functions behind the CLI.

Every stage reads its inputs from files and writes its artifacts under the
output directory, so running the stages one at a time gives the same bytes
as ``run``. Each stage returns a small dict of counts that becomes its
report fragment.
"""
from __future__ import annotations

import logging
import time
import types
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, InvariantError, NumericError
from .events import ExtractionStats, ParticleObservation, Registration, extract_observations, load_stream, save_stream
from .formats import (load_mosaic, read_json, read_measurements, read_pfm, read_png, save_mosaic, write_json,
                      write_measurements, write_pfm, write_png8)
from .fusion import HdrImage, fuse_stack, tone_map_preview
from .smoke import SmokeMap, smoke_map
from .stereo import (ColumnAxis, epipolar_match, load_calibration, measure_particle, project, save_calibration,
                     size_histogram, triangulate_many)
from .sve import ExposureStack, reconstruct_stack
from .synth import (default_scene, evaluate_run, load_scene, registration_homography, render_exposures, save_scene,
                    simulate_events)

log = logging.getLogger(__name__)

STAGES = ("simulate", "reconstruct", "smoke", "fuse", "extract", "measure", "report")
VIEWS = ("left", "right")


class Layout:
    """Paths of every artifact under the output directory."""

    def __init__(self, out):
        self.out = Path(out)

    def sim(self, name=""):
        return self.out / "sim" / name

    def mosaic(self, k):
        return self.sim(f"mosaic_{k:04d}.png")

    def stack(self, k, j=None):
        return self.out / "stack" / (f"frame_{k:04d}.json" if j is None else f"frame_{k:04d}_e{j}.pfm")

    def saturation(self, k):
        return self.out / "stack" / f"frame_{k:04d}_saturated.png"

    def smoke(self, k, kind):
        suffix = {"f": "_f.pfm", "labels": "_labels.png", "meta": ".json"}[kind]
        return self.out / "smoke" / f"frame_{k:04d}{suffix}"

    def hdr(self, k, preview=False):
        return self.out / "hdr" / f"frame_{k:04d}{'_preview.png' if preview else '.pfm'}"

    def observations(self, view):
        return self.out / "observations" / f"{view}.json"

    def clusters(self, view):
        return self.out / "observations" / f"{view}_clusters.json"

    @property
    def measurements(self):
        return self.out / "measurements.csv"

    @property
    def matches(self):
        return self.out / "matches.json"

    def fragment(self, stage):
        return self.out / "reports" / f"{stage}.json"

    @property
    def report(self):
        return self.out / "report.json"

    @property
    def evaluation(self):
        return self.out / "evaluation.json"

    @property
    def histogram_png(self):
        return self.out / "size_histogram.png"

    @property
    def dh_png(self):
        return self.out / "dh_vs_time.png"


@dataclass
class RunReport:
    config_hash: str
    version: str = __version__
    timings: dict = field(default_factory=dict)  # seconds per stage; never written to the artifact tree
    counts: dict = field(default_factory=dict)
    measurement_csv: str = ""

    def to_dict(self, timings=True):
        d = {"config_hash": self.config_hash, "version": self.version, "counts": self.counts,
             "measurement_csv": self.measurement_csv}
        if timings:
            d["timings"] = self.timings
        return d


def _mkdir(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _to_builtin(x):
    if isinstance(x, dict):
        return {str(k): _to_builtin(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_builtin(v) for v in x]
    if isinstance(x, np.ndarray):
        return _to_builtin(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def _write_fragment(layout, stage, counts):
    write_json(_mkdir(layout.fragment(stage)), _to_builtin(counts))
    return counts


# -- input resolution ------------------------------------------------------

def synthetic_mode(cfg):
    return cfg.inputs.events_left is None and cfg.inputs.events_right is None and not cfg.inputs.mosaics


def _scene(cfg):
    return load_scene(cfg.resolve(cfg.inputs.scene)) if cfg.inputs.scene else default_scene()


def _frame_count(cfg, layout):
    if cfg.inputs.mosaics:
        return len(cfg.inputs.mosaics)
    meta = layout.sim("frames.json")
    if not meta.exists():
        raise InputError(f"missing artifact: {meta} (run `simulate` or name mosaics in the config)")
    return int(read_json(meta)["count"])


def _mosaic_path(cfg, layout, k):
    return cfg.resolve(cfg.inputs.mosaics[k]) if cfg.inputs.mosaics else layout.mosaic(k)


def _input_path(cfg, layout, key, default_name, sim_only=False):
    given = None if sim_only else getattr(cfg.inputs, key)
    path = cfg.resolve(given) if given else layout.sim(default_name)
    if not Path(path).exists():
        raise InputError(f"missing artifact: {path}")
    return path


def _rig(cfg, layout):
    return load_calibration(_input_path(cfg, layout, "calibration", "calibration.json"))


def _column(cfg, layout, rig):
    """Column axis from 3-D endpoints, or triangulated from per-view endpoint pixels."""
    if cfg.inputs.column is not None:
        return ColumnAxis(np.asarray(cfg.inputs.column[0]), np.asarray(cfg.inputs.column[1]))
    if cfg.inputs.column_left is not None:
        left, right = np.asarray(cfg.inputs.column_left), np.asarray(cfg.inputs.column_right)
    else:
        d = read_json(_input_path(cfg, layout, "calibration", "column.json", sim_only=True))
        left, right = np.asarray(d["left"]), np.asarray(d["right"])
    P, _, _ = triangulate_many(rig, left, right)
    return ColumnAxis(P[0], P[1])


def _registrations(cfg, layout, rig):
    data = read_json(_input_path(cfg, layout, "registration", "registration.json"))
    out = {}
    for view, cam in zip(VIEWS, rig.cameras):
        d = data[view]
        out[view] = Registration(cam, np.asarray(d["H"], dtype=np.float64).reshape(3, 3), tuple(d["hdr_shape"]))
    return out


# -- stages ----------------------------------------------------------------

def stage_simulate(cfg, layout):
    """Render the SVE frames and both event streams of the configured scene."""
    truth = _scene(cfg)
    if truth.rig is None or truth.sve_camera is None:
        raise InputError("scene has no camera rig; the simulator needs both event views and the SVE camera")
    sim = cfg.sim_config()
    window = cfg.events.window_us
    duration = min(cfg.simulate.duration_us, truth.duration_us)
    n_frames = int(round(duration / window))
    save_scene(truth, _mkdir(layout.sim("scene.yaml")))
    save_calibration(truth.rig, layout.sim("calibration.json"))
    shape = (truth.sve_camera.height, truth.sve_camera.width)
    write_json(layout.sim("registration.json"), {
        view: Registration(cam, registration_homography(truth, cam), shape).to_dict()
        for view, cam in zip(VIEWS, truth.rig.cameras)})
    for k in range(n_frames):
        save_mosaic(layout.mosaic(k), render_exposures(truth, k * window, sim))
    write_json(layout.sim("frames.json"), {"count": n_frames, "interval_us": window})
    ends = np.array([truth.P1, truth.P2], dtype=np.float64)
    write_json(layout.sim("column.json"), {view: project(cam, ends).tolist()
                                           for view, cam in zip(VIEWS, truth.rig.cameras)})

    def one(item):
        view, cam = item
        return simulate_events(truth, cam, (0.0, n_frames * window), sim, view_id=view)

    items = list(zip(VIEWS, truth.rig.cameras))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            streams = list(pool.map(one, items))
    else:
        streams = [one(it) for it in items]
    counts = {"frames": n_frames}
    for view, stream in zip(VIEWS, streams):
        save_stream(stream, layout.sim(f"events_{view}.bin"))
        counts[f"events_{view}"] = len(stream)
    return _write_fragment(layout, "simulate", counts)


def stage_reconstruct(cfg, layout):
    n = _frame_count(cfg, layout)
    for k in range(n):
        mosaic = load_mosaic(_mosaic_path(cfg, layout, k), cfg.sve.transmittances, cfg.sve.bit_depth)
        stack = reconstruct_stack(mosaic, rescale=cfg.sve.rescale)
        for j in range(stack.K):
            write_pfm(_mkdir(layout.stack(k, j)), stack.images[j])
        sat = np.any(stack.saturated, axis=0)
        write_png8(layout.saturation(k), 255 * sat)
        write_json(layout.stack(k), {"K": stack.K, "transmittances": list(stack.transmittances),
                                     "max_value": stack.max_value, "shape": list(stack.shape)})
    return _write_fragment(layout, "reconstruct", {"frames": n})


def load_stack(layout, k):
    meta = read_json(layout.stack(k))
    images = np.stack([read_pfm(layout.stack(k, j)) for j in range(meta["K"])])
    return ExposureStack(images, tuple(meta["transmittances"]), max_value=float(meta["max_value"]))


def stage_smoke(cfg, layout):
    n = _frame_count(cfg, layout)
    regions = []
    for k in range(n):
        sm, feats = smoke_map(load_stack(layout, k), weights=cfg.smoke.weights, M=cfg.smoke.M,
                              window=cfg.smoke.window, epsilon=cfg.smoke.epsilon)
        write_pfm(_mkdir(layout.smoke(k, "f")), sm.f)
        write_png8(layout.smoke(k, "labels"), sm.labels)
        write_json(layout.smoke(k, "meta"), _to_builtin({
            "weights": sm.weights, "M": sm.M, "region_stats": sm.region_stats, "boundaries": sm.boundaries,
            "visibility_threshold": sm.visibility_threshold, "mean_variance": feats.mean_variance}))
        regions.append(sm.n_regions)
    return _write_fragment(layout, "smoke", {"frames": n, "regions": regions})


def load_smoke(layout, k):
    meta = read_json(layout.smoke(k, "meta"))
    f = read_pfm(layout.smoke(k, "f"))
    labels = read_png(layout.smoke(k, "labels")).astype(np.int32)
    return SmokeMap(f=f, weights=tuple(meta["weights"]), labels=labels, M=int(meta["M"]),
                    region_stats=tuple(tuple(s) for s in meta["region_stats"]),
                    boundaries=tuple(meta["boundaries"]))


def stage_fuse(cfg, layout):
    n = _frame_count(cfg, layout)
    for k in range(n):
        stack = load_stack(layout, k)
        labels = load_smoke(layout, k).labels if layout.smoke(k, "labels").exists() else None
        hdr, _, _ = fuse_stack(stack, labels, cfg.fusion, provenance=f"frame {k}")
        write_pfm(_mkdir(layout.hdr(k)), hdr.values)
        write_png8(layout.hdr(k, preview=True), tone_map_preview(hdr.values))
    return _write_fragment(layout, "fuse", {"frames": n})


def _obs_to_dict(o):
    return _to_builtin({"view": o.view_id, "window": list(o.window), "state": o.state,
                        "n_events": len(o.events_used), "velocity": o.velocity, "contour": o.contour,
                        "centroid": o.centroid, "pixel_area": o.pixel_area, "t_ref": o.t_ref,
                        "flags": list(o.flags)})


def _obs_from_dict(d):
    v = d["velocity"]
    return ParticleObservation(d["view"], tuple(d["window"]), d["state"], np.empty((0, 2)),
                               None if v is None else np.asarray(v), np.asarray(d["contour"], dtype=np.float64),
                               np.asarray(d["centroid"], dtype=np.float64), float(d["pixel_area"]),
                               float(d["t_ref"]), tuple(d["flags"]))


def load_observations(layout, view):
    return [_obs_from_dict(d) for d in read_json(layout.observations(view))]


def stage_extract(cfg, layout):
    rig = _rig(cfg, layout)
    regs = _registrations(cfg, layout, rig)
    n = _frame_count(cfg, layout)
    frames = [(HdrImage(read_pfm(layout.hdr(k))), load_smoke(layout, k)) for k in range(n)]
    counts = {}
    for view, cam in zip(VIEWS, rig.cameras):
        stream = load_stream(_input_path(cfg, layout, f"events_{view}", f"events_{view}.bin"), view_id=view,
                             sensor_dims=(cam.width, cam.height))
        obs, stats = extract_observations(stream, frames, regs[view], cfg.events, threads=cfg.threads,
                                          t_end=n * cfg.events.window_us)
        write_json(_mkdir(layout.observations(view)), [_obs_to_dict(o) for o in obs])
        write_json(layout.clusters(view), _to_builtin(stats.records))
        counts[view] = _stats_counts(stats)
    return _write_fragment(layout, "extract", counts)


def _stats_counts(stats: ExtractionStats):
    return {k: getattr(stats, k) for k in ("events_in", "events_clustered", "events_gated", "clusters",
                                           "accepted", "rejected", "unclassifiable", "degenerate")}


def match_and_measure(rig, axis, obs_l, obs_r, stereo):
    """Match observations window by window and measure every pair.

    Returns ``(measurements, matches, failures)``.
    """
    windows = sorted({o.window for o in obs_l} | {o.window for o in obs_r})
    measurements, matches, failures = [], [], 0
    for w in windows:
        left = [o for o in obs_l if o.window == w]
        right = [o for o in obs_r if o.window == w]
        pairs = epipolar_match(rig, [o.centroid for o in left], [o.t_ref for o in left],
                               [o.centroid for o in right], [o.t_ref for o in right],
                               stereo.max_epi_px, stereo.max_dt_us)
        for i, j, dist in pairs:
            a, b = left[i], right[j]
            try:
                m = measure_particle(rig, axis, a.centroid, b.centroid, a.contour, b.contour,
                                     0.5 * (a.t_ref + b.t_ref), mode=stereo.scale_mode, state=a.state)
            except NumericError as exc:
                log.warning("window %s: pair (%d, %d) not measured: %s", w, i, j, exc)
                failures += 1
                continue
            measurements.append(m)
            matches.append({"window": list(w), "left": i, "right": j, "epipolar_px": dist,
                            "state_left": a.state, "state_right": b.state})
    return measurements, matches, failures


def stage_measure(cfg, layout):
    rig = _rig(cfg, layout)
    axis = _column(cfg, layout, rig)
    obs = {view: load_observations(layout, view) for view in VIEWS}
    measurements, matches, failures = match_and_measure(rig, axis, obs["left"], obs["right"], cfg.stereo)
    write_measurements(_mkdir(layout.measurements), measurements)
    write_json(layout.matches, _to_builtin(matches))
    if not measurements:
        log.info("no stereo matches; wrote an empty measurement table")
    return _write_fragment(layout, "measure", {"matched": len(measurements), "failed": failures,
                                               "observations_left": len(obs["left"]),
                                               "observations_right": len(obs["right"])})


def _plot_histogram(path, radii, counts, edges, modes):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(radii):
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k", color="0.7")
        for m in modes:
            ax.axvline(m, color="r", lw=1)
    ax.set_xlabel("equivalent radius r_e (mm)")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_dh(path, t, dh):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.asarray(t) / 1000.0, dh, "o", ms=4)
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("separation height (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def stage_report(cfg, layout):
    """Aggregate fragments, plot the size histogram and the height trace."""
    table = read_measurements(layout.measurements)
    radii = table["re_mm"]
    if len(radii):
        counts, edges, modes = size_histogram(radii, cfg.report.bin_width, cfg.report.prominence)
    else:
        counts, edges, modes = np.zeros(0, int), np.zeros(1), []
    _plot_histogram(layout.histogram_png, radii, counts, edges, modes)
    _plot_dh(layout.dh_png, table["t_us"], table["dh_mm"])
    # own fragment excluded so a rerun in an existing tree gives the same bytes
    fragments = {s: read_json(layout.fragment(s)) for s in STAGES[:-1] if layout.fragment(s).exists()}
    summary = {"modes_mm": modes, "histogram": {"counts": counts, "edges": edges}, "matched": int(len(radii))}
    if synthetic_mode(cfg) and layout.sim("scene.yaml").exists():
        truth = load_scene(layout.sim("scene.yaml"))
        ms = [types.SimpleNamespace(t_us=t, centroid_w=np.array([x, y, z]), dh=dh, r_e=re)
              for t, x, y, z, dh, re in zip(table["t_us"], table["x_mm"], table["y_mm"], table["z_mm"],
                                            table["dh_mm"], table["re_mm"])]
        ev = evaluate_run(truth, ms, windows=_frame_count(cfg, layout))
        write_json(layout.evaluation, _to_builtin(ev.to_dict()))
    report = RunReport(config_hash=cfg.config_hash(), counts={"stages": fragments, "summary": summary},
                       measurement_csv=layout.measurements.name)
    _check_counts(fragments)
    write_json(layout.report, _to_builtin(report.to_dict(timings=False)))
    return _write_fragment(layout, "report", {"modes": len(modes), "matched": int(len(radii))})


def _check_counts(fragments):
    for view, c in fragments.get("extract", {}).items():
        if not c["events_gated"] <= c["events_clustered"] <= c["events_in"]:
            raise InvariantError("event counts are inconsistent (gated <= clustered <= in)", locus=f"report.{view}")


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "reconstruct": stage_reconstruct,
    "smoke": stage_smoke,
    "fuse": stage_fuse,
    "extract": stage_extract,
    "measure": stage_measure,
    "report": stage_report,
}


def run_stage(cfg, out, stage, report=None):
    layout = Layout(out)
    layout.out.mkdir(parents=True, exist_ok=True)
    report = report if report is not None else RunReport(config_hash=cfg.config_hash())
    t0 = time.perf_counter()
    counts = STAGE_FUNCS[stage](cfg, layout)
    report.timings[stage] = time.perf_counter() - t0
    report.counts[stage] = counts
    report.measurement_csv = str(layout.measurements)
    return report


def run_all(cfg, out):
    """Every stage in order; ``simulate`` only when no recorded inputs are configured."""
    report = RunReport(config_hash=cfg.config_hash())
    for stage in STAGES:
        if stage == "simulate" and not synthetic_mode(cfg):
            continue
        run_stage(cfg, out, stage, report)
    return report

"""Artifact file formats: PFM, 16/8-bit PNG, JSON, and the measurement CSV.

Every writer is deterministic so that identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, ParseError
from .sve import RawSveMosaic

MEASUREMENT_HEADER = ("t_us", "x_mm", "y_mm", "z_mm", "dh_mm", "re_left_mm", "re_right_mm", "re_mm", "reproj_px")


def _require(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing artifact: {path}")
    return path


# -- portable float map ----------------------------------------------------

def write_pfm(path, image):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise InputError(f"PFM writer expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    data = _require(path).read_bytes()
    buf = io.BytesIO(data)
    try:
        kind = buf.readline().strip()
        w, h = (int(x) for x in buf.readline().split())
        scale = float(buf.readline().strip())
    except ValueError as exc:
        raise ParseError(f"bad PFM header in {path}: {exc}", offset=0) from exc
    if kind != b"Pf":
        raise ParseError(f"{path}: only single-channel PFM is supported", offset=0)
    dtype = "<f4" if scale < 0 else ">f4"
    start = buf.tell()
    need = w * h * 4
    if len(data) - start < need:
        raise ParseError(f"{path}: truncated PFM payload", offset=len(data))
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return img[::-1].astype(np.float64)


# -- PNG -------------------------------------------------------------------

def write_png16(path, image):
    arr = np.asarray(image)
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise InputError("16-bit PNG values must lie in [0, 65535]")
    Image.fromarray(np.rint(arr).astype(np.uint16)).save(path, format="PNG")


def write_png8(path, image):
    arr = np.asarray(image)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise InputError("8-bit PNG values must lie in [0, 255]")
    Image.fromarray(np.rint(arr).astype(np.uint8)).save(path, format="PNG")


def read_png(path):
    with Image.open(_require(path)) as im:
        return np.array(im).astype(np.float64)


# -- mosaics ---------------------------------------------------------------

def save_mosaic(path, mosaic):
    """Write a raw mosaic as 16-bit PNG, or PFM when the suffix is ``.pfm``."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, mosaic.values)
    else:
        if mosaic.bit_depth > 16:
            raise InputError("mosaics deeper than 16 bits need the PFM format")
        write_png16(path, mosaic.values)


def load_mosaic(path, transmittances, bit_depth=16):
    path = _require(path)
    values = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)
    if values.ndim != 2:
        raise InputError(f"{path}: mosaic must be single-channel")
    return RawSveMosaic(values=values, transmittances=tuple(transmittances), bit_depth=bit_depth)


# -- JSON ------------------------------------------------------------------

def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = _require(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", offset=exc.pos) from exc


# -- measurements ----------------------------------------------------------

def measurement_rows(measurements):
    rows = []
    for m in measurements:
        x, y, z = (float(c) for c in m.centroid_w)
        rows.append((float(m.t_us), x, y, z, m.dh, m.re_left, m.re_right, m.r_e, m.reprojection_error))
    return rows


def write_measurements(path, measurements):
    """CSV with a fixed header; floats use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for row in measurement_rows(measurements):
            w.writerow([repr(float(v)) for v in row])


def read_measurements(path):
    """Rows of the measurement CSV as a dict of float arrays keyed by column."""
    path = _require(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MEASUREMENT_HEADER:
            raise ParseError(f"{path}: unexpected header {header}", offset=0)
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(MEASUREMENT_HEADER))
    return {k: arr[:, i] for i, k in enumerate(MEASUREMENT_HEADER)}

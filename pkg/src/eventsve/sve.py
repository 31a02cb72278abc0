"""Spatially-variant-exposure mosaic decoding.

A raw SVE frame tiles the sensor with 2x2 macro-pixels, each position behind
a different neutral-density filter. Decoding splits the mosaic into four
quarter-resolution exposures and brings each back to full resolution with a
curvature-corrected interpolator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, InvariantError

#: macro-pixel offsets (row, col) in row-major order
ROW_MAJOR_LAYOUT = ((0, 0), (0, 1), (1, 0), (1, 1))

SATURATION_FRACTION = 0.98


@dataclass(frozen=True)
class RawSveMosaic:
    values: np.ndarray
    transmittances: tuple
    bit_depth: int = 16
    layout: tuple = ROW_MAJOR_LAYOUT

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError(f"mosaic must be 2-D, got shape {values.shape}")
        h, w = values.shape
        if h % 2 or w % 2:
            raise DimensionError(f"mosaic dimensions must be even, got {w}x{h}")
        taus = tuple(float(t) for t in self.transmittances)
        if len(taus) != 4:
            raise InputError("an SVE mosaic needs exactly four transmittances")
        if any(not (0.0 < t <= 1.0) for t in taus):
            raise InputError(f"transmittances must lie in (0, 1], got {taus}")
        if len(set(taus)) != 4:
            raise InputError(f"transmittances must be distinct, got {taus}")
        layout = tuple(tuple(int(c) for c in pos) for pos in self.layout)
        if sorted(layout) != sorted(ROW_MAJOR_LAYOUT):
            raise InputError(f"layout must be a permutation of {ROW_MAJOR_LAYOUT}")
        vmax = self.max_value_for(self.bit_depth)
        if values.size and (values.min() < 0 or values.max() > vmax):
            bad = np.argwhere((values < 0) | (values > vmax))[0]
            raise InvariantError("mosaic value outside [0, 2^bit_depth - 1]",
                                 locus=f"pixel (row={bad[0]}, col={bad[1]})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "transmittances", taus)
        object.__setattr__(self, "layout", layout)

    @staticmethod
    def max_value_for(bit_depth):
        return float(2 ** int(bit_depth) - 1)

    @property
    def max_value(self):
        return self.max_value_for(self.bit_depth)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ExposureStack:
    """K registered full-resolution exposures plus their per-image means.

    ``max_value`` is the sensor full-scale code; features and fusion work on
    ``normalized()`` images in [0, 1].
    """

    images: np.ndarray
    transmittances: tuple
    max_value: float = 65535.0
    saturated: np.ndarray | None = None
    per_image_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3 or images.shape[0] < 1:
            raise InputError("exposure stack must be a non-empty (K, H, W) array")
        if len(self.transmittances) != images.shape[0]:
            raise InputError("one transmittance per exposure is required")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "transmittances", tuple(float(t) for t in self.transmittances))
        object.__setattr__(self, "per_image_mean", images.mean(axis=(1, 2)))
        if self.saturated is None:
            sat = images >= SATURATION_FRACTION * self.max_value
            object.__setattr__(self, "saturated", sat)

    @property
    def K(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]

    def normalized(self):
        return self.images / self.max_value

    @classmethod
    def from_images(cls, images, transmittances=None, max_value=None):
        """Convenience constructor for tests and single-exposure fusion."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        k = images.shape[0]
        if transmittances is None:
            transmittances = tuple(1.0 / (2 ** i) for i in range(k))
        if max_value is None:
            max_value = 1.0 if images.max(initial=0.0) <= 1.0 else 65535.0
        return cls(images, tuple(transmittances), max_value=max_value)


def demultiplex(mosaic):
    """Split a mosaic into four quarter-resolution sub-images.

    Returns ``(subs, transmittances)`` where ``subs[k]`` holds the samples at
    the k-th macro-pixel position of ``mosaic.layout``.
    """
    v = mosaic.values
    if v.shape[0] % 2 or v.shape[1] % 2:
        raise DimensionError("odd mosaic dimensions")
    subs = np.stack([v[dy::2, dx::2] for dy, dx in mosaic.layout])
    return subs, mosaic.transmittances


def _pad_odd(a, axis):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (2, 2)
    if a.shape[axis] == 1:
        return np.pad(a, pad, mode="edge")
    return np.pad(a, pad, mode="reflect", reflect_type="odd")


def _upsample_axis(a, offset, axis):
    """Double ``a`` along ``axis``; input samples land on ``offset + 2*j``.

    Midpoints use the 4-tap cubic stencil (-1, 9, 9, -1)/16: the linear
    estimate minus one eighth of the local second difference.
    """
    n = a.shape[axis]
    p = np.moveaxis(_pad_odd(a, axis), axis, 0)
    # p[j + 2] == a[j]
    s = [p[i:i + n + 1] for i in range(4)]
    mid = (-s[0] + 9.0 * s[1] + 9.0 * s[2] - s[3]) / 16.0  # between a[j-1], a[j]
    out = np.empty((2 * n,) + p.shape[1:], dtype=np.float64)
    a0 = p[2:2 + n]
    if offset == 0:
        out[0::2] = a0
        out[1::2] = mid[1:]
    else:
        out[1::2] = a0
        out[0::2] = mid[:-1]
    return np.moveaxis(out, 0, axis)


def interpolate_subimage(sub, target, offset=(0, 0)):
    """Full-resolution estimate of a quarter-resolution exposure.

    ``target`` is ``(height, width)`` and must be exactly twice the sub-image;
    ``offset`` is the sub-image's (row, col) position in the macro-pixel.
    Native sample sites are reproduced exactly and planes are reproduced
    everywhere, including the borders.
    """
    sub = np.asarray(sub, dtype=np.float64)
    h, w = sub.shape
    if tuple(target) != (2 * h, 2 * w):
        raise DimensionError(f"target {tuple(target)} is not twice the sub-image {(h, w)}")
    out = _upsample_axis(sub, offset[1], axis=1)
    out = _upsample_axis(out, offset[0], axis=0)
    return np.maximum(out, 0.0)


def bilinear_subimage(sub, target, offset=(0, 0)):
    """Plain linear upsampler with the same sample geometry (comparison baseline)."""
    sub = np.asarray(sub, dtype=np.float64)
    h, w = sub.shape
    if tuple(target) != (2 * h, 2 * w):
        raise DimensionError("target is not twice the sub-image")
    ys = (np.arange(2 * h) - offset[0]) / 2.0
    xs = (np.arange(2 * w) - offset[1]) / 2.0

    def lin(a, coords, axis):
        a = np.moveaxis(a, axis, 0)
        n = a.shape[0]
        if n == 1:
            return np.moveaxis(np.repeat(a, len(coords), axis=0), 0, axis)
        i0 = np.clip(np.floor(coords).astype(int), 0, n - 2)
        f = (coords - i0)[:, None]
        res = a[i0] * (1 - f) + a[i0 + 1] * f
        return np.moveaxis(res, 0, axis)

    return lin(lin(sub, xs, 1), ys, 0)


def reconstruct_stack(mosaic, rescale=False):
    """Decode a mosaic into an :class:`ExposureStack` of four images.

    With ``rescale`` the images are divided by their transmittance (radiance
    estimates); by default they stay in sensor counts.
    """
    subs, taus = demultiplex(mosaic)
    target = (mosaic.height, mosaic.width)
    images = np.stack([interpolate_subimage(s, target, off) for s, off in zip(subs, mosaic.layout)])
    # the cubic stencil overshoots next to clipped samples; nothing exceeds full scale
    images = np.minimum(images, mosaic.max_value)
    sat = images >= SATURATION_FRACTION * mosaic.max_value
    max_value = mosaic.max_value
    if rescale:
        images = images / np.asarray(taus)[:, None, None]
        max_value = mosaic.max_value / min(taus)
    return ExposureStack(images, taus, max_value=max_value, saturated=sat)

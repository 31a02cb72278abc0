"""Retinex decomposition and region-guided dual-weight pyramid fusion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError, NumericError
from .smoke import weber_contrast_single

ILLUMINATION_FLOOR = 1e-4
REFLECTION_EPS = 1e-9


@dataclass(frozen=True)
class FusionParams:
    psi: float = 1.0
    delta: float = 0.2
    levels: int = 5
    epsilon: float = 1e-6
    guided_reg: float = 1e-3
    guided_radius: int | None = None  # None -> max(dims) // 32
    hist_bins: int = 256
    feather: float = 3.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.psi <= 0:
            raise ConfigError("psi must be positive")
        if self.levels < 1:
            raise ConfigError("pyramid needs at least one level")


@dataclass(frozen=True)
class RetinexLayers:
    L: np.ndarray  # (K, H, W), strictly positive
    R: np.ndarray
    scale: float = 1.0  # multiply L*R by this to return to input units


@dataclass(frozen=True)
class WeightMaps:
    w_l: np.ndarray
    w_r: np.ndarray
    params: FusionParams = field(default_factory=FusionParams)


@dataclass(frozen=True)
class HdrImage:
    values: np.ndarray
    provenance: str = ""


# -- filters ---------------------------------------------------------------

def box_mean(img, r):
    return ndimage.uniform_filter(img, size=2 * r + 1, mode="reflect")


def guided_filter(guide, src, r, reg):
    """Edge-preserving smoothing of ``src`` steered by ``guide`` (He et al. form)."""
    mean_i = box_mean(guide, r)
    mean_p = box_mean(src, r)
    cov_ip = box_mean(guide * src, r) - mean_i * mean_p
    var_i = box_mean(guide * guide, r) - mean_i * mean_i
    a = cov_ip / (var_i + reg)
    b = mean_p - a * mean_i
    return box_mean(a, r) * guide + box_mean(b, r)


def retinex_decompose(stack, params=FusionParams()):
    """Split each normalized exposure into illumination and reflection layers."""
    imgs = stack.normalized()
    if np.any(imgs < 0):
        raise InputError("exposures must be non-negative")
    r = params.guided_radius or max(1, max(stack.shape) // 32)
    L = np.stack([np.maximum(guided_filter(i, i, r, params.guided_reg), ILLUMINATION_FLOOR) for i in imgs])
    R = imgs / (L + REFLECTION_EPS)
    return RetinexLayers(L=L, R=R, scale=stack.max_value)


# -- weights ---------------------------------------------------------------

def _normalize_across(w):
    total = w.sum(axis=0, keepdims=True)
    k = w.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / k)
    return out


def histogram_gradient(values, sample, bins=256):
    """Slope of the normalized cumulative histogram of ``sample``, read at ``values``.

    Intensities live in [0, 1]; the slope is per unit intensity.
    """
    hist, edges = np.histogram(np.clip(sample, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    cdf = np.cumsum(hist) / max(hist.sum(), 1)
    grad = np.gradient(cdf, edges[1] - edges[0])
    idx = np.clip((np.clip(values, 0.0, 1.0) * bins).astype(int), 0, bins - 1)
    return grad[idx]


def exposedness(L, u, delta, psi=1.0):
    """Gaussian closeness of illumination to the regional mean ``u``; peaks at ``1/psi``."""
    return np.exp(-((np.asarray(L) - u) ** 2) / (2.0 * delta ** 2)) / psi


def _region_illumination_weights(L, mask, params):
    K = L.shape[0]
    inv_grad = np.empty_like(L)
    w2 = np.empty_like(L)
    for k in range(K):
        sample = L[k][mask]
        g = histogram_gradient(L[k], sample, params.hist_bins)
        inv_grad[k] = 1.0 / np.maximum(g, 1e-12)
        w2[k] = exposedness(L[k], sample.mean(), params.delta, params.psi)
    w1 = inv_grad / (inv_grad.sum(axis=0, keepdims=True) + params.epsilon)
    return w1 * w2


def region_memberships(labels, feather):
    """Soft per-region masks that sum to one, blurred across boundaries."""
    ids = np.unique(labels)
    soft = []
    for m in ids:
        ind = (labels == m).astype(np.float64)
        soft.append(ndimage.gaussian_filter(ind, feather, mode="nearest") if feather > 0 else ind)
    soft = np.stack(soft)
    return ids, soft / soft.sum(axis=0, keepdims=True)


def illumination_weights(L, labels, params=FusionParams()):
    L = np.asarray(L, dtype=np.float64)
    if params.delta <= 0:
        raise ConfigError("delta must be positive")
    K = L.shape[0]
    if K == 1:
        return np.ones_like(L)
    if labels is None:
        labels = np.ones(L.shape[1:], dtype=np.int32)
    ids, soft = region_memberships(labels, params.feather)
    w = np.zeros_like(L)
    for m, s in zip(ids, soft):
        w += s[None] * _region_illumination_weights(L, labels == m, params)
    return _normalize_across(w)


def reflection_weights(R, eps=1e-12):
    R = np.asarray(R, dtype=np.float64)
    c = np.stack([weber_contrast_single(r) for r in R]) + eps
    return c / c.sum(axis=0, keepdims=True)


def compute_weights(layers, labels, params=FusionParams()):
    return WeightMaps(illumination_weights(layers.L, labels, params), reflection_weights(layers.R), params)


# -- pyramids --------------------------------------------------------------

_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(img):
    out = ndimage.convolve1d(img, _KERNEL, axis=-1, mode="reflect")
    return ndimage.convolve1d(out, _KERNEL, axis=-2, mode="reflect")


def _down(img):
    return _blur(img)[..., ::2, ::2]


def _up(img, shape):
    up = np.zeros(img.shape[:-2] + tuple(shape))
    up[..., ::2, ::2] = img
    # interpolating zeros needs 4x gain to preserve mean
    return 4.0 * _blur(up)


def max_levels(shape):
    return int(np.floor(np.log2(min(shape))))


def gaussian_pyramid(img, levels):
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(_down(pyr[-1]))
    return pyr


def laplacian_pyramid(img, levels):
    g = gaussian_pyramid(img, levels)
    lap = [g[i] - _up(g[i + 1], g[i].shape[-2:]) for i in range(levels - 1)]
    lap.append(g[-1])
    return lap


def collapse(lap):
    img = lap[-1]
    for level in reversed(lap[:-1]):
        img = level + _up(img, level.shape[-2:])
    return img


def _check_levels(levels, shape):
    if levels < 1 or levels > max_levels(shape):
        raise ConfigError(f"pyramid levels must be in [1, {max_levels(shape)}], got {levels}")


def blend_pyramids(layers, weights, levels):
    """Weighted Laplacian blend of a (K, H, W) layer stack; returns the collapsed image."""
    lap = laplacian_pyramid(layers, levels)
    gw = gaussian_pyramid(weights, levels)
    fused = [(lp * g).sum(axis=0) for lp, g in zip(lap, gw)]
    return collapse(fused)


def pyramid_fuse(layers, weights, levels=5, provenance=""):
    """Blend illumination and reflection pyramids separately, then recombine."""
    shape = layers.L.shape[1:]
    _check_levels(levels, shape)
    L_hat = blend_pyramids(layers.L, weights.w_l, levels)
    R_hat = blend_pyramids(layers.R, weights.w_r, levels)
    out = np.maximum(L_hat * R_hat, 0.0) * layers.scale
    if not np.all(np.isfinite(out)):
        raise NumericError("fused image is not finite")
    return HdrImage(values=out, provenance=provenance)


def fuse_stack(stack, labels=None, params=FusionParams(), provenance=""):
    layers = retinex_decompose(stack, params)
    weights = compute_weights(layers, labels, params)
    levels = min(params.levels, max_levels(stack.shape))
    return pyramid_fuse(layers, weights, levels, provenance), layers, weights


def config_hash(obj):
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:16]


def tone_map_preview(values, low=1.0, high=99.0, gamma=1 / 2.2):
    """8-bit display rendering; never used for measurement."""
    lo, hi = np.percentile(values, [low, high])
    x = np.clip((values - lo) / max(hi - lo, 1e-12), 0.0, 1.0) ** gamma
    return np.round(x * 255.0).astype(np.uint8)

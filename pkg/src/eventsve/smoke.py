"""Smoke-likelihood features, their combination, and region segmentation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError, InvariantError

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.1, 0.4, 0.2, 0.3)
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class FeatureMaps:
    bi: np.ndarray
    wc: np.ndarray
    cf: np.ndarray
    v: np.ndarray
    dark_channel: np.ndarray
    bright_channel: np.ndarray
    mean_variance: float
    epsilon: float

    def as_list(self):
        return [self.bi, self.wc, self.cf, self.v]


@dataclass(frozen=True)
class SmokeMap:
    f: np.ndarray
    weights: tuple
    labels: np.ndarray
    M: int
    region_stats: tuple  # ((mean, var), ...) per label 1..M_eff
    boundaries: tuple  # f values separating consecutive labels

    @property
    def n_regions(self):
        return len(self.region_stats)

    @property
    def visibility_threshold(self):
        """F value on the boundary below the densest-smoke region."""
        if not self.boundaries:
            return 1.0
        return self.boundaries[-1]


def _require(stack, k_min):
    if stack.K < k_min:
        raise InputError(f"operation needs at least {k_min} exposures, got {stack.K}")


def brightness_deviation(stack):
    """Root-sum-square deviation from each exposure's mean, floored at half the mean."""
    _require(stack, 1)
    mu = stack.per_image_mean[:, None, None]
    dev = np.maximum(stack.images, mu / 2.0) - mu
    return np.sqrt(np.sum(dev * dev, axis=0)) / stack.K


def gradient_magnitude(img):
    """Central differences, mirrored at the border."""
    p = np.pad(img, 1, mode="symmetric")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def weber_contrast_single(img):
    return gradient_magnitude(img) / (img + 1.0)


def weber_contrast(stack):
    _require(stack, 1)
    return sum(weber_contrast_single(img) for img in stack.images) / stack.K


def dark_bright_channels(stack, window=1):
    _require(stack, 2)
    dark = stack.images.min(axis=0)
    bright = stack.images.max(axis=0)
    if window > 1:
        dark = ndimage.minimum_filter(dark, size=window, mode="nearest")
        bright = ndimage.maximum_filter(bright, size=window, mode="nearest")
    return dark, bright


def contrast_feature(dark, bright):
    dark = np.asarray(dark, dtype=np.float64)
    bright = np.asarray(bright, dtype=np.float64)
    if np.any(dark > bright):
        bad = np.argwhere(dark > bright)[0]
        raise InvariantError("dark channel exceeds bright channel", locus=f"pixel {tuple(bad)}")
    return 1.0 - dark / np.maximum(bright, 1.0)


def response_variance(stack, epsilon=DEFAULT_EPSILON):
    """Across-exposure variance relative to the frame's geometric-mean variance.

    Computed on normalized intensities so ``epsilon`` has a fixed meaning.
    Returns ``(V, chi_bar)``.
    """
    _require(stack, 2)
    var = stack.normalized().var(axis=0)
    if not np.any(var):
        chi = 0.0
    else:
        chi = max(float(np.exp(np.mean(np.log(var + epsilon))) - epsilon), 0.0)
    return (var - chi) / (chi + epsilon), chi


def compute_features(stack, window=1, epsilon=DEFAULT_EPSILON):
    dark, bright = dark_bright_channels(stack, window)
    v, chi = response_variance(stack, epsilon)
    return FeatureMaps(
        bi=brightness_deviation(stack),
        wc=weber_contrast(stack),
        cf=contrast_feature(dark, bright),
        v=v,
        dark_channel=dark,
        bright_channel=bright,
        mean_variance=chi,
        epsilon=epsilon,
    )


def minmax_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    # spans at rounding level are treated as constant rather than amplified to [0, 1]
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1e-300):
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def check_weights(weights):
    w = tuple(float(x) for x in weights)
    if len(w) != 4 or any(x < 0 for x in w):
        raise ConfigError(f"need four non-negative smoke weights, got {weights}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ConfigError(f"smoke weights must sum to 1, got sum {sum(w)!r}")
    return w


def weighted_sum(normalized, weights):
    """Linear blend of already-normalized feature maps."""
    w = check_weights(weights)
    out = np.zeros_like(np.asarray(normalized[0], dtype=np.float64))
    for wi, feat in zip(w, normalized):
        out = out + wi * feat
    return np.clip(out, 0.0, 1.0)


def combine_likelihood(features, weights=DEFAULT_WEIGHTS):
    for name, feat in zip(("BI", "WC", "CF", "V"), features.as_list()):
        if not np.all(np.isfinite(feat)):
            raise InvariantError(f"{name} feature has non-finite values", locus="smoke")
    return weighted_sum([minmax_normalize(f) for f in features.as_list()], weights)


# -- segmentation ----------------------------------------------------------

_HIST_BINS = 4096


def _multi_otsu(values, m):
    from skimage.filters import threshold_multiotsu

    return np.asarray(threshold_multiotsu(values, classes=m, nbins=256))


def _log_gauss(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def _em(x, w, mix, means, variances, max_iter, tol, var_floor):
    """EM for a 1-D Gaussian mixture on histogram bins ``x`` with counts ``w``."""
    total = w.sum()
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        lp = np.log(np.maximum(mix, 1e-300))[None, :] + _log_gauss(x[:, None], means[None, :], variances[None, :])
        top = lp.max(axis=1, keepdims=True)
        norm = top[:, 0] + np.log(np.exp(lp - top).sum(axis=1))
        resp = np.exp(lp - norm[:, None]) * w[:, None]
        ll = float(np.dot(w, norm)) / total
        nk = resp.sum(axis=0)
        keep = nk > 0
        mix = np.where(keep, nk / total, 0.0)
        safe = np.where(keep, nk, 1.0)
        means = np.where(keep, (resp * x[:, None]).sum(axis=0) / safe, means)
        variances = np.where(keep, (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / safe, variances)
        variances = np.maximum(variances, var_floor)
        if abs(ll - prev) < tol:
            break
        prev = ll
    return mix, means, variances, it


def segment_regions(f, M=4, max_iter=100, tol=1e-6):
    """Label each pixel 1..M_eff by a histogram-initialized Gaussian mixture.

    Labels are ordered by ascending component mean. When the histogram cannot
    support M components the duplicates are merged and a warning is emitted.
    Returns ``(labels, region_stats, boundaries)``.
    """
    if M < 2:
        raise ConfigError("M must be at least 2")
    f = np.asarray(f, dtype=np.float64)
    flat = f.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    span = hi - lo
    if span <= 1e-12:
        if M > 1:
            warnings.warn("constant smoke map: a single effective region", RuntimeWarning, stacklevel=2)
        return np.ones(f.shape, dtype=np.int32), ((lo, 0.0),), ()

    counts, edges = np.histogram(flat, bins=_HIST_BINS, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    nz = counts > 0
    x, w = centers[nz], counts[nz].astype(np.float64)

    m_eff = min(M, int(nz.sum()))
    thresholds = np.array([])
    while m_eff >= 2:
        try:
            thresholds = _multi_otsu(flat, m_eff)
        except ValueError:
            m_eff -= 1
            continue
        break
    if m_eff < M:
        warnings.warn(f"histogram supports only {m_eff} of {M} regions", RuntimeWarning, stacklevel=2)

    cls = np.digitize(x, thresholds) if m_eff >= 2 else np.zeros(x.shape, dtype=int)
    means, variances, mix = [], [], []
    var_floor = (span / _HIST_BINS) ** 2 / 12.0
    for c in range(max(m_eff, 1)):
        sel = cls == c
        if not np.any(sel):
            continue
        wc = w[sel]
        mu = float(np.average(x[sel], weights=wc))
        means.append(mu)
        variances.append(max(float(np.average((x[sel] - mu) ** 2, weights=wc)), var_floor))
        mix.append(wc.sum() / w.sum())
    mix, means, variances, _ = _em(x, w, np.array(mix), np.array(means), np.array(variances),
                                   max_iter, tol, var_floor)

    alive = mix > 1e-12
    mix, means, variances = mix[alive], means[alive], variances[alive]
    order = np.argsort(means, kind="stable")
    mix, means, variances = mix[order], means[order], variances[order]
    # merge components that EM drove onto each other
    merged = [[0]]
    for i in range(1, len(means)):
        j = merged[-1][-1]
        if abs(means[i] - means[j]) < 1e-6 * max(span, 1.0) and abs(variances[i] - variances[j]) < 1e-6 * span ** 2:
            merged[-1].append(i)
        else:
            merged.append([i])
    if len(merged) < len(means):
        warnings.warn("merged duplicate mixture components", RuntimeWarning, stacklevel=2)
        mix = np.array([mix[g].sum() for g in merged])
        means = np.array([means[g[0]] for g in merged])
        variances = np.array([variances[g[0]] for g in merged])

    lp = np.log(mix)[None, :] + _log_gauss(flat[:, None], means[None, :], variances[None, :])
    comp = np.argmax(lp, axis=1)
    # relabel densely by ascending mean of f inside each populated component
    present = np.unique(comp)
    region_means = np.array([flat[comp == c].mean() for c in present])
    rank = present[np.argsort(region_means, kind="stable")]
    remap = np.zeros(len(means), dtype=np.int32)
    remap[rank] = np.arange(1, len(rank) + 1, dtype=np.int32)
    labels = remap[comp].reshape(f.shape)

    stats, boundaries = [], []
    for lab in range(1, len(rank) + 1):
        vals = flat[labels.ravel() == lab]
        stats.append((float(vals.mean()), float(vals.var())))
    # a broad component can also claim a far tail, so each boundary is taken
    # where the run of labels >= lab + 1 starts at the top of the sorted values
    order = np.argsort(flat, kind="stable")
    sv, sl = flat[order], labels.ravel()[order]
    for lab in range(1, len(rank)):
        below = np.nonzero(sl <= lab)[0]
        i = below[-1]
        hi_val = sv[i + 1] if i + 1 < len(sv) else sv[i]
        boundaries.append(float(0.5 * (sv[i] + hi_val)))
    return labels, tuple(stats), tuple(boundaries)


def smoke_map(stack, weights=DEFAULT_WEIGHTS, M=4, window=1, epsilon=DEFAULT_EPSILON):
    features = compute_features(stack, window=window, epsilon=epsilon)
    f = combine_likelihood(features, weights)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        labels, stats, bounds = segment_regions(f, M)
    for w in caught:
        log.warning("segmentation: %s", w.message)
    return SmokeMap(f=f, weights=check_weights(weights), labels=labels, M=M,
                    region_stats=stats, boundaries=bounds), features

"""Kernel dispatch: the compiled extension when available, numpy otherwise.

Set ``EVENTSVE_PURE=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("EVENTSVE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py


def integrate_fire(logi, times, ref, C, backend=None):
    """Emit threshold crossings of per-pixel log intensity.

    Parameters
    ----------
    logi : (T, N) array
        Log intensity of N pixels sampled at ``times``.
    times : (T,) array
        Sample times in microseconds.
    ref : (N,) array
        Reference levels; updated in place.
    C : float
        Contrast threshold.

    Returns
    -------
    t, pixel, polarity : arrays sorted by (t, pixel, polarity)
    """
    impl = _pick(backend)
    logi = np.ascontiguousarray(logi, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    if ref.dtype != np.float64 or not ref.flags.c_contiguous:
        raise TypeError("ref must be a contiguous float64 array")
    t, i, p = impl.integrate_fire(logi, times, ref, float(C))
    order = np.lexsort((p, i, t))
    return t[order], i[order], p[order]


def density_cluster(u, v, t, r_s, r_t, min_core, backend=None):
    impl = _pick(backend)
    f = lambda x: np.ascontiguousarray(x, dtype=np.float64)  # noqa: E731
    return impl.density_cluster(f(u), f(v), f(t), float(r_s), float(r_t), int(min_core))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {backend!r}")

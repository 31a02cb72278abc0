import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventsve import kernels

pytest.importorskip("eventsve._kernels", reason="compiled kernels not built")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(2, 40), N=st.integers(1, 30),
       C=st.floats(0.05, 0.5), scale=st.floats(0.0, 3.0))
def test_integrate_fire_backends_agree(seed, T, N, C, scale):
    rng = np.random.default_rng(seed)
    logi = np.cumsum(rng.normal(0, scale * C, (T, N)), axis=0)
    times = np.cumsum(rng.uniform(1, 20, T))
    outs = []
    for backend in ("python", "cython"):
        ref = np.ascontiguousarray(logi[0].copy())
        outs.append(kernels.integrate_fire(logi, times, ref, C, backend=backend) + (ref,))
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(0, 400), r_s=st.floats(1.0, 6.0),
       r_t=st.floats(50.0, 800.0), min_core=st.integers(1, 12))
def test_density_cluster_backends_agree(seed, n, r_s, r_t, min_core):
    rng = np.random.default_rng(seed)
    u = rng.integers(0, 60, n).astype(float)
    v = rng.integers(0, 60, n).astype(float)
    t = np.sort(rng.integers(0, 2000, n)).astype(float)
    a = kernels.density_cluster(u, v, t, r_s, r_t, min_core, backend="python")
    b = kernels.density_cluster(u, v, t, r_s, r_t, min_core, backend="cython")
    np.testing.assert_array_equal(a, b)


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_bad_backend_name():
    with pytest.raises(ValueError):
        kernels.density_cluster([0.0], [0.0], [0.0], 1.0, 1.0, 1, backend="fortran")

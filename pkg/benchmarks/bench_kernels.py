"""Compiled vs numpy kernels on event-simulation and clustering workloads.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--pixels N] [--events N]

Both backends are checked for identical output before timing.
"""
import argparse
import time

import numpy as np

from eventsve import kernels


def integrate_workload(n_pixels, n_steps, seed):
    rng = np.random.default_rng(seed)
    t = 10.0 * np.arange(n_steps)
    # drifting log intensity with a moving edge
    base = rng.normal(0.0, 0.05, size=(n_steps, n_pixels)).cumsum(axis=0)
    edge = np.clip((np.arange(n_pixels)[None, :] - 0.02 * t[:, None] * n_pixels / n_steps) / 3.0, 0, 1)
    return base + 2.0 * edge, t


def cluster_workload(n_events, seed):
    rng = np.random.default_rng(seed)
    n_blob = n_events // 2
    centres = rng.uniform(50, 950, size=(20, 2))
    pick = rng.integers(0, 20, n_blob)
    blob = centres[pick] + rng.normal(0, 6.0, size=(n_blob, 2))
    noise = rng.uniform(0, 1000, size=(n_events - n_blob, 2))
    xy = np.rint(np.vstack([blob, noise]))
    t = np.sort(rng.uniform(0, 5000, n_events))
    return xy[:, 0], xy[:, 1], t


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--pixels", type=int, default=20000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--events", type=int, default=60000)
    args = ap.parse_args()
    try:
        from eventsve import _kernels  # noqa: F401
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    logi, t = integrate_workload(args.pixels, args.steps, 0)
    rows = []

    def fire(backend):
        ref = np.ascontiguousarray(logi[0].copy())
        return kernels.integrate_fire(logi, t, ref, 0.15, backend=backend)

    tc, out_c = best_of(lambda: fire("cython"), args.repeat)
    tp, out_p = best_of(lambda: fire("python"), args.repeat)
    same = all(np.array_equal(a, b) for a, b in zip(out_c, out_p))
    rows.append(("integrate_fire", f"{args.pixels}px x {args.steps}", len(out_c[0]), tc, tp, same))

    u, v, tt = cluster_workload(args.events, 1)
    tc, lab_c = best_of(lambda: kernels.density_cluster(u, v, tt, 4.0, 500.0, 8, backend="cython"), args.repeat)
    tp, lab_p = best_of(lambda: kernels.density_cluster(u, v, tt, 4.0, 500.0, 8, backend="python"), args.repeat)
    rows.append(("density_cluster", f"{args.events} events", int(lab_c.max()) + 1, tc, tp,
                 bool(np.array_equal(lab_c, lab_p))))

    print(f"{'kernel':<16} {'workload':<20} {'output':>9} {'cython s':>9} {'numpy s':>9} {'speedup':>8}  identical")
    for name, work, n, tc, tp, same in rows:
        print(f"{name:<16} {work:<20} {n:>9} {tc:>9.3f} {tp:>9.3f} {tp / tc:>7.1f}x  {same}")


if __name__ == "__main__":
    main()

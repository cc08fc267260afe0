"""Compare the compiled and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 64]

Times each hot kernel and one TinyNet training step per backend, checks that
both backends agree, and prints a table of best-of-N wall times.
"""
import argparse
import time

import numpy as np

from confwise import kernels
from confwise.losses import make_loss
from confwise.model import TinyNet
from confwise.synth import SynthConfig, generate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(size, rng):
    x8 = rng.normal(size=(8, size, size))
    w = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    gy = rng.normal(size=(16, size, size))
    mask = (rng.random((size, size)) < 0.05).astype(np.uint8)
    sample = generate(SynthConfig(height=size, width=size, seed=1), 1)[0]
    loss = make_loss("acw")

    def step(impl):
        net = TinyNet(4, seed=0)
        _, cache = net.forward(sample.image, return_cache=True)
        res, _ = loss(net.predict(sample.image), sample.labels)
        net.backward(cache, res.grad_logits)

    return {
        "conv2d_forward 8->16": lambda impl: impl.conv2d_forward(x8, w, b),
        "conv2d_backward 8->16": lambda impl: impl.conv2d_backward(x8, w, gy, True),
        "dilate r=2": lambda impl: impl.dilate(mask, 2, False),
        "squared_edt": lambda impl: impl.squared_edt(mask),
        "TinyNet step (acw)": step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repetitions, best is reported (default 5)")
    ap.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    args = ap.parse_args(argv)

    if "cython" not in kernels.BACKENDS:
        print("compiled backend not built; only the python backend is available")
    rng = np.random.default_rng(0)
    jobs = workloads(args.size, rng)
    names = list(kernels.BACKENDS)
    results = {}
    saved = kernels._impl
    try:
        for backend in names:
            impl = kernels.BACKENDS[backend]
            kernels._impl = impl  # TinyNet calls go through the dispatcher
            for job, fn in jobs.items():
                results[job, backend] = best_of(lambda: fn(impl), args.repeat)
    finally:
        kernels._impl = saved

    if len(names) == 2:
        py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
        x, w, b = rng.normal(size=(8, 20, 20)), rng.normal(size=(16, 8, 3, 3)), rng.normal(size=16)
        np.testing.assert_allclose(cy.conv2d_forward(x, w, b), py.conv2d_forward(x, w, b), rtol=1e-12, atol=1e-12)
        m = (rng.random((20, 20)) < 0.1).astype(np.uint8)
        np.testing.assert_array_equal(cy.dilate(m, 2, False), py.dilate(m, 2, False))
        np.testing.assert_array_equal(cy.squared_edt(m), py.squared_edt(m))
        print("backends agree on conv, dilate and EDT")

    width = max(len(j) for j in jobs)
    header = f"{'kernel':<{width}}" + "".join(f"  {n + ' ms':>12}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(f"{args.size}x{args.size}, best of {args.repeat}")
    print(header)
    for job in jobs:
        line = f"{job:<{width}}" + "".join(f"  {results[job, n] * 1e3:>12.3f}" for n in names)
        if len(names) == 2:
            line += f"  {results[job, 'python'] / results[job, 'cython']:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy convolution/pooling kernels.

Times each kernel at the shapes of one canonical training batch
(8 chunks x 51 frames x 40 bins) and then one full forward+backward step
with each backend swapped in. Also checks that both backends agree bit for
bit on every output.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time
from contextlib import contextmanager

import numpy as np

from ctdnn_sv.ctdnn import build_ctdnn, canonical_config
from ctdnn_sv.ndnn import kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


@contextmanager
def use_backend(impl):
    saved = {k: getattr(kernels, k) for k in ("im2col", "col2im", "maxpool_forward",
                                               "maxpool_backward")}
    try:
        for k in saved:
            setattr(kernels, k, getattr(impl, k))
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def kernel_cases(rng):
    x1 = rng.standard_normal((8, 9, 43, 40)).astype(np.float32)
    c1 = rng.standard_normal((8, 32, 42, 36)).astype(np.float32)
    c2 = rng.standard_normal((8, 64, 41, 16)).astype(np.float32)
    cases = {}
    for name, x, kh, kw in (("conv1", x1, 2, 5), ("conv2", rng.standard_normal(
            (8, 32, 42, 18)).astype(np.float32), 2, 3)):
        n, c, h, w = x.shape
        cols_shape = (n, h - kh + 1, w - kw + 1, c * kh * kw)
        d = rng.standard_normal(cols_shape).astype(np.float32)
        cases[f"im2col {name}"] = (lambda k, x=x, kh=kh, kw=kw: k.im2col(x, kh, kw))
        cases[f"col2im {name}"] = (lambda k, d=d, c=c, h=h, w=w, kh=kh, kw=kw:
                                   k.col2im(d, c, h, w, kh, kw))
    for name, x in (("pool1", c1), ("pool2", c2)):
        h, w = x.shape[2:]
        cases[f"maxpool fwd {name}"] = lambda k, x=x: k.maxpool_forward(x, 1, 2, 1, 2)
        y, arg = kernels.available_backends()["numpy"].maxpool_forward(x, 1, 2, 1, 2)
        dy = rng.standard_normal(y.shape).astype(np.float32)
        cases[f"maxpool bwd {name}"] = (lambda k, dy=dy, arg=arg, h=h, w=w:
                                        k.maxpool_backward(dy, arg, h, w, 1, 2, 1, 2))
    return cases


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    names = sorted(backends)
    print(f"backends: {', '.join(names)} (default: {kernels.BACKEND})")
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s}" + "".join(f"{n:>12s}" for n in names) + "   speedup  identical")
    for label, fn in kernel_cases(rng).items():
        t = {n: best_of(lambda: fn(backends[n]), args.repeat) for n in names}
        ident = same(*(fn(backends[n]) for n in names)) if len(names) > 1 else True
        speed = t["numpy"] / t["cython"] if "cython" in t else 1.0
        print(f"{label:22s}" + "".join(f"{t[n] * 1e3:10.2f}ms" for n in names)
              + f"{speed:9.2f}x  {ident}")

    model = build_ctdnn(canonical_config(32), seed=0)
    x = rng.standard_normal((8, 51, 40)).astype(np.float32)
    labels = rng.integers(0, 32, size=8)
    results, times = {}, {}
    for n in names:
        with use_backend(backends[n]):
            times[n] = best_of(lambda: model.loss_and_grads(x, labels), max(3, args.repeat // 4))
            results[n] = model.loss_and_grads(x, labels)
    ident = True
    if len(names) > 1:
        ident = results["numpy"][0] == results["cython"][0] and all(
            np.array_equal(results["numpy"][1][k], results["cython"][1][k])
            for k in results["numpy"][1])
    speed = times["numpy"] / times["cython"] if "cython" in times else 1.0
    print(f"{'train step (8x51x40)':22s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in names)
          + f"{speed:9.2f}x  {ident}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row reports the best wall time per call for both backends, checks that
they agree, and prints the speedup. The last row is one forward and backward
pass of the overfit-fixture network on a batch of 8.
"""
import argparse
import timeit

import numpy as np

from renet import kernels
from renet.kernels import backend_module
from renet.nn import ModelConfig, build_model
from renet.tensor import RngStream, Tensor

KERNELS = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "bilinear_sample")


def cases(rng):
    x = rng.standard_normal((8, 16, 48, 48)).astype(np.float32)
    cols = backend_module("python").im2col(x, 3, 3, 1, 1)
    pooled, idx = backend_module("python").maxpool_forward(x, 2, 2)
    img = rng.uniform(300, 500, (240, 320)).astype(np.float64)
    us = rng.uniform(-5, 325, (96, 96))
    vs = rng.uniform(-5, 245, (96, 96))
    return {
        "im2col 8x16x48x48 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 8x16x48x48 k3": lambda k: k.col2im(cols, 8, 16, 48, 48, 3, 3, 1, 1),
        "maxpool fwd 2/2": lambda k: k.maxpool_forward(x, 2, 2)[0],
        "maxpool bwd 2/2": lambda k: k.maxpool_backward(pooled, idx, 48, 48),
        "bilinear 96x96": lambda k: k.bilinear_sample(img, us, vs, 0.0),
        "REN step 8x48x48": train_step(rng),
    }


def train_step(rng):
    cfg = ModelConfig(input_size=48, channels=(8, 16, 32), fc_width=128, joints=16, regions="four", dropout=0.0)
    model = build_model(cfg, RngStream(0)).train()
    x = rng.uniform(-1, 1, (8, 1, 48, 48)).astype(np.float32)

    def step(k):
        for name in KERNELS:
            setattr(kernels, name, getattr(k, name))
        out = model(Tensor(x))
        out.sum().backward()
        grads = np.concatenate([p.grad.ravel() for p in model.params.values()])
        for p in model.params.values():
            p.grad = None
        return grads

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    py = backend_module("python")
    try:
        cy = backend_module("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        np.testing.assert_allclose(fn(cy), fn(py), rtol=1e-6, atol=1e-6)
        t_py = min(timeit.repeat(lambda: fn(py), number=3, repeat=args.repeat)) / 3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=3, repeat=args.repeat)) / 3
        print(f"{name:24s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

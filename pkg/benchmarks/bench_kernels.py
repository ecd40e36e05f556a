"""Compare the compiled kernels with the NumPy fallback.

Times each kernel in isolation and one forward+backward pass of the desk
model, and checks that both backends give bitwise-equal results.

    python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from l2plab.nn import build_model, mini_resnet_spec
from l2plab.tensor import kernels, softmax_cross_entropy


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(batch, rng):
    x = rng.standard_normal((batch, 16, 32, 32))
    x2 = rng.standard_normal((batch, 32, 16, 16))
    cols = {}
    for name, impl in kernels.BACKENDS.items():
        cols[name] = impl.im2col(x, 3, 3, 1, 1)
    c = cols["numpy"]
    cases = [
        ("im2col 16x32x32 k3 s1", lambda m: m.im2col(x, 3, 3, 1, 1)),
        ("im2col 32x16x16 k3 s2", lambda m: m.im2col(x2, 3, 3, 2, 1)),
        ("col2im 16x32x32 k3 s1", lambda m: m.col2im(c, x.shape, 3, 3, 1, 1)),
        ("avgpool fwd k2", lambda m: m.avg_pool_forward(x, 2)),
        ("avgpool bwd k2", lambda m: m.avg_pool_backward(x2, 2)),
    ]
    return cases


def model_step(batch, rng):
    model = build_model(mini_resnet_spec(base=16), (3, 32, 32), seed=0)
    model.set_noise(True)
    x = rng.random((batch, 3, 32, 32))
    y = rng.integers(0, 10, batch)

    def step():
        model.reseed_noise(0)
        model.params.zero_grad()
        softmax_cross_entropy(model(x), y).backward()
        return model.params["layers.3.conv1.weight"].grad.copy()

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    if "cython" not in kernels.BACKENDS:
        raise SystemExit("compiled extension not built; run pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}  equal")
    for label, fn in kernel_cases(a.batch, rng):
        outs, times = {}, {}
        for name in ("cython", "numpy"):
            impl = kernels.BACKENDS[name]
            outs[name] = fn(impl)
            times[name] = _best(lambda: fn(impl), a.repeat)
        eq = np.array_equal(outs["cython"], outs["numpy"])
        print(f"{label:<28}{1e3 * times['cython']:>12.1f}{1e3 * times['numpy']:>12.1f}"
              f"{times['numpy'] / times['cython']:>9.2f}x  {eq}")
    step = model_step(a.batch, rng)
    outs, times = {}, {}
    for name in ("cython", "numpy"):
        kernels.use_backend(name)
        outs[name] = step()
        times[name] = _best(step, max(1, a.repeat // 2))
    kernels.use_backend("cython")
    eq = np.array_equal(outs["cython"], outs["numpy"])
    print(f"{'model fwd+bwd (desk)':<28}{1e3 * times['cython']:>12.1f}{1e3 * times['numpy']:>12.1f}"
          f"{times['numpy'] / times['cython']:>9.2f}x  {eq}")


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy convolution kernels.

Times ``im2col`` / ``col2im`` on their own and a full conv2d forward +
backward through the autodiff layer, for layer shapes from the default
28x28 conv stack. Prints a table and checks that both backends agree bit
for bit.

    python benchmarks/bench_conv.py [--repeat N] [--batch B]
"""

import argparse
import timeit

import numpy as np

from equivae import kernels
from equivae import tensor as T
from equivae.tensor import Tensor

# (channels in, filters, spatial size, stride), the default 28x28 encoder
LAYERS = [(1, 8, 28, 1), (8, 16, 28, 2), (16, 32, 14, 2), (32, 64, 7, 2), (64, 64, 4, 2)]
K = 5


def kernel_inputs(rng, batch, c, size, stride):
    p = (K - 1) // 2
    oh = T.conv_output_size(size, stride)
    xp = rng.normal(size=(batch, c, size + 2 * p, size + 2 * p))
    cols = rng.normal(size=(batch * oh * oh, c * K * K))
    return xp, cols, oh


def time_call(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def conv_step(x, w, b, stride):
    out = T.conv2d(x, w, b, stride)
    T.backward(T.reduce_sum(T.square(out)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"batch {args.batch}, kernel {K}x{K}, best of {args.repeat} (ms)")
    header = f"{'layer':<22}" + "".join(f"{b + ' ' + op:>18}" for op in ("im2col", "col2im", "conv f+b") for b in backends)
    if len(backends) == 2:
        header += f"{'speedup f+b':>14}"
    print(header)
    for c, f, size, stride in LAYERS:
        xp, cols, oh = kernel_inputs(rng, args.batch, c, size, stride)
        x = Tensor(rng.normal(size=(args.batch, c, size, size)), requires_grad=True)
        w = Tensor(rng.normal(size=(f, c, K, K)) * 0.1, requires_grad=True)
        b = Tensor(np.zeros(f), requires_grad=True)
        results, outputs = {}, {}
        for name in backends:
            be = kernels.get_backend(name)
            results[(name, "im2col")] = time_call(lambda: be.im2col(xp, K, stride, oh, oh), args.repeat)
            results[(name, "col2im")] = time_call(lambda: be.col2im(cols, xp.shape, K, stride, oh, oh), args.repeat)
            prev = kernels.set_backend(name)
            try:
                results[(name, "conv f+b")] = time_call(lambda: conv_step(x, w, b, stride), args.repeat)
                outputs[name] = (be.im2col(xp, K, stride, oh, oh), be.col2im(cols, xp.shape, K, stride, oh, oh))
            finally:
                kernels.set_backend(prev)
        row = f"{f'{c}->{f} @{size} s{stride}':<22}"
        row += "".join(f"{1e3 * results[(bk, op)]:>18.2f}" for op in ("im2col", "col2im", "conv f+b") for bk in backends)
        if len(backends) == 2:
            row += f"{results[('python', 'conv f+b')] / results[('cython', 'conv f+b')]:>13.2f}x"
            same = all(np.array_equal(a, bb) for a, bb in zip(outputs["python"], outputs["cython"]))
            row += "" if same else "  MISMATCH"
        print(row)


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the PyTorch fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the pixel decoder on a 256x256 input: three levels at
1/32, 1/16 and 1/8, 8 heads, 4 points, 16 channels per head.
"""
import argparse
import time

import numpy as np
import torch

from cdmask import ops


def _deform_inputs(n=2, size=256, heads=8, points=4, head_dim=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    shapes = torch.tensor([[size // s, size // s] for s in (32, 16, 8)])
    starts = torch.cat([shapes.new_zeros(1), (shapes[:, 0] * shapes[:, 1]).cumsum(0)[:-1]])
    s = int((shapes[:, 0] * shapes[:, 1]).sum())
    value = torch.randn(n, s, heads, head_dim, generator=g)
    loc = torch.rand(n, s, heads, len(shapes), points, 2, generator=g)
    attn = torch.rand(n, s, heads, len(shapes), points, generator=g)
    attn = attn / attn.sum((-1, -2), keepdim=True)
    return value, shapes, starts, loc, attn


def _best(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_deform(repeat):
    value, shapes, starts, loc, attn = _deform_inputs()

    def forward():
        with torch.no_grad():
            ops.ms_deform_attn(value, shapes, starts, loc, attn)

    def backward():
        v, l, a = (x.clone().requires_grad_() for x in (value, loc, attn))
        ops.ms_deform_attn(v, shapes, starts, l, a).sum().backward()

    return {"ms_deform_attn fwd": _best(forward, repeat), "ms_deform_attn fwd+bwd": _best(backward, repeat)}


def bench_confusion(repeat):
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 2, (16, 256, 256), dtype=np.uint8)
    gt = rng.integers(0, 2, (16, 256, 256), dtype=np.uint8)
    return {"confusion_counts": _best(lambda: ops.confusion_counts(pred, gt), repeat)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    backends = ["torch"] + (["cython"] if ops.HAVE_EXTENSION else [])
    if not ops.HAVE_EXTENSION:
        print("Cython kernels not built; timing the fallback only")
    results = {}
    previous = ops.BACKEND
    try:
        for name in backends:
            ops.set_backend(name)
            results[name] = {**bench_deform(args.repeat), **bench_confusion(args.repeat)}
    finally:
        ops.set_backend(previous)

    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for kernel in results["torch"]:
        row = [results[b][kernel] * 1e3 for b in backends]
        line = f"{kernel:<26}" + "".join(f"{ms:>10.2f}ms" for ms in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()

"""Compare the numba kernels with their numpy fallbacks.

Shapes follow the 197-token benchmark geometry (D=192, 3 heads).  Each
kernel is timed on both backends, then a full no-grad forward pass is timed
with the numpy, all-numba and default mixed backends switched in.

    python benchmarks/bench_kernels.py [--trials 50] [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from marlprune import _kernels
from marlprune import numerics as nx
from marlprune.vit import ViTConfig, ViTModel, run_model


def kernel_cases(rng, dtype):
    n, D, H = 197, 192, 3
    scores = rng.normal(size=(1, H * n, n)).astype(dtype)
    keep = rng.random((1, n)) < 0.5
    keep[:, 0] = True
    mask = np.where(keep, 0.0, nx.MASK_VALUE).astype(dtype)
    x = rng.normal(size=(n, D)).astype(dtype)
    gain, bias = np.ones(D, dtype), np.zeros(D, dtype)
    h = rng.normal(size=(n, 4 * D)).astype(dtype)
    g_scores = rng.normal(size=scores.shape).astype(dtype)
    g_x = rng.normal(size=x.shape).astype(dtype)
    g_h = rng.normal(size=h.shape).astype(dtype)

    def cases(impl):
        probs = impl.softmax_rows(scores, mask)
        _, xhat, rstd = impl.layer_norm(x, gain, bias, 1e-6)
        return {
            "softmax_rows": lambda: impl.softmax_rows(scores, mask),
            "softmax_rows_bwd": lambda: impl.softmax_rows_bwd(probs, g_scores),
            "layer_norm": lambda: impl.layer_norm(x, gain, bias, 1e-6),
            "layer_norm_bwd": lambda: impl.layer_norm_bwd(g_x, xhat, rstd, gain),
            "gelu": lambda: impl.gelu(h),
            "gelu_bwd": lambda: impl.gelu_bwd(h, g_h),
        }

    return cases


def best_us(fn, trials: int, repeat: int) -> float:
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=trials, repeat=repeat)) / trials * 1e6


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args(argv)
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    dtype = np.dtype(args.dtype)
    cases = kernel_cases(np.random.default_rng(0), dtype)
    nb, npy = cases(_kernels.numba_impl), cases(_kernels.numpy_impl)

    print(f"{'kernel':<18} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    with threadpool_limits(limits=1):
        for name in nb:
            t_np = best_us(npy[name], args.trials, args.repeat)
            t_nb = best_us(nb[name], args.trials, args.repeat)
            print(f"{name:<18} {t_np:>10.1f} {t_nb:>10.1f} {t_np / t_nb:>8.2f}")

        cfg = ViTConfig.benchmark()
        model = ViTModel(cfg, np.random.default_rng(1), dtype)
        img = np.random.default_rng(2).random((1, 3, 224, 224)).astype(dtype)

        def forward():
            with nx.no_grad():
                run_model(img, model)

        saved = _kernels.active
        try:
            timings = {}
            for label, impl in (("numpy", _kernels.numpy_impl), ("numba", _kernels.numba_impl),
                                ("mixed", _kernels.accelerated)):
                _kernels.active = impl
                timings[label] = best_us(forward, max(1, args.trials // 10), args.repeat)
        finally:
            _kernels.active = saved
    base = timings["numpy"]
    print(f"\n{'vit forward':<18} {'us':>10} {'vs numpy':>8}")
    for label, t in timings.items():
        print(f"{label:<18} {t:>10.1f} {base / t:>8.2f}")


if __name__ == "__main__":
    main()

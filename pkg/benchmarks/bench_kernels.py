"""Compare the numba and numpy implementations of the hot kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size 400x300]

Both variants are called directly, so the env flag does not matter here.
The first numba call (compilation or cache load) is excluded from timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from scleraseg import kernels
from scleraseg.architectures import VOC_ANCHORS


def _cases(width: int, height: int, rng: np.random.Generator):
    pred = rng.random((height, width)) < 0.3
    gt = rng.random((height, width)) < 0.3
    base = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    raw = rng.normal(0.0, 2.0, (13, 13, 30))
    anchors = np.asarray(VOC_ANCHORS)
    return {
        "pixel_counts": (kernels.pixel_counts_numba, kernels.pixel_counts_numpy, (pred, gt)),
        "overlay": (kernels.overlay_numba, kernels.overlay_numpy, (base, pred, gt)),
        "resize_nearest": (kernels.resize_nearest_numba, kernels.resize_nearest_numpy,
                           (pred, 240, 320)),
        "decode_grid": (kernels.decode_grid_numba, kernels.decode_grid_numpy,
                        (raw, anchors, 1, 0.25)),
    }


def run(repeat: int, width: int, height: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    results = []
    for name, (fast, ref, args) in _cases(width, height, rng).items():
        fast(*args)  # compile / load from cache
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        t_ref = min(timeit.repeat(lambda: ref(*args), number=1, repeat=repeat))
        results.append((name, t_fast, t_ref))
    return results


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--size", default="400x300", help="mask size WxH")
    args = parser.parse_args(argv)
    width, height = (int(v) for v in args.size.lower().split("x"))
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t_fast, t_ref in run(args.repeat, width, height):
        print(f"{name:<16}{t_fast * 1e3:>10.3f}{t_ref * 1e3:>10.3f}{t_ref / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()

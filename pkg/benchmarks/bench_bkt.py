"""Time the batch knowledge-tracing fold: numba kernel vs. numpy fallback.

    python benchmarks/bench_bkt.py [--sequences 200000] [--repeat 5]

Sequences are 1-10 observations long, the size of a ten-question lesson.
"""

import argparse
import timeit

import numpy as np

from mathgrade import _kernels
from mathgrade.bkt import default_params


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    lengths = rng.integers(1, 11, size=args.sequences)
    offsets = np.zeros(args.sequences + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    obs = rng.random(int(offsets[-1])) < 0.65
    p = default_params()
    params = (p.p_l0, p.p_t, p.p_s, p.p_g)

    backends = {"numpy": _kernels.fold_numpy}
    if _kernels.fold_jit is not None:
        _kernels.fold_jit(obs[:10], offsets[:2], *params)  # compile outside the timed region
        backends["numba"] = _kernels.fold_jit
    else:
        print("numba unavailable or disabled; timing the numpy path only")

    results = {}
    for name, fn in backends.items():
        best = min(timeit.repeat(lambda: fn(obs, offsets, *params), number=1, repeat=args.repeat))
        results[name] = fn(obs, offsets, *params)
        print(f"{name:>6}: {best * 1e3:9.2f} ms  ({obs.size / best / 1e6:7.1f} M obs/s)")
    if len(results) == 2:
        diff = np.max(np.abs(results["numpy"][0] - results["numba"][0]))
        print(f"max |numpy - numba| over {obs.size} observations: {diff:.3g}")


if __name__ == "__main__":
    main()

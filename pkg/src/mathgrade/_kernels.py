"""Batch knowledge-tracing fold over ragged observation sequences.

Sequences are packed CSR-style: ``obs`` holds every observation back to
back and ``offsets[k]:offsets[k+1]`` delimits sequence ``k``.

The numba kernel is used when numba imports and ``MATHGRADE_NO_NUMBA`` is
unset (or ``0``); otherwise the step-vectorized numpy path runs. Both return
identical arrays up to floating-point evaluation order.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MATHGRADE_NO_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by MATHGRADE_NO_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in CI
    HAVE_NUMBA = False


def fold_numpy(obs, offsets, p_l0, p_t, p_s, p_g):
    """Return ``(trace, final)``: per-observation knowledge and final value per sequence."""
    obs = np.asarray(obs, dtype=np.bool_)
    offsets = np.asarray(offsets, dtype=np.int64)
    n_seq = offsets.size - 1
    trace = np.empty(obs.size, dtype=np.float64)
    final = np.full(n_seq, np.nan)
    if n_seq <= 0:
        return trace, final
    lengths = np.diff(offsets)
    p = np.full(n_seq, float(p_l0))
    # step t advances every sequence still longer than t
    for t in range(int(lengths.max(initial=0))):
        live = np.nonzero(lengths > t)[0]
        idx = offsets[live] + t
        pk = p[live]
        correct = obs[idx]
        num = np.where(correct, pk * (1.0 - p_s), pk * p_s)
        den = num + np.where(correct, (1.0 - pk) * p_g, (1.0 - pk) * (1.0 - p_g))
        post = num / den
        pk = post + (1.0 - post) * p_t
        p[live] = pk
        trace[idx] = pk
    has = lengths > 0
    final[has] = p[has]
    return trace, final


if HAVE_NUMBA:

    @njit(cache=True)
    def _fold_jit(obs, offsets, p_l0, p_t, p_s, p_g, trace, final):
        for k in range(offsets.size - 1):
            p = p_l0
            start = offsets[k]
            stop = offsets[k + 1]
            for i in range(start, stop):
                if obs[i]:
                    num = p * (1.0 - p_s)
                    den = num + (1.0 - p) * p_g
                else:
                    num = p * p_s
                    den = num + (1.0 - p) * (1.0 - p_g)
                post = num / den
                p = post + (1.0 - post) * p_t
                trace[i] = p
            if stop > start:
                final[k] = p

    def fold_jit(obs, offsets, p_l0, p_t, p_s, p_g):
        obs = np.ascontiguousarray(obs, dtype=np.bool_)
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        trace = np.empty(obs.size, dtype=np.float64)
        final = np.full(max(offsets.size - 1, 0), np.nan)
        _fold_jit(obs, offsets, float(p_l0), float(p_t), float(p_s), float(p_g), trace, final)
        return trace, final

    fold = fold_jit
else:
    fold_jit = None
    fold = fold_numpy


def pack(sequences):
    """Pack a list of boolean sequences into ``(obs, offsets)``."""
    lengths = np.fromiter((len(s) for s in sequences), dtype=np.int64, count=len(sequences))
    offsets = np.zeros(len(sequences) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    obs = np.fromiter((bool(x) for s in sequences for x in s), dtype=np.bool_, count=int(offsets[-1]))
    return obs, offsets

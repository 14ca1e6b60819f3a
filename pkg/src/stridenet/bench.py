"""Attention cost sweeps and optional wall-clock timing of the attention kernels."""

from __future__ import annotations

import time

import numpy as np

from .attention import AttentionParams, msa_cost, window_attention, window_partition, wmsa_cost
from .tensor import make_rng

DEFAULT_SIDES = (112, 168, 224, 280, 336, 392, 448)


def cost_sweep(sides=DEFAULT_SIDES, channels: int = 96, window: int = 7) -> list[dict]:
    rows = []
    for side in sides:
        w, m = wmsa_cost(side, side, channels, window), msa_cost(side, side, channels)
        rows.append({"side": side, "tokens": side * side, "wmsa": w, "msa": m, "ratio": m / w})
    return rows


def fit_exponent(tokens, costs) -> float:
    """Least-squares slope of log(cost) against log(tokens)."""
    slope, _ = np.polyfit(np.log(np.asarray(tokens, float)), np.log(np.asarray(costs, float)), 1)
    return float(slope)


def scaling_exponents(rows: list[dict]) -> dict[str, float]:
    tokens = [r["tokens"] for r in rows]
    return {
        "wmsa": fit_exponent(tokens, [r["wmsa"] for r in rows]),
        "msa": fit_exponent(tokens, [r["msa"] for r in rows]),
    }


def time_attention(sides=None, channels: int = 32, window: int = 7, heads: int = 2,
                   repeats: int = 3, seed: int = 0) -> list[dict]:
    """Median forward time of windowed vs single-window (global) attention.

    ``sides`` defaults to 2, 4 and 6 windows per grid side.
    """
    if sides is None:
        sides = (2 * window, 4 * window, 6 * window)
    rng = make_rng(seed)
    d = channels

    def params(m):
        return AttentionParams(
            rng.normal(0, 0.02, (d, 3 * d)).astype(np.float32), np.zeros(3 * d, np.float32),
            rng.normal(0, 0.02, (d, d)).astype(np.float32), np.zeros(d, np.float32),
            np.zeros(((2 * m - 1) ** 2, heads), np.float32), heads, m,
        )

    rows = []
    for side in sides:
        x = rng.random((side, side, d)).astype(np.float32)
        entry = {"side": side}
        for label, m in (("wmsa_seconds", window), ("msa_seconds", side)):
            p = params(m)
            wins = window_partition(x, m)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                window_attention(wins, p)
                samples.append(time.perf_counter() - t0)
            entry[label] = float(np.median(samples))
        rows.append(entry)
    return rows

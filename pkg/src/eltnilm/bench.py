"""Attention cost versus sequence length: wall time and exact multiply counts."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from eltnilm.attention import linear_attention, local_attention, standard_attention
from eltnilm.tensor import Tensor, count_multiplies, no_grad

logger = logging.getLogger(__name__)

KERNELS = ("standard", "linear", "local")
DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)
# Divides every power-of-two length >= 16, so no padded windows are counted.
BENCH_L_WIN = 16


@dataclass
class BenchPoint:
    kernel: str
    length: int
    reps: int
    median_seconds: float
    multiplies: int
    error: Optional[str] = None


def _runner(kernel: str, l_win: int):
    if kernel == "standard":
        return standard_attention
    if kernel == "linear":
        return linear_attention
    if kernel == "local":
        return lambda q, k, v: local_attention(q, k, v, l_win)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def time_kernel(kernel: str, lengths, d_h: int = 64, l_win: int = BENCH_L_WIN, reps: int = 5,
                warmup: int = 3, seed: int = 0) -> list:
    """Median-of-``reps`` wall time and multiply count of one kernel per length.

    Runs single-threaded after ``warmup`` discarded calls. A length that fails
    (e.g. out of memory) yields a point with ``error`` set and NaN timing.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) < 2:
        raise ValueError("need at least two lengths")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    if reps < 5:
        raise ValueError("reps must be >= 5")
    run = _runner(kernel, l_win)
    points = []
    with threadpool_limits(limits=1), no_grad():
        for n in lengths:
            rng = np.random.default_rng([seed, n])
            try:
                q, k, v = (Tensor(rng.standard_normal((n, d_h))) for _ in range(3))
                with count_multiplies() as counter:
                    run(q, k, v)
                for _ in range(warmup):
                    run(q, k, v)
                times = []
                for _ in range(reps):
                    started = time.perf_counter()
                    run(q, k, v)
                    times.append(time.perf_counter() - started)
                points.append(BenchPoint(kernel, n, reps, statistics.median(times), counter.value))
            except MemoryError as exc:
                logger.warning("%s kernel failed at length %d: %s", kernel, n, exc)
                points.append(BenchPoint(kernel, n, reps, float("nan"), 0, f"MemoryError: {exc}"))
            logger.info("%s l=%d median %.4fs", kernel, n, points[-1].median_seconds)
    return points


def fit_exponent(lengths, values) -> tuple:
    """Least-squares slope of log(value) against log(length), and the RMS residual."""
    lengths = np.asarray(lengths, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(lengths) < 3:
        raise ValueError("need at least 3 points")
    if lengths.max() < 4 * lengths.min():
        raise ValueError("lengths must span at least a factor of 4")
    if not (values > 0).all():
        raise ValueError("timings must be positive")
    x, y = np.log(lengths), np.log(values)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(slope), float(np.sqrt(np.mean(resid ** 2)))


def fit_points(points: list, quantity: str = "time") -> tuple:
    ok = [p for p in points if p.error is None]
    vals = [p.median_seconds if quantity == "time" else p.multiplies for p in ok]
    return fit_exponent([p.length for p in ok], vals)


def write_csv(path, points: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kernel", "length", "median_seconds", "multiplies"])
        for p in points:
            writer.writerow([p.kernel, p.length, repr(p.median_seconds), p.multiplies])

"""Per-token cost of the O(d) kernels against dense matrix application.

Each method encodes a batch of tokens at distinct positions. The dense
baseline multiplies every token by its own precomputed ``d x d`` matrix,
so the ``O(d^3)`` exponential is amortized off and only the ``O(d^2)``
matrix-vector cost is timed. Timings are the median of ``iterations``
runs after ``warmup`` runs; the spread is the interquartile range.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend
from .multiplicative import MultiSubspaceMap, apply_ms
from .rank2 import PlaneGenerator, apply_exp, dense_exp_oracle

DEFAULT_DIMS = (64, 128, 256, 512, 1024)
DENSE_BYTES = 64 * 2 ** 20
CSV_COLUMNS = ("d", "method", "ns_per_op", "speedup", "iqr_ns", "tokens")
SLOPE_LIMIT = 1.5
SPEEDUP_D = 256
SPEEDUP_MIN = 5.0


@dataclass(frozen=True)
class Timing:
    median_ns: float
    iqr_ns: float
    samples: int


def time_call(fn: Callable[[], object], iterations: int = 30, warmup: int = 5) -> Timing:
    for _ in range(warmup):
        fn()
    samples = np.empty(iterations)
    for i in range(iterations):
        start = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - start
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return Timing(float(med), float(q3 - q1), iterations)


@dataclass(frozen=True)
class BenchRow:
    d: int
    method: str
    ns_per_op: float
    speedup: float
    iqr_ns: float
    tokens: int

    def as_list(self) -> list:
        return [self.d, self.method, f"{self.ns_per_op:.1f}", f"{self.speedup:.2f}",
                f"{self.iqr_ns:.1f}", self.tokens]


def loglog_slope(ds: Sequence[float], ns: Sequence[float]) -> float:
    """Least-squares slope of ``log(ns)`` against ``log(d)``."""
    x, y = np.log(np.asarray(ds, dtype=np.float64)), np.log(np.asarray(ns, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BenchReport:
    rows: list[BenchRow]
    slopes: dict[str, float]
    seconds: float
    notes: dict = field(default_factory=dict)

    def row(self, d: int, method: str) -> BenchRow:
        for r in self.rows:
            if r.d == d and r.method == method:
                return r
        raise KeyError((d, method))

    @property
    def fast_method(self) -> str:
        return f"ms_{self.notes['backend']}"

    def contract(self) -> dict[str, tuple[bool, float]]:
        """``slope`` of the active apply_ms backend and ``speedup`` at d=256."""
        out = {"slope": (self.slopes[self.fast_method] < SLOPE_LIMIT, self.slopes[self.fast_method])}
        dims = {r.d for r in self.rows}
        if SPEEDUP_D in dims:
            sp = self.row(SPEEDUP_D, self.fast_method).speedup
            out["speedup"] = (sp >= SPEEDUP_MIN, sp)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(r.as_list() for r in self.rows)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "rows": [dict(zip(CSV_COLUMNS, (r.d, r.method, r.ns_per_op, r.speedup, r.iqr_ns, r.tokens)))
                     for r in self.rows],
            "slopes": self.slopes,
            "contract": {k: {"passed": ok, "value": v} for k, (ok, v) in self.contract().items()},
            "seconds": self.seconds,
            "notes": self.notes,
        }


def dense_tokens(d: int) -> int:
    return int(np.clip(DENSE_BYTES // (8 * d * d), 4, 256))


def _methods(d: int, rng: np.random.Generator, tokens: int, backends: Sequence[str]):
    gmap = MultiSubspaceMap.rope(d)
    a, b = rng.normal(size=(2, d)) / np.sqrt(d)
    plane = PlaneGenerator(a, b, 0.5)
    X = rng.normal(size=(tokens, d))
    pos = rng.integers(0, 4096, size=tokens).astype(np.float64)

    out = {}
    for name in backends:
        def ms(name=name):
            with _backend.use_backend(name):
                return apply_ms(gmap, pos, X)

        def r2(name=name):
            with _backend.use_backend(name):
                return apply_exp(plane, pos, X)

        out[f"ms_{name}"] = (ms, tokens)
        out[f"rank2_{name}"] = (r2, tokens)

    m = dense_tokens(d)
    # G(n_t)^T row by row: rotating the identity with the fast path is exact
    # to rounding; one matrix is spot-checked against the dense exponential.
    mats = np.stack([apply_ms(gmap, p, np.eye(d)).T for p in pos[:m]])
    Xd = X[:m, :, None]

    def dense():
        return np.matmul(mats, Xd)

    out["dense"] = (dense, m)
    check = None
    if d <= 256:
        ref = dense_exp_oracle(gmap.generator(), pos[0])
        check = float(np.max(np.abs(ref - mats[0])))
    return out, check


def run_bench(dims: Sequence[int] = DEFAULT_DIMS, iterations: int = 30, warmup: int = 5,
              seed: int = 0, tokens: int = 256, backends: Optional[Sequence[str]] = None) -> BenchReport:
    start = time.perf_counter()
    backends = list(backends or _backend.available())
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    notes: dict = {"backend": _backend.name, "backends": backends, "iterations": iterations,
                   "warmup": warmup, "oracle_residual": {}}
    for d in dims:
        methods, check = _methods(int(d), rng, tokens, backends)
        if check is not None:
            notes["oracle_residual"][str(d)] = check
        per_op = {}
        spread = {}
        for name, (fn, count) in methods.items():
            t = time_call(fn, iterations, warmup)
            per_op[name] = t.median_ns / count
            spread[name] = t.iqr_ns / count
        for name, (_, count) in methods.items():
            rows.append(BenchRow(int(d), name, per_op[name], per_op["dense"] / per_op[name], spread[name], count))
    slopes = {}
    for name in {r.method for r in rows}:
        sel = [r for r in rows if r.method == name]
        if len(sel) >= 2:
            slopes[name] = loglog_slope([r.d for r in sel], [r.ns_per_op for r in sel])
    return BenchReport(rows, dict(sorted(slopes.items())), time.perf_counter() - start, notes)

"""Named property suite driven by ``grape check``.

Every property draws its inputs from a generator seeded by
``(seed, name)``, compares a fast path against an independent route and
reports the worst residual next to its tolerance.
"""
from __future__ import annotations

import contextlib
import fnmatch
import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from . import rank2
from .additive import (ForgetGates, UnipotentLift, additive_score, fox_bias, lift_k, lift_q,
                       unipotent_matrix)
from .attention import AttentionConfig, HeadEncoder, StreamingCache, logits_batch, step_streaming
from .multiplicative import MultiSubspaceMap, apply_ms, rope_reference
from .path_integral import endpoint_independent_row, path_product_check
from .rank2 import (PlaneGenerator, apply_exp, dense_exp_oracle, exp_coefficients, exp_derivatives)
from .spectral import (PathFactorSeq, dictionary_closure_check, match_spectra, path_product_report,
                       rank2_spectrum, unipotent_report)


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} residual={self.residual:.3e}  tol={self.tolerance:.0e}{extra}"

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "residual": self.residual,
                "tolerance": self.tolerance, "seconds": self.seconds, "detail": self.detail}


_REGISTRY: dict[str, tuple[float, Callable]] = {}


def prop(name: str, tol: float):
    def register(fn):
        _REGISTRY[name] = (tol, fn)
        return fn
    return register


def names() -> list[str]:
    return list(_REGISTRY)


def select(pattern: Optional[str]) -> list[str]:
    """Glob match (``relative-law*``) or, for plain words, substring match."""
    if not pattern:
        return names()
    if any(ch in pattern for ch in "*?["):
        return [n for n in _REGISTRY if fnmatch.fnmatchcase(n, pattern)]
    return [n for n in _REGISTRY if pattern in n]


@contextlib.contextmanager
def inject_fault(kind: Optional[str]) -> Iterator[None]:
    """Temporarily break a kernel so the suite can be shown to notice."""
    if kind in (None, ""):
        yield
        return
    if kind != "f2":
        raise ValueError(f"unknown fault {kind!r}")
    saved = rank2._f2_fault_scale
    rank2._f2_fault_scale = 1.0 + 1e-3
    try:
        yield
    finally:
        rank2._f2_fault_scale = saved


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2 ** 64 - 1), zlib.crc32(name.encode())])


def run(seed: int = 0, pattern: Optional[str] = None, scale: float = 1.0) -> list[PropertyResult]:
    """Run the selected properties; ``scale`` shrinks or grows case counts."""
    out = []
    for name in select(pattern):
        tol, fn = _REGISTRY[name]
        start = time.perf_counter()
        try:
            residual, detail = fn(_rng(seed, name), max(1, int(round(100 * scale))))
            residual = float(residual)
            passed = bool(np.isfinite(residual) and residual <= tol)
        except (ArithmeticError, ValueError) as exc:
            residual, detail, passed = float("inf"), f"{type(exc).__name__}: {exc}", False
        out.append(PropertyResult(name, passed, residual, tol, time.perf_counter() - start, detail))
    return out


def _random_plane(rng, d, gauge=True, omega=None):
    """Random plane whose rotation rate is ``omega`` rad per position
    (orthonormal pair) or about ``omega`` (raw pair scaled so ``s ~ 1``)."""
    a, b = rng.normal(size=(2, d)) / np.sqrt(d)
    omega = rng.uniform(0.05, 1.0) if omega is None else omega
    if gauge:
        g = PlaneGenerator.gauge_fixed(a, b)
        return PlaneGenerator(g.a, g.b, omega)
    return PlaneGenerator(a, b, omega)


@prop("relative-law-rank2", 1e-9)
def _relative_rank2(rng, cases):
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([2, 4, 8]))
        g = _random_plane(rng, d)
        s, t = rng.uniform(-64, 64, size=2)
        x = rng.normal(size=d)
        L = g.omega * g.matrix()
        dense = dense_exp_oracle(L, s).T @ dense_exp_oracle(L, t)
        worst = max(worst, np.max(np.abs(apply_exp(g, t - s, x) - dense @ x)))
    return worst, ""


@prop("relative-law-multiplicative", 1e-9)
def _relative_ms(rng, cases):
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([4, 8, 16]))
        gmap = MultiSubspaceMap.rope(d)
        s, t = rng.integers(0, 4096, size=2)
        q, k = rng.normal(size=(2, d))
        lhs = apply_ms(gmap, s, q) @ apply_ms(gmap, t, k)
        worst = max(worst, abs(lhs - q @ apply_ms(gmap, t - s, k)))
    return worst, ""


def _random_lift(rng, kind, d):
    if kind == "alibi":
        return UnipotentLift("alibi", d, beta=rng.uniform(0, 1))
    if kind == "gated":
        return UnipotentLift("gated", d, omega=rng.uniform(0.1, 1), v=rng.normal(size=d), u=rng.normal(size=d))
    return UnipotentLift("shift_vector", d, omega=rng.uniform(0.1, 1), u_shift=rng.normal(size=d) / np.sqrt(d))


def _dense_additive(lift, q, k, i, j):
    lam = None
    if lift.kind == "gated":
        from .additive import compute_gates
        lam = compute_gates(lift, q, k).Lambda
    Gi = unipotent_matrix(lift, i * lift.omega, lam)
    Gj = unipotent_matrix(lift, j * lift.omega, lam)
    return float((Gi @ lift_q(q, lift)) @ (np.linalg.inv(Gj).T @ lift_k(k, lift)))


@prop("relative-law-additive", 1e-9)
def _relative_additive(rng, cases):
    worst = 0.0
    for kind in ("alibi", "gated", "shift_vector"):
        for _ in range(cases):
            d = int(rng.choice([2, 8, 16]))
            lift = _random_lift(rng, kind, d)
            i, j = (int(v) for v in rng.integers(0, 512, size=2))
            q, k = rng.normal(size=(2, d))
            worst = max(worst, abs(additive_score(lift, q, k, i, j) - _dense_additive(lift, q, k, i, j)))
    return worst, ""


@prop("rope-recovery", 1e-12)
def _rope(rng, cases):
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([4, 64, 128]))
        n = int(rng.integers(0, 4097))
        x = rng.normal(size=d)
        worst = max(worst, np.max(np.abs(apply_ms(MultiSubspaceMap.rope(d), n, x) - rope_reference(d, 10000.0, n, x))))
    return worst, ""


@prop("alibi-recovery", 1e-12)
def _alibi(rng, cases):
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(2, 33))
        beta = rng.uniform(0, 1)
        lift = UnipotentLift("alibi", d, beta=beta)
        i, j = (int(v) for v in rng.integers(0, 1024, size=2))
        q, k = rng.normal(size=(2, d))
        closed = additive_score(lift, q, k, i, j)
        worst = max(worst, abs(closed - _dense_additive(lift, q, k, i, j)),
                    abs(closed - (float(q @ k) + (j - i) * beta)))
    return worst, ""


@prop("fox-recovery", 1e-12)
def _fox(rng, cases):
    L = 256
    worst = 0.0
    f = rng.uniform(0.5, 1.0, size=L)
    gates = ForgetGates(f)
    log_f = np.log(f)
    for _ in range(cases):
        i = int(rng.integers(0, L))
        j = int(rng.integers(0, i + 1))
        direct = math.fsum(log_f[j + 1: i + 1])
        path = endpoint_independent_row(log_f, i).b(j)
        worst = max(worst, abs(fox_bias(gates, i, j) - direct), abs(path - direct))
    beta = 0.3
    const = ForgetGates(np.full(L, math.exp(-beta)))
    worst = max(worst, max(abs(fox_bias(const, i, 0) + beta * i) for i in range(0, L, 17)))
    return worst, ""


@prop("rodrigues-oracle", 1e-9)
def _rodrigues(rng, cases):
    worst = 0.0
    for c in range(cases):
        d = int(rng.choice([2, 4, 8, 64]))
        mode = c % 4
        if mode == 0:
            # exactly collinear (power-of-two multiple), so s = 0 in floating point too
            a = rng.normal(size=d) / np.sqrt(d)
            g = PlaneGenerator(a, float(rng.choice([2.0, -0.5, 1.0])) * a, 1.0)
        else:
            g = _random_plane(rng, d, omega=rng.uniform(0.01, 0.5))
        # mode 1 keeps |z| = |n omega s| inside the series branch
        n = rng.uniform(-0.99, 0.99) * rank2.SERIES_THRESHOLD / g.omega if mode == 1 else rng.uniform(-4096, 4096)
        x = rng.normal(size=d)
        dense = dense_exp_oracle(g.omega * g.matrix(), n) @ x
        worst = max(worst, np.max(np.abs(apply_exp(g, n, x) - dense)))
    return worst, ""


@prop("series-continuity", 1e-12)
def _continuity(rng, cases):
    eps = rank2.SERIES_THRESHOLD
    lo = np.nextafter(eps, 0.0)
    f_lo, f_hi = np.array(exp_coefficients(lo)), np.array(exp_coefficients(eps))
    z = np.array([eps])
    closed = np.array([np.sin(z[0]) / z[0], 0.5 * (np.sin(z[0] / 2) / (z[0] / 2)) ** 2])
    return max(np.max(np.abs(f_lo - f_hi)), np.max(np.abs(f_hi - closed))), ""


@prop("gradient-check", 1e-5)
def _gradients(rng, cases):
    worst = 0.0
    h = 1e-6
    for _ in range(cases):
        d = int(rng.choice([2, 4, 8]))
        a, b = rng.normal(size=(2, d))
        omega = rng.uniform(0.2, 1.0)
        n = rng.uniform(-3, 3)
        x = rng.normal(size=d)
        for wrt in ("omega", ("a", int(rng.integers(d))), ("b", int(rng.integers(d)))):
            def f(eps):
                if wrt == "omega":
                    return apply_exp(PlaneGenerator(a, b, omega + eps), n, x)
                aa, bb = a.copy(), b.copy()
                (aa if wrt[0] == "a" else bb)[wrt[1]] += eps
                return apply_exp(PlaneGenerator(aa, bb, omega), n, x)
            fd = (f(h) - f(-h)) / (2 * h)
            an = exp_derivatives(PlaneGenerator(a, b, omega), n, x, wrt)
            worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-8))
    return worst, ""


@prop("isometry", 1e-10)
def _isometry(rng, cases):
    worst = 0.0
    for _ in range(cases):
        d = int(rng.choice([2, 8, 64]))
        x = rng.normal(size=d)
        n = rng.uniform(-4096, 4096)
        y1 = apply_exp(_random_plane(rng, d), n, x)
        y2 = apply_ms(MultiSubspaceMap.rope(d), n, x)
        nx = np.linalg.norm(x)
        worst = max(worst, abs(np.linalg.norm(y1) - nx) / nx, abs(np.linalg.norm(y2) - nx) / nx)
    return worst, ""


@prop("spectral-rank2", 1e-7)
def _spec_rank2(rng, cases):
    worst = 0.0
    for _ in range(max(1, cases // 4)):
        d = int(rng.choice([3, 8, 32]))
        rep = rank2_spectrum(_random_plane(rng, d, gauge=False), rng.uniform(-10, 10), dense_check=True)
        worst = max(worst, rep.notes["dense_generator_residual"], rep.notes["dense_eigenvalue_residual"],
                    rep.notes["dense_singular_value_residual"])
    return worst, ""


@prop("spectral-unipotent", 1e-7)
def _spec_unipotent(rng, cases):
    worst = 0.0
    for _ in range(max(1, cases // 4)):
        d = int(rng.choice([2, 8, 32]))
        rep = unipotent_report(_random_lift(rng, str(rng.choice(["alibi", "shift_vector"])), d),
                               rng.uniform(-5, 5), dense_check=True)
        worst = max(worst, rep.notes["dense_eigenvalue_residual"], rep.notes["dense_singular_value_residual"],
                    abs(rep.notes["sigma_product"] - 1.0), abs(rep.notes["dense_determinant"] - 1.0))
    return worst, ""


@prop("path-product-bounds", 1e-10)
def _spec_path(rng, cases):
    worst = 0.0
    for c in range(max(1, cases // 4)):
        d, T = int(rng.choice([4, 8, 16])), int(rng.integers(1, 24))
        w = rng.normal(size=(T, d))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        betas = rng.uniform(0, 2, size=T)
        if c % 3 == 0:
            betas[int(rng.integers(T))] = 1.0
        rep = path_product_report(PathFactorSeq(betas, w))
        worst = max(worst, rep.notes["det_residual"], max(0.0, rep.singular_values[0] - 1.0))
    return worst, ""


@prop("path-collapse", 0.0)
def _collapse(rng, cases):
    for _ in range(cases):
        path_product_check(rng.normal(size=int(rng.integers(0, 513))) * rng.uniform(0.01, 10),
                           d=int(rng.integers(1, 6)))
    return 0.0, ""


@prop("dictionary-closure", 0.0)
def _closure(rng, cases):
    D = 6
    e = np.eye(D)
    target = int(rng.integers(D))
    sources = [s for s in range(D) if s != target]
    gens = [np.outer(e[target], e[s]) for s in sources]
    ok = dictionary_closure_check(gens, rng.uniform(-2, 2, size=len(gens)))
    bad = dictionary_closure_check([np.outer(e[0], e[1]), np.outer(e[1], e[2])], [1.0, 1.0])
    if not ok or bad or bad.witness is None:
        raise ArithmeticError("closure check misclassified a dictionary")
    return ok.square_max, ""


def demo_encoders(rng, d: int, H: int) -> list[list[HeadEncoder]]:
    """One head config per encoder family, cycled over H heads."""
    ms = MultiSubspaceMap.rope(d)
    gated = UnipotentLift("gated", d, omega=0.5, v=rng.normal(size=d) / np.sqrt(d), u=rng.normal(size=d) / np.sqrt(d))
    families = [
        HeadEncoder("none"),
        HeadEncoder("multiplicative", ms=ms),
        HeadEncoder("additive", lift=UnipotentLift("alibi", d, beta=0.25)),
        HeadEncoder("additive", lift=gated),
        HeadEncoder("additive", lift=UnipotentLift("shift_vector", d, omega=0.5, u_shift=rng.normal(size=d) / np.sqrt(d))),
        HeadEncoder("fox"),
        HeadEncoder("path", alpha=1.0),
        HeadEncoder("joint", ms=ms, lift=gated),
    ]
    return [[enc] * H for enc in families]


def stream_batch_residual(cfg: AttentionConfig, rng, L: int) -> float:
    Q, K, V = rng.normal(size=(3, L, cfg.H, cfg.d))
    forget = rng.uniform(0.5, 1.0, size=(L, cfg.H))
    probes = rng.normal(size=(L, cfg.H, cfg.d))
    batch = logits_batch(cfg, Q, K, forget=forget, probes=probes)
    cache = StreamingCache(cfg)
    worst = 0.0
    snapshot = None
    for t in range(L):
        row, _ = step_streaming(cache, cfg, Q[t], K[t], V[t], t, forget[t], probes[t])
        worst = max(worst, float(np.max(np.abs(row - batch[t, : t + 1]))))
        if t == L // 2:
            snapshot = [cache.cached_keys(h).tobytes() for h in range(cfg.H)]
    for h in range(cfg.H):
        if cache.cached_keys(h)[: L // 2 + 1].tobytes() != snapshot[h]:
            raise ArithmeticError("cached keys changed after insertion")
    return worst


@prop("stream-batch", 1e-12)
def _stream(rng, cases):
    worst = 0.0
    for encoders in demo_encoders(rng, 16, 2):
        cfg = AttentionConfig(2, 16, L_max=32, encoders=encoders)
        worst = max(worst, stream_batch_residual(cfg, rng, 32))
    return worst, ""


@prop("origin-invariance", 1e-10)
def _origin(rng, cases):
    worst = 0.0
    L, H, d = 12, 2, 16
    for encoders in demo_encoders(rng, d, H):
        if not encoders[0].one_parameter:
            continue
        cfg = AttentionConfig(H, d, encoders=encoders)
        Q, K = rng.normal(size=(2, L, H, d))
        pos = np.arange(L, dtype=np.float64)
        base = logits_batch(cfg, Q, K, positions=pos)
        moved = logits_batch(cfg, Q, K, positions=pos + 1000.0)
        mask = np.isfinite(base)
        worst = max(worst, float(np.max(np.abs(base[mask] - moved[mask]))))
    return worst, ""


def summarize(results: Iterable[PropertyResult]) -> tuple[int, int]:
    results = list(results)
    return sum(r.passed for r in results), len(results)

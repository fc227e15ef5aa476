"""Spectral diagnostics for the encoding operators.

Closed forms are reported alongside a dense cross-check (numpy ``eigvals``
and ``svd``) whenever the dimension is small enough for the dense route to
be cheap. Eigenvalues use a canonical order: complex conjugate pairs
first, by decreasing ``|imag|``, positive imaginary part leading; real
eigenvalues follow in decreasing order.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .additive import UnipotentLift
from .rank2 import PlaneGenerator, dense_exp_oracle

SCHEMA_VERSION = 1
DENSE_CHECK_MAX_D = 64
UNIT_TOL = 1e-10
BOUND_TOL = 1e-10


def canonical_order(eigenvalues, tol: float = 1e-12) -> np.ndarray:
    ev = np.asarray(eigenvalues, dtype=np.complex128).reshape(-1)
    is_real = np.abs(ev.imag) <= tol
    key = np.lexsort((-ev.imag, -ev.real, -np.round(np.abs(ev.imag), 12), is_real))
    out = ev[key]
    out.imag[np.abs(out.imag) <= tol] = 0.0
    return out


def match_spectra(expected, observed) -> float:
    """Largest distance under the optimal one-to-one pairing of two spectra."""
    x = np.asarray(expected, dtype=np.complex128).reshape(-1)
    y = np.asarray(observed, dtype=np.complex128).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("spectra have different sizes")
    if x.size == 0:
        return 0.0
    cost = np.abs(x[:, None] - y[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(np.max(cost[rows, cols]))


@dataclass(eq=False)
class SpectrumReport:
    operator_kind: str
    eigenvalues: np.ndarray
    singular_values: np.ndarray
    determinant: float
    condition_number: float = field(init=False)
    notes: dict = field(default_factory=dict)
    generator_eigenvalues: Optional[np.ndarray] = None

    def __post_init__(self):
        self.eigenvalues = canonical_order(self.eigenvalues)
        sv = np.sort(np.asarray(self.singular_values, dtype=np.float64).reshape(-1))[::-1]
        self.singular_values = sv
        if self.generator_eigenvalues is not None:
            self.generator_eigenvalues = canonical_order(self.generator_eigenvalues)
        self.determinant = float(self.determinant)
        smin = sv[-1] if sv.size else 1.0
        self.condition_number = float(sv[0] / smin) if smin > 0 else float("inf")
        prod = float(np.prod(sv))
        if abs(abs(self.determinant) - prod) > 1e-8 * max(1.0, prod):
            raise ArithmeticError(f"|det|={abs(self.determinant):.3e} differs from prod(sigma)={prod:.3e}")

    def to_json(self) -> dict:
        def pairs(ev):
            return None if ev is None else [[float(z.real), float(z.imag)] for z in ev]

        return {
            "schema": SCHEMA_VERSION,
            "operator_kind": self.operator_kind,
            "eigenvalues": pairs(self.eigenvalues),
            "singular_values": [float(v) for v in self.singular_values],
            "determinant": self.determinant,
            "condition_number": self.condition_number,
            "generator_eigenvalues": pairs(self.generator_eigenvalues),
            "notes": self.notes,
        }

    def csv_rows(self) -> list[list]:
        rows = [[self.operator_kind, "eigenvalue", i, float(z.real), float(z.imag)]
                for i, z in enumerate(self.eigenvalues)]
        rows += [[self.operator_kind, "singular_value", i, float(v), 0.0]
                 for i, v in enumerate(self.singular_values)]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["operator_kind", "quantity", "index", "real", "imag"])
        writer.writerows(self.csv_rows())
        return buf.getvalue()


def _dense_residuals(M: np.ndarray, eigenvalues, singular_values) -> dict:
    ev = np.linalg.eigvals(M)
    sv = np.linalg.svd(M, compute_uv=False)
    return {
        "dense_eigenvalue_residual": match_spectra(eigenvalues, ev),
        "dense_singular_value_residual": float(np.max(np.abs(np.sort(sv)[::-1] - np.sort(singular_values)[::-1]),
                                                     initial=0.0)),
    }


def rank2_spectrum(g: PlaneGenerator, n: float, dense_check: Optional[bool] = None) -> SpectrumReport:
    """Spectrum of ``exp(n omega L)``: ``e^{+-i n omega s}`` and ``d - 2`` ones.

    The generator ``omega L`` itself has ``+-i omega s`` and ``d - 2`` zeros.
    """
    d = g.d
    w = g.omega * g.s
    gen = np.concatenate([[1j * w, -1j * w], np.zeros(d - 2)])
    phase = float(n) * w
    ev = np.concatenate([[np.exp(1j * phase), np.exp(-1j * phase)], np.ones(d - 2)])
    notes = {"s": g.s, "omega": g.omega, "n": float(n)}
    if dense_check if dense_check is not None else d <= DENSE_CHECK_MAX_D:
        Lw = g.omega * g.matrix()
        notes["dense_generator_residual"] = match_spectra(gen, np.linalg.eigvals(Lw))
        notes.update(_dense_residuals(dense_exp_oracle(Lw, float(n)), ev, np.ones(d)))
    return SpectrumReport("rank2_exp", ev, np.ones(d), 1.0, notes, generator_eigenvalues=gen)


def unipotent_singular_pair(c: float) -> tuple[float, float]:
    """``sigma_+-`` of ``I + c x y^T`` with unit orthogonal ``x, y``."""
    c = abs(float(c))
    root = c * np.sqrt(1.0 + 0.25 * c * c)
    base = 1.0 + 0.5 * c * c
    hi = np.sqrt(base + root)
    # sigma_- = 1 / sigma_+ avoids the cancellation in base - root
    return float(hi), float(1.0 / hi)


def unipotent_report(lift, s: float, Lambda: Optional[float] = None,
                     dense_check: Optional[bool] = None) -> SpectrumReport:
    """Spectrum of ``H(s) = I + s A`` for a lift (or a raw rank-1 nilpotent ``A``).

    All eigenvalues are 1 and the determinant is 1. With ``c = s |A|_2`` the
    two non-trivial singular values are
    ``sqrt(1 + c^2/2 +- |c| sqrt(1 + c^2/4))`` and ``kappa_2 = sigma_+^2``.
    """
    A = lift.generator(Lambda) if isinstance(lift, UnipotentLift) else np.asarray(lift, dtype=np.float64)
    D = A.shape[0]
    if np.any(A @ A != 0.0):
        raise ValueError("generator is not index-2 nilpotent")
    norm = float(np.linalg.norm(A, 2)) if np.any(A) else 0.0
    if np.linalg.matrix_rank(A) > 1:
        raise ValueError("closed-form singular pair needs a rank-1 generator")
    c = float(s) * norm
    hi, lo = unipotent_singular_pair(c)
    sv = np.concatenate([[hi, lo], np.ones(D - 2)])
    ev = np.ones(D, dtype=np.complex128)
    notes = {"s": float(s), "generator_norm": norm, "c": c, "sigma_product": hi * lo,
             "kappa_closed_form": hi * hi}
    if dense_check if dense_check is not None else D <= DENSE_CHECK_MAX_D + 2:
        H = np.eye(D) + float(s) * A
        notes.update(_dense_residuals(H, ev, sv))
        notes["dense_determinant"] = float(np.linalg.det(H))
    return SpectrumReport("unipotent", ev, sv, 1.0, notes, generator_eigenvalues=np.zeros(D))


@dataclass(frozen=True, eq=False)
class PathFactorSeq:
    """Householder-like factors ``H_t = I - beta_t w_t w_t^T``."""

    betas: np.ndarray
    ws: np.ndarray

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        ws = np.array(self.ws, dtype=np.float64)
        if ws.ndim != 2 or ws.shape[0] != betas.shape[0]:
            raise ValueError("need one unit vector per beta")
        if np.any(betas < 0.0) or np.any(betas > 2.0) or not np.all(np.isfinite(betas)):
            raise ValueError("betas must lie in [0, 2]")
        if np.any(np.abs(np.linalg.norm(ws, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("each w_t must have unit norm within 1e-10")
        betas.setflags(write=False)
        ws.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "ws", ws)

    @property
    def d(self) -> int:
        return self.ws.shape[1]

    def __len__(self) -> int:
        return self.betas.shape[0]

    def product(self) -> np.ndarray:
        """``P = H_T ... H_1`` (later factors act last)."""
        P = np.eye(self.d)
        for beta, w in zip(self.betas, self.ws):
            P = P - beta * np.outer(w, w @ P)
        return P

    def determinant(self) -> float:
        return float(np.prod(1.0 - self.betas))


def path_factor_spectrum(beta: float, w) -> np.ndarray:
    """Eigenvalues of one factor: ``1 - beta`` (along ``w``) and ``d - 1`` ones."""
    w = np.asarray(w, dtype=np.float64)
    return canonical_order(np.concatenate([[1.0 - float(beta)], np.ones(w.shape[0] - 1)]))


def path_product_report(seq: PathFactorSeq) -> SpectrumReport:
    """Dense report for ``P = prod H_t``; raises if the contraction bounds fail.

    Checked: ``sigma_max <= 1``, ``sigma_min >= prod |1 - beta|`` and
    ``det = prod (1 - beta)``, each to ``1e-10``.
    """
    P = seq.product()
    sv = np.linalg.svd(P, compute_uv=False)
    ev = np.linalg.eigvals(P)
    det_closed = seq.determinant()
    det_dense = float(np.linalg.det(P))
    lower = float(np.prod(np.abs(1.0 - seq.betas)))
    notes = {
        "factors": len(seq),
        "det_closed_form": det_closed,
        "det_dense": det_dense,
        "det_residual": abs(det_dense - det_closed),
        "sigma_min_lower_bound": lower,
    }
    failures = []
    if sv[0] > 1.0 + BOUND_TOL:
        failures.append(f"sigma_max={sv[0]:.17g} exceeds 1")
    if sv[-1] < lower - BOUND_TOL:
        failures.append(f"sigma_min={sv[-1]:.17g} below prod|1-beta|={lower:.17g}")
    if notes["det_residual"] > BOUND_TOL:
        failures.append(f"det residual {notes['det_residual']:.3e}")
    if failures:
        raise ArithmeticError("; ".join(failures))
    return SpectrumReport("path_product", ev, sv, det_closed, notes)


@dataclass(frozen=True)
class ClosureResult:
    ok: bool
    square_max: float
    witness: Optional[tuple[int, int]] = None
    witness_norm: float = 0.0

    def __bool__(self) -> bool:
        return self.ok


def dictionary_closure_check(generators: Sequence, thetas: Sequence[float]) -> ClosureResult:
    """Is ``(sum theta_r A_r)^2`` exactly zero?

    On failure the witness is the first ordered pair ``(r, s)`` with
    ``theta_r theta_s A_r A_s != 0``.
    """
    gens = [np.asarray(A, dtype=np.float64) for A in generators]
    thetas = [float(t) for t in thetas]
    if len(gens) != len(thetas) or not gens:
        raise ValueError("need one theta per generator and at least one generator")
    shape = gens[0].shape
    if any(A.shape != shape or A.shape[0] != A.shape[1] for A in gens):
        raise ValueError("generators must be square and share a shape")
    total = sum(t * A for t, A in zip(thetas, gens))
    square = total @ total
    square_max = float(np.max(np.abs(square), initial=0.0))
    if square_max == 0.0:
        return ClosureResult(True, 0.0)
    for r, (tr, Ar) in enumerate(zip(thetas, gens)):
        for s, (ts, As) in enumerate(zip(thetas, gens)):
            prod = tr * ts * (Ar @ As)
            if np.any(prod != 0.0):
                return ClosureResult(False, square_max, (r, s), float(np.max(np.abs(prod))))
    return ClosureResult(False, square_max)

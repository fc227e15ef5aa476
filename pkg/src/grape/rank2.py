"""Rank-2 skew generators and their closed-form exponentials.

A plane generator is ``L = a b^T - b a^T``. Its minimal polynomial is
``lambda (lambda^2 + s^2)`` with ``s^2 = |a|^2 |b|^2 - (a.b)^2``, so

    exp(eta L) = I + eta f1(eta s) L + eta^2 f2(eta s) L^2,
    f1(z) = sin(z) / z,   f2(z) = (1 - cos z) / z^2,

which is applied to a vector with two inner products and never forms a
``d x d`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import _backend

SERIES_THRESHOLD = 1e-4
# f1'/z and f2'/z cancel badly well above 1e-4, so they switch to a longer
# series (through z^6) earlier.
_DERIV_SERIES_THRESHOLD = 5e-2
GAUGE_MIN_NORM = 1e-8

# Test hook: multiplies f2 so that ``grape check --inject-fault f2`` can prove
# the property suite notices a broken coefficient.
_f2_fault_scale = 1.0

Wrt = Union[str, tuple]


def _require_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def plane_scalars(a, b) -> tuple[float, float, float, float, float]:
    """Return ``(alpha, beta, gamma, delta, s)`` for the plane spanned by a, b.

    >>> plane_scalars([1.0, 0.0], [0.0, 1.0])
    (1.0, 1.0, 0.0, 1.0, 1.0)
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError("a and b must be 1-D vectors of equal length")
    if a.shape[0] < 2:
        raise ValueError("plane generators need d >= 2")
    _require_finite("a", a)
    _require_finite("b", b)
    alpha = float(a @ a)
    beta = float(b @ b)
    gamma = float(a @ b)
    delta = alpha * beta - gamma * gamma
    if delta < 0.0:
        # rounding only; a genuinely negative Gram determinant is impossible
        delta = 0.0
    return alpha, beta, gamma, delta, float(np.sqrt(delta))


def exp_coefficients(z):
    """``(f1(z), f2(z))`` with Taylor guards below ``SERIES_THRESHOLD``.

    Accepts scalars or arrays. ``f2`` uses the half-angle form
    ``(sin(z/2)/(z/2))^2 / 2`` so no ``1 - cos z`` cancellation occurs.
    """
    z = np.asarray(z, dtype=np.float64)
    z2 = z * z
    small = np.abs(z) < SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    half = 0.5 * zs
    f1 = np.where(small, 1.0 - z2 / 6.0 + z2 * z2 / 120.0, np.sin(zs) / zs)
    sinc_half = np.sin(half) / half
    f2 = np.where(small, 0.5 - z2 / 24.0 + z2 * z2 / 720.0, 0.5 * sinc_half * sinc_half)
    if _f2_fault_scale != 1.0:
        f2 = f2 * _f2_fault_scale
    if f1.ndim == 0:
        return float(f1), float(f2)
    return f1, f2


def _scaled_coefficient_derivatives(z):
    """``(f1'(z)/z, f2'(z)/z)``; both are smooth even functions of z."""
    z = float(z)
    z2 = z * z
    if abs(z) < _DERIV_SERIES_THRESHOLD:
        g1 = -1.0 / 3.0 + z2 * (1.0 / 30.0 + z2 * (-1.0 / 840.0 + z2 / 45360.0))
        g2 = -1.0 / 12.0 + z2 * (1.0 / 180.0 + z2 * (-1.0 / 6720.0 + z2 / 453600.0))
        return g1, g2
    s, c = np.sin(z), np.cos(z)
    g1 = (z * c - s) / (z2 * z)
    g2 = (z * s - 4.0 * np.sin(0.5 * z) ** 2) / (z2 * z2)
    return float(g1), float(g2)


def exp_coefficient_derivatives(z) -> tuple[float, float]:
    """``(f1'(z), f2'(z))``."""
    g1, g2 = _scaled_coefficient_derivatives(z)
    return g1 * float(z), g2 * float(z)


@dataclass(frozen=True)
class ExpCoefficients:
    f1: float
    f2: float
    z: float

    @classmethod
    def at(cls, z: float) -> "ExpCoefficients":
        f1, f2 = exp_coefficients(float(z))
        return cls(f1=f1, f2=f2, z=float(z))


@dataclass(frozen=True, eq=False)
class PlaneGenerator:
    """One rank-2 skew generator ``omega * (a b^T - b a^T)``.

    The vectors are stored read-only, and the plane scalars are computed once
    at construction.
    """

    a: np.ndarray
    b: np.ndarray
    omega: float = 1.0
    alpha: float = field(init=False)
    beta: float = field(init=False)
    gamma: float = field(init=False)
    delta: float = field(init=False)
    s: float = field(init=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        alpha, beta, gamma, delta, s = plane_scalars(a, b)
        if not np.isfinite(self.omega):
            raise ValueError("omega must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        for key, val in dict(a=a, b=b, omega=float(self.omega), alpha=alpha,
                             beta=beta, gamma=gamma, delta=delta, s=s).items():
            object.__setattr__(self, key, val)

    @classmethod
    def gauge_fixed(cls, a, b, omega: float = 1.0) -> "PlaneGenerator":
        """Build an orthonormal ``(a, b)`` spanning the same oriented plane.

        One Gram-Schmidt projection makes ``b`` orthogonal to ``a``; the
        area ``|a| |b_perp| = s`` moves into ``omega`` so the generator
        ``omega L`` is unchanged.
        """
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _require_finite("a", a)
        _require_finite("b", b)
        na = np.linalg.norm(a)
        if na < GAUGE_MIN_NORM or np.linalg.norm(b) < GAUGE_MIN_NORM:
            raise ValueError("gauge fixing needs |a|, |b| >= 1e-8")
        a_hat = a / na
        b_perp = b - (a_hat @ b) * a_hat
        nb = np.linalg.norm(b_perp)
        if nb < GAUGE_MIN_NORM:
            raise ValueError("a and b are (numerically) collinear")
        return cls(a_hat, b_perp / nb, float(omega) * na * nb)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    def matrix(self) -> np.ndarray:
        """Dense ``L = a b^T - b a^T`` (without omega). Oracle use only."""
        return np.outer(self.a, self.b) - np.outer(self.b, self.a)

    def coefficients(self, n):
        """Rodrigues coefficients ``(c1, c2)`` of ``exp(n omega L)``."""
        eta = np.asarray(n, dtype=np.float64) * self.omega
        f1, f2 = exp_coefficients(eta * self.s)
        return eta * f1, eta * eta * f2

    def apply_L(self, x: np.ndarray) -> np.ndarray:
        return self.a * (self.b @ x) - self.b * (self.a @ x)


def _rows(x) -> tuple[np.ndarray, bool]:
    x = _backend.as_f64(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError("x must be a vector or a (N, d) batch of vectors")
    return x, False


def apply_exp(g: PlaneGenerator, n, x) -> np.ndarray:
    """Apply ``exp(n omega L) x`` in O(d).

    ``x`` may be one vector or an ``(N, d)`` batch; ``n`` a scalar or one
    position per row.
    """
    X, single = _rows(x)
    if X.shape[1] != g.d:
        raise ValueError(f"x has dimension {X.shape[1]}, generator has {g.d}")
    _require_finite("x", X)
    pos = np.broadcast_to(np.asarray(n, dtype=np.float64), (X.shape[0],))
    _require_finite("n", pos)
    c1, c2 = g.coefficients(pos)
    Y = _backend.kernels.rank2_apply(g.a, g.b, g.alpha, g.beta, g.gamma,
                                     _backend.as_f64(c1), _backend.as_f64(c2), X)
    return Y[0] if single else Y


def canonical_J(x) -> np.ndarray:
    """Apply the block-diagonal 90 degree operator to x.

    Pairs ``(0, 1), (2, 3), ...`` map ``(x0, x1) -> (-x1, x0)``; for odd d
    the last coordinate maps to 0 (J acts only on the even block).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    m = 2 * (x.shape[-1] // 2)
    out[..., 0:m:2] = -x[..., 1:m:2]
    out[..., 1:m:2] = x[..., 0:m:2]
    return out


def canonical_J_matrix(d: int) -> np.ndarray:
    return canonical_J(np.eye(d)).T


def apply_exp_b_eq_Ja(a, omega: float, n, x) -> np.ndarray:
    """``apply_exp`` for the plane ``(a, J a)``.

    The plane is rotated by ``n * omega * |a|^2`` (clockwise in the
    ``(a, Ja)`` orientation, because ``L(a, Ja)`` restricted to the plane is
    ``-|a|^2 J``).
    """
    a = np.asarray(a, dtype=np.float64)
    return apply_exp(PlaneGenerator(a, canonical_J(a), omega), n, x)


def _dL_apply(g: PlaneGenerator, wrt, x: np.ndarray) -> np.ndarray:
    kind, k = wrt
    if kind == "a":
        # dL = e_k b^T - b e_k^T
        out = -g.b * x[k]
        out[k] += g.b @ x
        return out
    # dL = a e_k^T - e_k a^T
    out = g.a * x[k]
    out[k] -= g.a @ x
    return out


def _parse_wrt(wrt, d: int):
    if wrt == "omega":
        return "omega"
    if isinstance(wrt, str) and wrt[:1] in "ab" and wrt[1:].isdigit():
        wrt = (wrt[0], int(wrt[1:]))
    if isinstance(wrt, tuple) and len(wrt) == 2 and wrt[0] in ("a", "b"):
        k = int(wrt[1])
        if not 0 <= k < d:
            raise ValueError(f"parameter index {k} out of range for d={d}")
        return (wrt[0], k)
    raise ValueError(f"wrt must be 'omega', ('a', k) or ('b', k); got {wrt!r}")


def exp_derivatives(g: PlaneGenerator, n: float, x, wrt: Wrt) -> np.ndarray:
    """Derivative of ``exp(n omega L) x`` with respect to one parameter.

    ``wrt`` is ``"omega"``, ``("a", k)`` / ``"a3"`` or ``("b", k)`` / ``"b3"``.

    With ``eta = n omega`` the map is ``I + c1 L + c2 L^2`` where
    ``c1 = eta f1(eta s)``, ``c2 = eta^2 f2(eta s)``. Chain terms go through
    ``f1'(z)/z`` and ``f2'(z)/z`` so that ``ds = dDelta / 2s`` never appears
    and ``s = 0`` needs no special case.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.d,):
        raise ValueError("x must be a single d-vector")
    wrt = _parse_wrt(wrt, g.d)
    n = float(n)
    eta = n * g.omega
    z = eta * g.s
    f1, f2 = exp_coefficients(z)
    g1, g2 = _scaled_coefficient_derivatives(z)
    c1 = eta * f1
    c2 = eta * eta * f2

    Lx = g.apply_L(x)
    L2x = g.apply_L(Lx)
    if wrt == "omega":
        d_eta, d_delta = n, 0.0
        dLx = np.zeros_like(x)
        anti = np.zeros_like(x)
    else:
        kind, k = wrt
        d_eta = 0.0
        if kind == "a":
            d_delta = 2.0 * (g.a[k] * g.beta - g.gamma * g.b[k])
        else:
            d_delta = 2.0 * (g.b[k] * g.alpha - g.gamma * g.a[k])
        dLx = _dL_apply(g, wrt, x)
        anti = g.apply_L(dLx) + _dL_apply(g, wrt, Lx)

    # d(z^2)/2 = eta s^2 d_eta + eta^2 dDelta / 2, factored through eta
    chain = g.delta * d_eta + 0.5 * eta * d_delta
    dc1 = d_eta * f1 + eta * eta * g1 * chain
    dc2 = 2.0 * eta * d_eta * f2 + eta ** 3 * g2 * chain
    return c1 * dLx + c2 * anti + dc1 * Lx + dc2 * L2x


def dense_exp_oracle(L, t: float) -> np.ndarray:
    """``exp(t L)`` for a skew matrix by scaling and squaring.

    A degree-18 Taylor polynomial is evaluated on ``t L / 2^k`` with
    ``|t L / 2^k|_1 <= 1/2`` and squared back ``k`` times. Meant as a test
    oracle and as the dense cost baseline: quality is checked for d <= 256.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("L must be a square matrix")
    _require_finite("L", L)
    if np.max(np.abs(L + L.T), initial=0.0) > 1e-12:
        raise ValueError("L is not skew-symmetric within 1e-12")
    d = L.shape[0]
    A = float(t) * L
    norm = np.max(np.sum(np.abs(A), axis=0), initial=0.0)
    k = 0
    if norm > 0.5:
        k = int(np.ceil(np.log2(norm / 0.5)))
    A = A / (2.0 ** k)
    eye = np.eye(d)
    G = eye.copy()
    for j in range(18, 0, -1):
        G = eye + (A @ G) / j
    for _ in range(k):
        G = G @ G
    return G

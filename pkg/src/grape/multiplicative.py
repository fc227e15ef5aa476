"""Commuting multi-plane rotations (RoPE and its learned-basis form),
thin non-commuting compressions, and 2D/3D coordinate encodings.

Orientation: each plane ``(p, q)`` carries the generator
``e_q e_p^T - e_p e_q^T`` (J on that coordinate pair), so position ``n``
rotates ``(x_p, x_q)`` counter-clockwise by ``n * theta``. In the
``L(a, b) = a b^T - b a^T`` notation of :mod:`grape.rank2` this is
``L(e_q, e_p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import _backend
from .rank2 import dense_exp_oracle

DEFAULT_BASE = 10000.0
ORTHO_TOL = 1e-8
PLANE_TOL = 1e-10


def log_uniform_thetas(d: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """RoPE frequencies ``base ** (-2 i / d)`` for ``i = 0 .. d//2 - 1``."""
    if base <= 1.0:
        raise ValueError("base must be > 1")
    return base ** (-np.arange(0, 2 * (d // 2), 2, dtype=np.float64) / d)


def canonical_planes(d: int, count: Optional[int] = None) -> np.ndarray:
    count = d // 2 if count is None else count
    return np.stack([np.arange(0, 2 * count, 2), np.arange(1, 2 * count, 2)], axis=1)


@dataclass(frozen=True, eq=False)
class MultiSubspaceMap:
    """Commuting rotation ``G(n) = B blockrot(n) B^T`` on disjoint planes.

    ``planes`` is an ``(m, 2)`` array of coordinate pairs (in the basis
    ``B`` if one is given); ``thetas`` holds one positive angle per plane.
    Coordinates not covered by any plane are fixed.
    """

    d: int
    thetas: np.ndarray
    planes: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    head_id: int = 0
    base: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        d = int(self.d)
        if d < 2:
            raise ValueError("d must be >= 2")
        thetas = np.array(self.thetas, dtype=np.float64).reshape(-1)
        m = thetas.shape[0]
        if m > d // 2:
            raise ValueError(f"{m} planes cannot fit in d={d} (odd d leaves the last coordinate fixed)")
        if not np.all(np.isfinite(thetas)) or np.any(thetas <= 0.0):
            raise ValueError("thetas must be finite and positive")
        if self.planes is None:
            planes = canonical_planes(d, m)
        else:
            planes = np.array(self.planes, dtype=np.int64).reshape(-1, 2)
        if planes.shape[0] != m:
            raise ValueError("need exactly one theta per plane")
        flat = planes.reshape(-1)
        if np.any(flat < 0) or np.any(flat >= d):
            raise ValueError("plane index out of range")
        if len(set(flat.tolist())) != flat.size:
            raise ValueError("planes must use disjoint coordinates")
        basis = None
        if self.basis is not None:
            basis = np.array(self.basis, dtype=np.float64)
            if basis.shape != (d, d):
                raise ValueError("basis must be d x d")
            if np.max(np.abs(basis.T @ basis - np.eye(d))) > ORTHO_TOL:
                raise ValueError("basis is not orthogonal within 1e-8")
            basis.setflags(write=False)
        thetas.setflags(write=False)
        planes.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "basis", basis)

    @classmethod
    def rope(cls, d: int, base: float = DEFAULT_BASE, **kw) -> "MultiSubspaceMap":
        return cls(d, log_uniform_thetas(d, base), base=base, **kw)

    def plane_vectors(self) -> list[tuple[np.ndarray, np.ndarray]]:
        B = np.eye(self.d) if self.basis is None else self.basis
        return [(B[:, p], B[:, q]) for p, q in self.planes]

    def generator(self) -> np.ndarray:
        """Dense total generator ``sum_i theta_i B U_i J U_i^T B^T``."""
        L = np.zeros((self.d, self.d))
        for theta, (u, w) in zip(self.thetas, self.plane_vectors()):
            L += theta * (np.outer(w, u) - np.outer(u, w))
        return L

    def to_json(self) -> dict:
        doc = {"d": self.d, "thetas": self.thetas.tolist(), "head_id": self.head_id}
        if self.base is not None:
            doc["base"] = self.base
        if self.basis is not None:
            doc["basis"] = self.basis.tolist()
        if not np.array_equal(self.planes, canonical_planes(self.d, len(self.thetas))):
            doc["planes"] = self.planes.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MultiSubspaceMap":
        d = int(doc["d"])
        base = doc.get("base")
        thetas = doc.get("thetas")
        if thetas is None:
            thetas = log_uniform_thetas(d, DEFAULT_BASE if base is None else float(base))
        return cls(d, thetas, planes=doc.get("planes"), basis=doc.get("basis"),
                   head_id=int(doc.get("head_id", 0)), base=base)


def apply_ms(gmap: MultiSubspaceMap, n, x) -> np.ndarray:
    """Apply ``G(n) x``; ``x`` is a vector or ``(N, d)`` batch, ``n`` a
    scalar or per-row positions."""
    X = _backend.as_f64(x)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != gmap.d:
        raise ValueError(f"x must have trailing dimension {gmap.d}")
    if not np.all(np.isfinite(X)):
        raise ValueError("x must be finite")
    pos = _backend.as_f64(np.broadcast_to(np.asarray(n, dtype=np.float64), (X.shape[0],)))
    if gmap.basis is not None:
        X = _backend.as_f64(X @ gmap.basis)
    Y = _backend.kernels.plane_rotate(_backend.as_index(gmap.planes[:, 0]),
                                      _backend.as_index(gmap.planes[:, 1]),
                                      gmap.thetas, pos, X)
    if gmap.basis is not None:
        Y = Y @ gmap.basis.T
    return Y[0] if single else Y


def rope_reference(d: int, base: float, n, x) -> np.ndarray:
    """Textbook RoPE on interleaved pairs, written independently of
    :func:`apply_ms` so it can serve as its oracle."""
    if base <= 1.0:
        raise ValueError("base must be > 1")
    x = np.asarray(x, dtype=np.float64)
    freqs = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    if d % 2:
        freqs = freqs[:-1]
    ang = np.multiply.outer(np.asarray(n, dtype=np.float64), freqs)
    if x.ndim == 2 and ang.ndim == 1:
        ang = ang[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    m = 2 * (d // 2)
    even, odd = x[..., 0:m:2], x[..., 1:m:2]
    out = x.copy()
    out[..., 0:m:2] = even * cos - odd * sin
    out[..., 1:m:2] = even * sin + odd * cos
    return out


def _check_orthogonal_planes(*maps: MultiSubspaceMap) -> None:
    if len({m.d for m in maps}) != 1:
        raise ValueError("maps must share the dimension d")
    for i, gi in enumerate(maps):
        Vi = np.stack([v for pair in gi.plane_vectors() for v in pair], axis=1)
        for gj in maps[i + 1:]:
            Vj = np.stack([v for pair in gj.plane_vectors() for v in pair], axis=1)
            if np.max(np.abs(Vi.T @ Vj), initial=0.0) > PLANE_TOL:
                raise ValueError("plane sets overlap; only commuting (disjoint) axes are supported")


def apply_2d(gx: MultiSubspaceMap, gy: MultiSubspaceMap, u, v, x) -> np.ndarray:
    """``exp(u L_x) exp(v L_y) x`` for axes on mutually orthogonal planes."""
    _check_orthogonal_planes(gx, gy)
    return apply_ms(gx, u, apply_ms(gy, v, x))


def apply_3d(gx, gy, gz, u, v, w, x) -> np.ndarray:
    _check_orthogonal_planes(gx, gy, gz)
    return apply_ms(gx, u, apply_ms(gy, v, apply_ms(gz, w, x)))


@dataclass(frozen=True, eq=False)
class ThinCompression:
    """Generator ``E L_r E^T`` with ``E`` (d x r) orthonormal and ``L_r`` skew."""

    E: np.ndarray
    L_r: np.ndarray
    mode_angles: np.ndarray = field(init=False)
    zero_modes: int = field(init=False)

    def __post_init__(self):
        E = np.array(self.E, dtype=np.float64)
        L_r = np.array(self.L_r, dtype=np.float64)
        if E.ndim != 2 or L_r.shape != (E.shape[1], E.shape[1]):
            raise ValueError("E must be d x r and L_r r x r")
        r = E.shape[1]
        if r > E.shape[0]:
            raise ValueError("r must not exceed d")
        if np.max(np.abs(E.T @ E - np.eye(r)), initial=0.0) > ORTHO_TOL:
            raise ValueError("E must have orthonormal columns within 1e-8")
        if np.max(np.abs(L_r + L_r.T), initial=0.0) > 1e-12:
            raise ValueError("L_r must be skew-symmetric within 1e-12")
        angles = schur_mode_angles(L_r)
        for key, val in dict(E=E, L_r=L_r, mode_angles=angles,
                             zero_modes=r - 2 * len(angles)).items():
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, key, val)

    @property
    def d(self) -> int:
        return self.E.shape[0]

    @property
    def r(self) -> int:
        return self.E.shape[1]

    def generator(self) -> np.ndarray:
        return self.E @ self.L_r @ self.E.T

    def apply(self, n: float, x) -> np.ndarray:
        """``exp(n E L_r E^T) x = x + E (exp(n L_r) - I) E^T x`` in O(r d + r^3)."""
        x = np.asarray(x, dtype=np.float64)
        c = x @ self.E
        G = dense_exp_oracle(self.L_r, n)
        return x + (c @ G.T - c) @ self.E.T


def schur_mode_angles(L_r, tol: float = 1e-10) -> np.ndarray:
    """Non-negative rotation angles ``theta_t`` of a skew matrix, read off
    the 2x2 blocks of its real Schur form (descending)."""
    L_r = np.asarray(L_r, dtype=np.float64)
    r = L_r.shape[0]
    if r == 0:
        return np.empty(0)
    T, _ = scipy.linalg.schur(L_r, output="real")
    angles = []
    k = 0
    while k < r:
        if k + 1 < r and abs(T[k + 1, k]) > tol:
            theta = np.sqrt(abs(T[k, k + 1] * T[k + 1, k]))
            if theta > tol:
                angles.append(theta)
            k += 2
        else:
            k += 1
    return np.sort(np.array(angles, dtype=np.float64))[::-1]


def noncommuting_spectrum(tc: ThinCompression, n: float) -> list[complex]:
    """Eigenvalues of ``exp(n E L_r E^T)``.

    Each Schur mode gives the pair ``e^{+i n theta}, e^{-i n theta}``; the
    zero modes of ``L_r`` (always at least one when r is odd) and the
    ``d - r`` complement directions contribute 1. Pairs come first,
    positive imaginary part leading.
    """
    out: list[complex] = []
    for theta in tc.mode_angles:
        z = complex(np.cos(n * theta), abs(np.sin(n * theta)))
        out.extend([z, z.conjugate()])
    out.extend([1.0 + 0.0j] * (tc.zero_modes + tc.d - tc.r))
    return out

"""Path-integral additive biases with endpoint-dependent edge potentials.

For a head with scale ``alpha > 0`` and probes ``p_u``, the edge potential
between endpoint ``t`` and link ``l`` is

    psi(t, l) = alpha * g(<p_t, R_l p_l> / d),   R_l = exp(l J),

with a negative, increasing, 1-Lipschitz link ``g`` (log-sigmoid by
default), and the bias from key ``j`` to query ``t`` is the causal sum
``b(t, j) = sum_{l=j+1}^{t} psi(t, l)``. Rotated probes are cached on
arrival, so one row costs a single O(t d) similarity sweep plus a suffix
sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend
from .multiplicative import canonical_planes

RMS_EPS = 1e-6


def log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z >= 0.0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(-np.abs(z))))
    return float(out) if out.ndim == 0 else out


def check_link(link: Callable, lo: float = -20.0, hi: float = 20.0, samples: int = 2001) -> None:
    """Reject links that are not strictly negative, increasing and 1-Lipschitz
    on a sample grid."""
    z = np.linspace(lo, hi, samples)
    vals = np.asarray([link(float(v)) for v in z], dtype=np.float64)
    if not np.all(np.isfinite(vals)) or np.any(vals >= 0.0):
        raise ValueError("link must be strictly negative")
    slopes = np.diff(vals) / np.diff(z)
    if np.any(slopes < 0.0):
        raise ValueError("link must be monotone increasing")
    if np.max(slopes) > 1.0 + 1e-6:
        raise ValueError(f"link is not 1-Lipschitz (sampled slope {np.max(slopes):.6g})")


def rms_normalize(x, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def make_probes(features, d: int, weights=None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """RMS-normalised linear projections of token features, shape ``(L, d)``.

    Without ``weights`` a random ``(d, f)`` projection with unit row norms is
    drawn from ``rng``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if weights is None:
        rng = np.random.default_rng() if rng is None else rng
        weights = rng.normal(size=(d, features.shape[1]))
        weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (d, features.shape[1]):
        raise ValueError("weights must have shape (d, feature_dim)")
    return rms_normalize(features @ weights.T)


def rotate_probe(p, l: float) -> np.ndarray:
    """``R_l p``: every canonical pair rotated by angle ``l``."""
    p = _backend.as_f64(p)
    d = p.shape[-1]
    planes = canonical_planes(d)
    out = _backend.kernels.plane_rotate(_backend.as_index(planes[:, 0]), _backend.as_index(planes[:, 1]),
                                        np.ones(len(planes)), _backend.as_f64([float(l)]),
                                        p.reshape(1, d))
    return out[0]


class ProbeStore:
    """Append-only per-head store of probes and their cached rotations.

    Single writer; readers may use any completed prefix.
    """

    def __init__(self, d: int, alpha: float = 1.0, link: Optional[Callable] = None,
                 capacity: int = 64):
        if not (np.isfinite(alpha) and alpha > 0.0):
            raise ValueError("alpha must be > 0")
        if link is not None:
            check_link(link)
        self.d = int(d)
        self.alpha = float(alpha)
        self.link = link
        self._probes = np.empty((max(capacity, 1), self.d))
        self._rotated = np.empty_like(self._probes)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, p) -> int:
        """Store probe ``p`` at the next index ``l`` and cache ``R_l p``."""
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.d,) or not np.all(np.isfinite(p)):
            raise ValueError(f"probe must be a finite {self.d}-vector")
        if self._n == self._probes.shape[0]:
            grow = 2 * self._probes.shape[0]
            self._probes = np.concatenate([self._probes, np.empty((grow - self._n, self.d))])
            self._rotated = np.concatenate([self._rotated, np.empty((grow - self._n, self.d))])
        l = self._n
        self._probes[l] = p
        self._rotated[l] = rotate_probe(p, l)
        self._n += 1
        return l

    def extend(self, probes) -> None:
        for p in np.asarray(probes, dtype=np.float64):
            self.append(p)

    @property
    def probes(self) -> np.ndarray:
        view = self._probes[: self._n]
        view.flags.writeable = False
        return view

    @property
    def rotated(self) -> np.ndarray:
        view = self._rotated[: self._n]
        view.flags.writeable = False
        return view

    def _g(self, z):
        return log_sigmoid(z) if self.link is None else np.asarray([self.link(float(v)) for v in np.atleast_1d(z)])


def edge_potential(store: ProbeStore, t: int, l: int) -> float:
    """``psi(t, l)`` for ``1 <= l <= t < len(store)``.

    The self link ``l = t`` is the last term of every causal sum ending at
    ``t``; links past the endpoint are rejected.
    """
    if not 0 <= t < len(store):
        raise IndexError(f"no probe stored for endpoint {t}")
    if l > t:
        raise ValueError(f"causality: link {l} lies after endpoint {t}")
    if l < 0:
        raise IndexError("link index must be non-negative")
    z = float(store.probes[t] @ store.rotated[l]) / store.d
    return store.alpha * float(np.asarray(store._g(z)).reshape(-1)[0])


@dataclass(frozen=True, eq=False)
class PathBiasRow:
    """One query row: ``psi[l-1] = psi(t, l)`` for ``l = 1..t`` and
    ``bias[j] = b(t, j)`` for ``j = 0..t``."""

    t: int
    psi: np.ndarray
    bias: np.ndarray

    @classmethod
    def from_potentials(cls, psi: Sequence[float]) -> "PathBiasRow":
        psi = _backend.as_f64(np.asarray(psi, dtype=np.float64).reshape(-1))
        bias = _backend.kernels.suffix_bias(psi)
        psi.setflags(write=False)
        bias.setflags(write=False)
        return cls(len(psi), psi, bias)

    def b(self, j: int) -> float:
        if not 0 <= j <= self.t:
            raise IndexError(f"key index {j} outside 0..{self.t}")
        return float(self.bias[j])


def bias_row(store: ProbeStore, t: int) -> PathBiasRow:
    """All of ``b(t, .)`` from one sweep over the cached rotated probes."""
    if not 0 <= t < len(store):
        raise IndexError(f"no probe stored for endpoint {t}")
    if store.link is None:
        psi, bias = _backend.kernels.logsigmoid_path_row(
            _backend.as_f64(store.probes[t]), _backend.as_f64(store.rotated[: t + 1]),
            store.alpha, 1.0 / store.d)
        psi.setflags(write=False)
        bias.setflags(write=False)
        return PathBiasRow(t, psi, bias)
    sims = store.rotated[1: t + 1] @ store.probes[t] / store.d
    return PathBiasRow.from_potentials(store.alpha * store._g(sims) if t else [])


def bias_triangle(store: ProbeStore) -> list[tuple[int, int, float]]:
    """``(t, j, b(t, j))`` for every stored endpoint, for CSV dumps."""
    rows = []
    for t in range(len(store)):
        row = bias_row(store, t)
        rows.extend((t, j, float(row.bias[j])) for j in range(t + 1))
    return rows


def endpoint_independent_row(a: Sequence[float], t: int) -> PathBiasRow:
    """Row built from per-link potentials ``psi(t, l) = a[l]`` that ignore the
    endpoint (FoX uses ``a[l] = log f_l``; ALiBi uses a constant)."""
    a = np.asarray(a, dtype=np.float64)
    if not 0 <= t < len(a):
        raise IndexError("endpoint outside the potential sequence")
    return PathBiasRow.from_potentials(a[1: t + 1])


def path_product_check(psi: Sequence[float], d: int = 2) -> np.ndarray:
    """Multiply ``I - psi_l E`` (``E = e_{d+2} e_{d+1}^T``) densely, left to
    right, and confirm the product is exactly ``I - (sum psi) E``.

    The reference sum accumulates in the same order as the product; the
    comparison is bitwise. Raises ``ArithmeticError`` on mismatch.
    """
    D = d + 2
    E = np.zeros((D, D))
    E[d + 1, d] = 1.0
    P = np.eye(D)
    total = 0.0
    for value in psi:
        P = P @ (np.eye(D) - float(value) * E)
        total = total - float(value)
    expected = np.eye(D)
    expected[d + 1, d] = total
    if not np.array_equal(P, expected):
        raise ArithmeticError("unipotent path product did not collapse to I - (sum psi) E")
    return P


def phase_modulated_bias(omega_seq: Sequence[float], theta_h: float, t: int, j: int) -> float:
    """``-theta_h (Phi_t - Phi_j)`` with ``Phi_u = sum_{l<u} omega_l``."""
    omega = np.asarray(omega_seq, dtype=np.float64).reshape(-1)
    if np.any(omega < 0.0) or not np.all(np.isfinite(omega)):
        raise ValueError("phase increments must be finite and non-negative")
    if theta_h < 0.0:
        raise ValueError("theta_h must be non-negative")
    if not 0 <= j <= t <= len(omega):
        raise IndexError(f"need 0 <= j <= t <= {len(omega)}")
    phi = _backend.kernels.exclusive_cumsum(_backend.as_f64(omega))
    return -float(theta_h) * float(phi[t] - phi[j])

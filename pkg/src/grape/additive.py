"""Unipotent additive encodings in a homogeneous lift.

Three generator kinds are supported:

``shift_vector``
    ``(d+1)``-lift ``[x; 1]`` with ``A = [[0, u_shift], [0, 0]]``: a feature
    translation by ``n * omega * u_shift``.
``alibi``
    ``(d+2)``-lift ``q -> [q; 1; 0]``, ``k -> [k; 0; 1]`` with
    ``A = -beta E``, ``E = e_{d+2} e_{d+1}^T``.
``gated``
    same lift with ``A = -(lambda_q + lambda_k) E`` where the gates are
    softplus projections of the query and key.

Queries move with ``G(i)``, keys with ``G(j)^{-T}``, so every score is a
function of ``j - i`` only. Scores are computed from closed forms; lifted
matrices are only built by :func:`unipotent_matrix`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _backend
from .multiplicative import MultiSubspaceMap, apply_ms

KINDS = ("shift_vector", "alibi", "gated")


def softplus(x):
    """``log(1 + e^x)``, returning ``x`` itself above 30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return float(out) if out.ndim == 0 else out


def default_alibi_slopes(num_heads: int) -> np.ndarray:
    """Geometric ALiBi slopes ``2^(-8 h / H)`` for ``h = 1..H``."""
    h = np.arange(1, num_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / num_heads)


def _vec(name, x, d):
    if x is None:
        raise ValueError(f"{name} is required for this lift kind")
    x = np.array(x, dtype=np.float64).reshape(-1)
    if x.shape != (d,) or not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be a finite {d}-vector")
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class UnipotentLift:
    kind: str
    d: int
    omega: float = 1.0
    beta: Optional[float] = None
    v: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    u_shift: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        d = int(self.d)
        if d < 1:
            raise ValueError("d must be positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "omega", float(self.omega))
        if self.kind == "alibi":
            if self.beta is None or not np.isfinite(self.beta) or self.beta < 0:
                raise ValueError("alibi needs a finite slope beta >= 0")
            object.__setattr__(self, "beta", float(self.beta))
        elif self.kind == "gated":
            object.__setattr__(self, "v", _vec("v", self.v, d))
            object.__setattr__(self, "u", _vec("u", self.u, d))
        else:
            object.__setattr__(self, "u_shift", _vec("u_shift", self.u_shift, d))

    @property
    def lift_dim(self) -> int:
        return self.d + 1 if self.kind == "shift_vector" else self.d + 2

    def generator(self, Lambda: Optional[float] = None) -> np.ndarray:
        """Dense nilpotent ``A`` (``A @ A == 0``). Gated lifts need ``Lambda``."""
        D = self.lift_dim
        A = np.zeros((D, D))
        if self.kind == "shift_vector":
            A[: self.d, self.d] = self.u_shift
        elif self.kind == "alibi":
            A[self.d + 1, self.d] = -self.beta
        else:
            if Lambda is None:
                raise ValueError("gated generator needs the pair gate Lambda")
            A[self.d + 1, self.d] = -float(Lambda)
        return A

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "d": self.d, "omega": self.omega}
        if self.kind == "alibi":
            doc["beta"] = self.beta
        elif self.kind == "gated":
            doc["v"] = self.v.tolist()
            doc["u"] = self.u.tolist()
        else:
            doc["u_shift"] = self.u_shift.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "UnipotentLift":
        return cls(doc["kind"], int(doc["d"]), float(doc.get("omega", 1.0)), beta=doc.get("beta"),
                   v=doc.get("v"), u=doc.get("u"), u_shift=doc.get("u_shift"))


def lift_q(q, kind) -> np.ndarray:
    """``[q; 1]`` for the (d+1)-lift, ``[q; 1; 0]`` for the (d+2)-lift."""
    q = np.asarray(q, dtype=np.float64)
    kind = kind.kind if isinstance(kind, UnipotentLift) else kind
    tail = [1.0] if kind == "shift_vector" else [1.0, 0.0]
    return np.concatenate([q, np.full(q.shape[:-1] + (len(tail),), tail)], axis=-1)


def lift_k(k, kind) -> np.ndarray:
    """``[k; 1]`` for the (d+1)-lift, ``[k; 0; 1]`` for the (d+2)-lift."""
    k = np.asarray(k, dtype=np.float64)
    kind = kind.kind if isinstance(kind, UnipotentLift) else kind
    tail = [1.0] if kind == "shift_vector" else [0.0, 1.0]
    return np.concatenate([k, np.full(k.shape[:-1] + (len(tail),), tail)], axis=-1)


@dataclass(frozen=True)
class GateValues:
    lambda_q: float
    lambda_k: float

    @property
    def Lambda(self) -> float:
        return self.lambda_q + self.lambda_k


def query_gate(lift: UnipotentLift, q):
    q = np.asarray(q, dtype=np.float64)
    return softplus(q @ lift.v / np.sqrt(lift.d))


def key_gate(lift: UnipotentLift, k):
    k = np.asarray(k, dtype=np.float64)
    return softplus(k @ lift.u / np.sqrt(lift.d))


def compute_gates(lift: UnipotentLift, q, k) -> GateValues:
    if lift.kind != "gated":
        raise ValueError("gates exist only for the gated lift")
    return GateValues(float(query_gate(lift, q)), float(key_gate(lift, k)))


def additive_score(lift: UnipotentLift, q, k, i, j) -> float:
    """``q_hat^T G(j - i)^{-T} k_hat`` in closed form.

    alibi: ``q.k + (j - i) omega beta``; gated: ``q.k + (j - i) omega
    (lambda_q + lambda_k)``; shift_vector: ``q.k + 1 - (j - i) omega
    u_shift.k`` (the ``+1`` is the product of the two homogeneous ones).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    m = float(j) - float(i)
    base = float(q @ k)
    if lift.kind == "alibi":
        return base + m * lift.omega * lift.beta
    if lift.kind == "gated":
        return base + m * lift.omega * compute_gates(lift, q, k).Lambda
    return base + 1.0 - m * lift.omega * float(lift.u_shift @ k)


def encode_query(lift: UnipotentLift, q, i) -> np.ndarray:
    """``G(i) q_hat`` for the shift-vector lift (translation of q)."""
    if lift.kind != "shift_vector":
        raise ValueError("per-vector lifted encoding is defined for shift_vector lifts")
    q = np.asarray(q, dtype=np.float64)
    out = lift_q(q, lift)
    out[..., : lift.d] += np.multiply.outer(np.asarray(i, dtype=np.float64) * lift.omega, lift.u_shift)
    return out


def encode_key(lift: UnipotentLift, k, j) -> np.ndarray:
    """``G(j)^{-T} k_hat`` for the shift-vector lift."""
    if lift.kind != "shift_vector":
        raise ValueError("per-vector lifted encoding is defined for shift_vector lifts")
    k = np.asarray(k, dtype=np.float64)
    out = lift_k(k, lift)
    out[..., lift.d] -= np.asarray(j, dtype=np.float64) * lift.omega * (k @ lift.u_shift)
    return out


def unipotent_matrix(lift: UnipotentLift, s: float, Lambda: Optional[float] = None) -> np.ndarray:
    """``H(s) = exp(s A) = I + s A``; oracle path for small dimensions.

    ``G_add(n)`` of the encoding is ``unipotent_matrix(lift, n * omega)``.
    """
    A = lift.generator(Lambda)
    return np.eye(lift.lift_dim) + float(s) * A


@dataclass(frozen=True, eq=False)
class ForgetGates:
    """Per-token forget gates and their compensated prefix sums.

    ``U[t] = sum(log f[:t])`` (length ``len(f) + 1``); the bias between query
    ``i`` and key ``j`` is ``sum(log f[j+1 : i+1]) = U[i+1] - U[j+1]``.
    """

    f: np.ndarray
    U: np.ndarray = field(init=False)

    def __post_init__(self):
        f = np.array(self.f, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(f)) or np.any(f <= 0.0) or np.any(f > 1.0):
            raise ValueError("forget gates must lie in (0, 1]")
        U = _backend.kernels.exclusive_cumsum(_backend.as_f64(np.log(f)))
        f.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "U", U)

    def __len__(self) -> int:
        return self.f.shape[0]


def fox_bias(gates: ForgetGates, i: int, j: int) -> float:
    """FoX decay ``D_ij = sum_{l=j+1}^{i} log f_l`` (O(1) from prefix sums)."""
    n = len(gates)
    if not (0 <= j <= i < n):
        raise IndexError(f"need 0 <= j <= i < {n}; got i={i}, j={j}")
    return float(gates.U[i + 1] - gates.U[j + 1])


def fox_bias_matrix(gates: ForgetGates) -> np.ndarray:
    """Full lower-triangular ``D`` (upper triangle set to -inf)."""
    c = gates.U[1:]
    D = c[:, None] - c[None, :]
    D[np.triu_indices(len(gates), 1)] = -np.inf
    return D


class JointScore(NamedTuple):
    score: float
    offset: float


def joint_score(ms: MultiSubspaceMap, gates: GateValues, omega: float, q, k, i, j) -> JointScore:
    """Score of the block-diagonal GL(d+2) action ``exp(m L) (+) (I - m omega Lambda E)``
    with ``m = j - i``.

    Equals the rotary bilinear ``q^T G(j - i) k`` plus ``(j - i) omega
    Lambda``. The asymmetric lift contributes no constant, so ``offset`` is 0.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    rotary = float(apply_ms(ms, i, q) @ apply_ms(ms, j, k))
    offset = 0.0
    return JointScore(rotary + (float(j) - float(i)) * float(omega) * gates.Lambda + offset, offset)

"""Forward-only multi-head attention wired to every encoder family, plus the
append-only streaming cache used for incremental decoding.

Logits are ``<q~_t, k~_j> / sqrt(d) + bias(t, j)`` under the causal mask
``j <= t``; values are never position-transformed.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _backend
from .additive import ForgetGates, UnipotentLift, encode_key, encode_query, key_gate, query_gate
from .multiplicative import MultiSubspaceMap, apply_ms
from .path_integral import ProbeStore, bias_row, rms_normalize

ENCODER_KINDS = ("none", "multiplicative", "additive", "fox", "path", "joint")


@dataclass(frozen=True, eq=False)
class HeadEncoder:
    """Positional encoder for one head.

    ``multiplicative`` needs ``ms``; ``additive`` needs ``lift``; ``joint``
    needs both, with a gated lift; ``path`` uses ``alpha`` and ``link``;
    ``fox`` takes its gates from the token stream.
    """

    kind: str = "none"
    ms: Optional[MultiSubspaceMap] = None
    lift: Optional[UnipotentLift] = None
    alpha: float = 1.0
    link: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"encoder kind must be one of {ENCODER_KINDS}")
        if self.kind in ("multiplicative", "joint") and self.ms is None:
            raise ValueError(f"{self.kind} encoder needs a MultiSubspaceMap")
        if self.kind in ("additive", "joint") and self.lift is None:
            raise ValueError(f"{self.kind} encoder needs a UnipotentLift")
        if self.kind == "joint" and self.lift.kind != "gated":
            raise ValueError("joint encoder composes a rotation with a gated lift")
        if self.kind == "path" and not self.alpha > 0.0:
            raise ValueError("path encoder needs alpha > 0")

    @property
    def one_parameter(self) -> bool:
        """True when logits depend on positions only through ``j - t``."""
        return self.kind in ("none", "multiplicative", "additive", "joint")

    @property
    def gated(self) -> bool:
        return self.lift is not None and self.lift.kind in ("gated",)

    def encode_q(self, q, pos):
        if self.kind in ("multiplicative", "joint"):
            return apply_ms(self.ms, pos, q)
        if self.kind == "additive" and self.lift.kind == "shift_vector":
            return encode_query(self.lift, q, pos)
        return np.asarray(q, dtype=np.float64)

    def encode_k(self, k, pos):
        if self.kind in ("multiplicative", "joint"):
            return apply_ms(self.ms, pos, k)
        if self.kind == "additive" and self.lift.kind == "shift_vector":
            return encode_key(self.lift, k, pos)
        return np.asarray(k, dtype=np.float64)

    def slope_scale(self) -> float:
        if self.lift is None or self.lift.kind == "shift_vector":
            return 0.0
        return self.lift.omega


@dataclass(frozen=True, eq=False)
class AttentionConfig:
    H: int
    d: int
    L_max: int = 4096
    encoders: Sequence[HeadEncoder] = ()
    qk_norm: bool = False

    def __post_init__(self):
        if self.d < 2 or self.H < 1:
            raise ValueError("need d >= 2 and H >= 1")
        encoders = tuple(self.encoders) or tuple(HeadEncoder() for _ in range(self.H))
        if len(encoders) == 1 and self.H > 1:
            encoders = encoders * self.H
        if len(encoders) != self.H:
            raise ValueError("need one encoder per head")
        for enc in encoders:
            dims = [m.d for m in (enc.ms, enc.lift) if m is not None]
            if any(x != self.d for x in dims):
                raise ValueError("encoder dimension does not match d")
        object.__setattr__(self, "encoders", encoders)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d)

    @property
    def needs_forget(self) -> bool:
        return any(e.kind == "fox" for e in self.encoders)

    @property
    def needs_probes(self) -> bool:
        return any(e.kind == "path" for e in self.encoders)


def softmax_row(logits, mask=None) -> np.ndarray:
    """Max-subtracted softmax over the entries where ``mask`` is True.

    Masked entries get weight 0; a row without any unmasked entry raises.
    """
    logits = np.asarray(logits, dtype=np.float64)
    keep = np.isfinite(logits) if mask is None else (np.asarray(mask, dtype=bool) & ~np.isnan(logits))
    if not np.any(keep):
        raise ValueError("softmax row has no unmasked entry")
    m = np.max(logits[keep])
    w = np.zeros_like(logits)
    w[keep] = np.exp(logits[keep] - m)
    return w / np.sum(w)


def _check_tensor(name, X, L=None, H=None, d=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or (L is not None and X.shape[0] != L) or X.shape[1] != H or X.shape[2] != d:
        raise ValueError(f"{name} must have shape (L, {H}, {d}); got {X.shape}")
    return X


def _head_logits(cfg: AttentionConfig, h: int, Q, K, pos, forget, probes) -> np.ndarray:
    enc = cfg.encoders[h]
    q, k = Q[:, h], K[:, h]
    if cfg.qk_norm:
        q, k = rms_normalize(q), rms_normalize(k)
    L = q.shape[0]
    qe = enc.encode_q(q, pos)
    ke = enc.encode_k(k, pos)
    # causal rows only: the upper triangle is masked anyway
    out = np.full((L, L), -np.inf)
    for t in range(L):
        out[t, : t + 1] = (ke[: t + 1] @ qe[t]) * cfg.scale
    offsets = pos[None, :] - pos[:, None]
    if enc.kind == "additive" and enc.lift.kind == "alibi":
        out = out + offsets * (enc.lift.omega * enc.lift.beta)
    elif enc.gated:
        lam = query_gate(enc.lift, q)[:, None] + key_gate(enc.lift, k)[None, :]
        out = out + offsets * enc.slope_scale() * lam
    elif enc.kind == "fox":
        c = ForgetGates(forget[:, h]).U[1:]
        out = out + (c[:, None] - c[None, :])
    elif enc.kind == "path":
        store = ProbeStore(cfg.d, enc.alpha, enc.link, capacity=L)
        store.extend(probes[:, h])
        bias = np.zeros((L, L))
        for t in range(L):
            bias[t, : t + 1] = bias_row(store, t).bias
        out = out + bias
    out[np.triu_indices(L, 1)] = -np.inf
    return out


def logits_batch(cfg: AttentionConfig, Q, K, positions=None, forget=None, probes=None,
                 max_workers: int = 1) -> np.ndarray:
    """Causal logits of shape ``(L, L, H)``; entries with ``j > t`` are -inf.

    ``forget`` (``(L, H)``, values in (0, 1]) feeds FoX heads and ``probes``
    (``(L, H, d)``) feeds path heads.
    """
    Q = _check_tensor("Q", Q, H=cfg.H, d=cfg.d)
    L = Q.shape[0]
    K = _check_tensor("K", K, L=L, H=cfg.H, d=cfg.d)
    if L > cfg.L_max:
        raise ValueError(f"sequence length {L} exceeds L_max={cfg.L_max}")
    pos = np.arange(L, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    if pos.shape != (L,):
        raise ValueError("need one position per token")
    if cfg.needs_forget:
        forget = np.asarray(forget, dtype=np.float64)
        if forget.shape != (L, cfg.H):
            raise ValueError("forget gates must have shape (L, H)")
    if cfg.needs_probes:
        probes = _check_tensor("probes", probes, L=L, H=cfg.H, d=cfg.d)

    def run(h):
        return _head_logits(cfg, h, Q, K, pos, forget, probes)

    if max_workers > 1 and cfg.H > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            heads = list(pool.map(run, range(cfg.H)))
    else:
        heads = [run(h) for h in range(cfg.H)]
    return np.stack(heads, axis=-1)


def attention_batch(cfg: AttentionConfig, Q, K, V, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Logits and head outputs ``y`` of shape ``(L, H, d)``."""
    logits = logits_batch(cfg, Q, K, **kw)
    V = _check_tensor("V", V, L=logits.shape[0], H=cfg.H, d=cfg.d)
    L = logits.shape[0]
    Y = np.empty((L, cfg.H, cfg.d))
    for h in range(cfg.H):
        for t in range(L):
            w = softmax_row(logits[t, : t + 1, h])
            Y[t, h] = w @ V[: t + 1, h]
    return logits, Y


class _HeadCache:
    def __init__(self, cfg: AttentionConfig, enc: HeadEncoder, capacity: int):
        self.enc = enc
        width = cfg.d + 1 if (enc.lift is not None and enc.lift.kind == "shift_vector") else cfg.d
        self.keys = np.empty((capacity, width))
        self.values = np.empty((capacity, cfg.d))
        self.key_gates = np.empty(capacity) if enc.gated else None
        # Neumaier state for the FoX prefix; matches exclusive_cumsum step for step
        self.fox_prefix = np.empty(capacity) if enc.kind == "fox" else None
        self._acc = 0.0
        self._comp = 0.0
        self.probes = ProbeStore(cfg.d, enc.alpha, enc.link, capacity) if enc.kind == "path" else None

    def push_log_gate(self, n: int, x: float) -> None:
        acc = self._acc
        s = acc + x
        if abs(acc) >= abs(x):
            self._comp += (acc - s) + x
        else:
            self._comp += (x - s) + acc
        self._acc = s
        self.fox_prefix[n] = s + self._comp


@dataclass(eq=False)
class StreamingCache:
    """Per-sequence cache of position-transformed keys ``k*_j = G(j) k_j``,
    raw values and the scalar state of additive encoders.

    Entries are written once, at arrival, and are read-only afterwards.
    """

    cfg: AttentionConfig
    positions: list = field(default_factory=list)

    def __post_init__(self):
        capacity = self.cfg.L_max
        self._heads = [_HeadCache(self.cfg, enc, capacity) for enc in self.cfg.encoders]

    def __len__(self) -> int:
        return len(self.positions)

    def cached_keys(self, h: int) -> np.ndarray:
        view = self._heads[h].keys[: len(self)]
        view.flags.writeable = False
        return view

    def cached_values(self, h: int) -> np.ndarray:
        view = self._heads[h].values[: len(self)]
        view.flags.writeable = False
        return view


def step_streaming(cache: StreamingCache, cfg: AttentionConfig, q_t, k_t, v_t, t,
                   forget_t=None, probe_t=None) -> tuple[np.ndarray, np.ndarray]:
    """Consume one token at position ``t``; return its logits row
    ``(n + 1, H)`` against all cached keys and the output ``y_t`` ``(H, d)``."""
    if cfg is not cache.cfg:
        raise ValueError("cache was built for a different config")
    t = float(t)
    if cache.positions and not t > cache.positions[-1]:
        raise ValueError(f"positions must be strictly increasing; got {t} after {cache.positions[-1]}")
    n = len(cache)
    if n >= cfg.L_max:
        raise ValueError("streaming cache is full (L_max reached)")
    q_t = np.asarray(q_t, dtype=np.float64).reshape(cfg.H, cfg.d)
    k_t = np.asarray(k_t, dtype=np.float64).reshape(cfg.H, cfg.d)
    v_t = np.asarray(v_t, dtype=np.float64).reshape(cfg.H, cfg.d)
    if cfg.needs_forget:
        forget_t = np.asarray(forget_t, dtype=np.float64).reshape(cfg.H)
        if np.any(forget_t <= 0.0) or np.any(forget_t > 1.0):
            raise ValueError("forget gates must lie in (0, 1]")
    if cfg.needs_probes:
        probe_t = np.asarray(probe_t, dtype=np.float64).reshape(cfg.H, cfg.d)
    pos = np.asarray(cache.positions + [t])

    row = np.empty((n + 1, cfg.H))
    Y = np.empty((cfg.H, cfg.d))
    for h, hc in enumerate(cache._heads):
        enc = hc.enc
        q, k = q_t[h], k_t[h]
        if cfg.qk_norm:
            q, k = rms_normalize(q), rms_normalize(k)
        hc.keys[n] = enc.encode_k(k, t)
        hc.values[n] = v_t[h]
        if hc.key_gates is not None:
            hc.key_gates[n] = key_gate(enc.lift, k)
        if hc.fox_prefix is not None:
            hc.push_log_gate(n, float(np.log(forget_t[h])))
        if hc.probes is not None:
            hc.probes.append(probe_t[h])

        logit = (hc.keys[: n + 1] @ enc.encode_q(q, t)) * cfg.scale
        offsets = pos - t
        if enc.kind == "additive" and enc.lift.kind == "alibi":
            logit = logit + offsets * (enc.lift.omega * enc.lift.beta)
        elif enc.gated:
            lam = query_gate(enc.lift, q) + hc.key_gates[: n + 1]
            logit = logit + offsets * enc.slope_scale() * lam
        elif enc.kind == "fox":
            c = hc.fox_prefix[: n + 1]
            logit = logit + (c[n] - c)
        elif enc.kind == "path":
            logit = logit + bias_row(hc.probes, n).bias
        row[:, h] = logit
        Y[h] = softmax_row(logit) @ hc.values[: n + 1]
    cache.positions.append(t)
    return row, Y

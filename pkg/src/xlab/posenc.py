"""Positional schemes: absolute tables, rotary, and additive temporal biases.

All relative schemes here are distance-stationary, so a :class:`BiasSet`
stores one bias value per (head, distance) and materialises L×L blocks on
demand. Masked (non-attendable) cells are carried as a separate boolean
mask rather than as -inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, record_op

KINDS = ("none", "sinusoidal", "rotary", "alibi", "windowed", "sandwich", "logbias")

# kind -> ordered {param: (type, default)}; None default means optional/absent
_SCHEMA: dict[str, dict[str, tuple]] = {
    "none": {},
    "sinusoidal": {"base": (float, 1e4)},
    "rotary": {"base": (float, 1e4)},
    "alibi": {"shift": (int, 0), "h": (float, None)},
    "windowed": {"w": (int, None)},
    "sandwich": {"dbar": (int, 128), "base": (float, 1e4)},
    "logbias": {"c": (float, None), "r1": (float, None), "r2": (float, None)},
}
_REQUIRED = {"windowed": ("w",), "logbias": ("c", "r1", "r2")}


class SchemeError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(int(value)) if value.is_integer() and abs(value) < 1e15 else repr(value)
    return str(value)


@dataclass(frozen=True)
class PositionalScheme:
    """One positional scheme plus the parameters of that kind only."""

    kind: str = "none"
    params: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in _SCHEMA:
            raise SchemeError(f"unknown scheme {self.kind!r}; expected one of {', '.join(KINDS)}")
        schema = _SCHEMA[self.kind]
        given = dict(self.params)
        unknown = set(given) - set(schema)
        if unknown:
            raise SchemeError(f"scheme {self.kind!r} does not take {', '.join(sorted(unknown))}")
        for name in _REQUIRED.get(self.kind, ()):
            if given.get(name) is None:
                raise SchemeError(f"scheme {self.kind!r} requires {name}")
        resolved = []
        for name, (typ, default) in schema.items():
            value = given.get(name, default)
            if value is None:
                continue
            try:
                if typ is int:
                    fv = float(value)
                    if not fv.is_integer():
                        raise ValueError
                    value = int(fv)
                else:
                    value = float(value)
            except (TypeError, ValueError):
                raise SchemeError(f"{self.kind}:{name} expects {typ.__name__}, got {value!r}") from None
            resolved.append((name, value))
        object.__setattr__(self, "params", tuple(resolved))
        self._validate()

    def _validate(self):
        p = dict(self.params)
        if self.kind == "windowed" and p["w"] < 1:
            raise SchemeError("windowed:w must be >= 1")
        if self.kind == "sandwich":
            if p["dbar"] < 2 or p["dbar"] % 2:
                raise SchemeError("sandwich:dbar must be a positive even integer")
        if "base" in p and p["base"] <= 1:
            raise SchemeError("base must be > 1")
        if self.kind == "logbias" and p["r2"] < 0:
            raise SchemeError("logbias:r2 must be >= 0")

    @classmethod
    def make(cls, kind: str, **params) -> "PositionalScheme":
        return cls(kind, tuple(params.items()))

    @classmethod
    def parse(cls, text: str) -> "PositionalScheme":
        """Parse ``name[:key=value[,key=value]*]``."""
        text = text.strip()
        kind, _, rest = text.partition(":")
        params = []
        if rest:
            for item in rest.split(","):
                key, eq, value = item.partition("=")
                if not eq or not key.strip():
                    raise SchemeError(f"malformed scheme parameter {item!r} in {text!r}")
                params.append((key.strip(), value.strip()))
        return cls(kind.strip(), tuple(params))

    def get(self, name, default=None):
        return dict(self.params).get(name, default)

    def __str__(self):
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params)

    @property
    def is_absolute(self) -> bool:
        return self.kind == "sinusoidal"

    @property
    def has_bias(self) -> bool:
        return self.kind in ("alibi", "sandwich", "logbias")


@dataclass(frozen=True)
class BiasSet:
    """Per-head additive biases and a causal (optionally windowed) mask.

    ``by_distance[h, k]`` is the bias for distance m - n = k; None means the
    set is mask-only.
    """

    length: int
    by_distance: Optional[np.ndarray] = None
    window: Optional[int] = None

    @property
    def n_heads(self) -> int:
        return 0 if self.by_distance is None else self.by_distance.shape[0]

    def block_mask(self, qpos, kpos) -> np.ndarray:
        dist = np.asarray(qpos)[:, None] - np.asarray(kpos)[None, :]
        mask = dist >= 0
        if self.window is not None:
            mask &= dist < self.window
        return mask

    def block(self, qpos, kpos) -> tuple[Optional[np.ndarray], np.ndarray]:
        """Biases ``(H, len(qpos), len(kpos))`` and mask for absolute positions."""
        qpos, kpos = np.asarray(qpos), np.asarray(kpos)
        dist = qpos[:, None] - kpos[None, :]
        mask = self.block_mask(qpos, kpos)
        if self.by_distance is None:
            return None, mask
        if dist.max(initial=0) >= self.by_distance.shape[1]:
            raise ValueError(f"distance {int(dist.max())} exceeds bias table extent {self.length}")
        if _is_range(qpos) and _is_range(kpos) and len(qpos) and len(kpos):
            return self._toeplitz_block(qpos, kpos), mask
        bias = self.by_distance[:, np.clip(dist, 0, None)]
        return np.where(mask, bias, 0.0), mask

    def _toeplitz_block(self, qpos, kpos) -> np.ndarray:
        # contiguous positions: every row is a reversed slice of one padded table
        m, n = len(qpos), len(kpos)
        d = np.arange(qpos[0] - kpos[-1], qpos[-1] - kpos[0] + 1)
        keep = d >= 0
        if self.window is not None:
            keep &= d < self.window
        table = np.zeros((self.n_heads, m + n - 1), dtype=self.by_distance.dtype)
        table[:, keep] = self.by_distance[:, d[keep]]
        rows = np.lib.stride_tricks.sliding_window_view(table[:, ::-1], n, axis=1)
        return np.ascontiguousarray(rows[:, ::-1])

    def mask(self, L: Optional[int] = None) -> np.ndarray:
        pos = np.arange(self.length if L is None else L)
        return self.block_mask(pos, pos)

    def dense(self, L: Optional[int] = None) -> np.ndarray:
        """All heads as ``(H, L, L)``; masked cells hold 0."""
        L = self.length if L is None else L
        if L > self.length:
            raise ValueError(f"requested {L} exceeds bias table extent {self.length}")
        pos = np.arange(L)
        bias, mask = self.block(pos, pos)
        if bias is None:
            return np.zeros((0, L, L))
        return bias

    def head(self, h: int, L: Optional[int] = None) -> np.ndarray:
        L = self.length if L is None else L
        if self.by_distance is None:
            return np.zeros((L, L))
        pos = np.arange(L)
        dist = pos[:, None] - pos[None, :]
        return np.where(dist >= 0, self.by_distance[h][np.clip(dist, 0, None)], 0.0)

    def diagonal(self, h: int, m: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """(distance, bias) along row ``m`` (0-based, default the last row)."""
        m = self.length - 1 if m is None else m
        dist = np.arange(m + 1)
        if self.window is not None:
            dist = dist[dist < self.window]
        values = np.zeros(len(dist)) if self.by_distance is None else self.by_distance[h, dist]
        return dist, values


def alibi_head_exponents(H: int, shift: float = 0, equalized: Optional[float] = None) -> np.ndarray:
    """Per-head exponents h_n = 8n/H + shift, or one shared value; slope is 2**-h."""
    if H < 1:
        raise ValueError("head count must be >= 1")
    if equalized is not None:
        return np.full(H, float(equalized))
    n = np.arange(1, H + 1)
    return 8.0 * n / H + shift


def alibi_slopes(exponents: Sequence[float]) -> np.ndarray:
    return 2.0 ** -np.asarray(exponents, dtype=float)


def alibi_bias(L: int, slopes: Sequence[float]) -> BiasSet:
    if L < 1:
        raise ValueError("length must be >= 1")
    slopes = np.asarray(slopes, dtype=float)
    dist = np.arange(L, dtype=float)
    return BiasSet(L, 0.0 - slopes[:, None] * dist[None, :])


def windowed_mask(L: int, w: int) -> BiasSet:
    if w < 1:
        raise ValueError("window size must be >= 1")
    if L < 1:
        raise ValueError("length must be >= 1")
    return BiasSet(L, None, window=w)


def _inv_freq(d: int, base: float) -> np.ndarray:
    # channel i in 0..d/2-1 rotates at 1 / base**(2i/d)
    return 1.0 / base ** (2.0 * np.arange(d // 2) / d)


def sinusoidal_table(L: int, d: int, base: float = 1e4) -> np.ndarray:
    """Absolute embeddings with (sin, cos) interleaved per channel pair."""
    if d % 2:
        raise ValueError(f"sinusoidal width must be even, got {d}")
    angles = np.arange(L)[:, None] * _inv_freq(d, base)[None, :]
    table = np.empty((L, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def rotary_apply(x: Tensor, positions, base: float = 1e4) -> Tensor:
    """Rotate consecutive pairs of the last axis by position-dependent angles.

    ``x`` has shape (..., L, d_head); ``positions`` has length L.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ValueError(f"rotary head width must be even, got {dh}")
    angles = np.asarray(positions, dtype=float)[:, None] * _inv_freq(dh, base)[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)

    def rotate(a, s):
        even, odd = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    return record_op(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),))


def sandwich_raw(distances, dbar: int = 128, base: float = 1e4) -> np.ndarray:
    """Sum over channels of cos(distance / base**(2i/dbar)); peaks at dbar/2."""
    distances = np.asarray(distances, dtype=float)
    freqs = _inv_freq(dbar, base)
    out = np.zeros(distances.shape)
    for f in freqs:
        out += np.cos(distances * f)
    return out


def sandwich_bias(L: int, dbar: int = 128, base: float = 1e4, head_exponents: Sequence[float] = (8.0,)) -> BiasSet:
    """(raw(m - n) - dbar/2) / h_n per head."""
    if dbar < 2 or dbar % 2:
        raise ValueError("dbar must be a positive even integer")
    hs = np.asarray(head_exponents, dtype=float)
    if np.any(hs == 0):
        raise ZeroDivisionError("sandwich compression ratio h = 0 is not allowed")
    raw = sandwich_raw(np.arange(L), dbar, base)
    return BiasSet(L, (raw[None, :] - dbar / 2) / hs[:, None])


def log_bias(L: int, c, r1, r2, n_heads: int = 1) -> BiasSet:
    """c - r1*log(1 + r2*distance); scalars are shared across ``n_heads``."""
    c, r1, r2 = (np.broadcast_to(np.asarray(v, dtype=float), (n_heads,)) for v in (c, r1, r2))
    if np.any(r2 < 0):
        raise ValueError("r2 must be >= 0")
    dist = np.arange(L, dtype=float)
    return BiasSet(L, c[:, None] - r1[:, None] * np.log1p(r2[:, None] * dist[None, :]))


def build_bias(scheme: PositionalScheme, n_heads: int, L: int) -> Optional[BiasSet]:
    """Bias/mask table for ``scheme`` covering lengths up to ``L``; None if the scheme has none."""
    kind = scheme.kind
    if kind == "alibi":
        hs = alibi_head_exponents(n_heads, scheme.get("shift", 0), scheme.get("h"))
        return alibi_bias(L, alibi_slopes(hs))
    if kind == "windowed":
        return windowed_mask(L, scheme.get("w"))
    if kind == "sandwich":
        return sandwich_bias(L, scheme.get("dbar"), scheme.get("base"), alibi_head_exponents(n_heads))
    if kind == "logbias":
        return log_bias(L, scheme.get("c"), scheme.get("r1"), scheme.get("r2"), n_heads)
    return None


def log_curve(distances, a: float, b: float) -> np.ndarray:
    return a * np.log1p(np.asarray(distances, dtype=float)) + b


__all__ = [
    "KINDS",
    "PositionalScheme",
    "SchemeError",
    "BiasSet",
    "alibi_head_exponents",
    "alibi_slopes",
    "alibi_bias",
    "windowed_mask",
    "sinusoidal_table",
    "rotary_apply",
    "sandwich_raw",
    "sandwich_bias",
    "log_bias",
    "build_bias",
    "log_curve",
]


def _is_range(pos: np.ndarray) -> bool:
    return pos.ndim == 1 and (len(pos) < 2 or bool(np.all(np.diff(pos) == 1)))

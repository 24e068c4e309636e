"""Cumulative normalized gradients, empirical receptive field, log-curve fits."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Transformer, input_gradients
from .train import Corpus


class DegenerateGradient(ValueError):
    """Every input gradient is zero, so normalized saliency is undefined."""


@dataclass
class SaliencyReport:
    context_len: int
    s: np.ndarray  # s[m] for m = 0..L-1 (oldest first), sums to 1
    c: np.ndarray  # c[m] = sum(s[m:])
    erf: int
    threshold: float
    segments: int
    scheme: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "s", "c"])
        for m, (sv, cv) in enumerate(zip(self.s, self.c), start=1):
            w.writerow([m, repr(float(sv)), repr(float(cv))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "L_ctx": self.context_len,
                "erf": self.erf,
                "threshold": self.threshold,
                "segments": self.segments,
            },
            sort_keys=True,
        )


def normalize_gradients(grads: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(np.asarray(grads, dtype=np.float64), axis=-1)
    total = norms.sum()
    if total == 0 or not np.isfinite(total):
        raise DegenerateGradient("input gradients are all zero or non-finite")
    return norms / total


def saliency(model: Transformer, tokens, target_position: int, next_token: int) -> np.ndarray:
    """s_m = |g_m| / sum_n |g_n| for the prediction made at ``target_position``."""
    return normalize_gradients(input_gradients(model, tokens, target_position, next_token))


def cumulative_tail(s) -> np.ndarray:
    """c_m = sum_{n >= m} s_n."""
    s = np.asarray(s, dtype=np.float64)
    return np.cumsum(s[::-1])[::-1]


def erf_size(s, threshold: float = 0.99) -> int:
    """Length of the shortest recent suffix holding at least ``threshold`` of the mass."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    s = np.asarray(s, dtype=np.float64)
    suffix = np.cumsum(s[::-1])
    hit = np.nonzero(suffix >= threshold)[0]
    if len(hit) == 0:
        # rounding left the full sum a hair short of 1
        return len(s)
    return int(hit[0]) + 1


def measure(
    model: Transformer,
    segments: np.ndarray,
    threshold: float = 0.99,
) -> SaliencyReport:
    """Average saliency over rows of ``segments`` (each L_ctx + 1 tokens long).

    Each row's first L_ctx tokens are the context; its last token is the
    target predicted at the final context position.
    """
    segments = np.asarray(segments)
    if segments.ndim != 2 or segments.shape[1] < 2:
        raise ValueError("segments must be (N, L_ctx + 1) with L_ctx >= 1")
    L = segments.shape[1] - 1
    model.ensure_extent(L)
    acc = np.zeros(L)
    for row in segments:
        acc += saliency(model, row[:-1], L - 1, int(row[-1]))
    s = acc / len(segments)
    return SaliencyReport(
        context_len=L,
        s=s,
        c=cumulative_tail(s),
        erf=erf_size(s, threshold),
        threshold=threshold,
        segments=len(segments),
        scheme=str(model.config.scheme),
    )


def measure_corpus(model: Transformer, corpus: Corpus, context_len: int, n_segments: int = 16, seed: int = 0, threshold: float = 0.99) -> SaliencyReport:
    from .evalx import segment_sampler

    segs = segment_sampler(corpus, [context_len + 1], n_segments, seed)[context_len + 1]
    return measure(model, segs, threshold)


@dataclass(frozen=True)
class LogFit:
    """y ≈ slope * log(1 + x) + intercept."""

    slope: float
    intercept: float
    rms: float
    window: int

    def __call__(self, x):
        return self.slope * np.log1p(np.asarray(x, dtype=float)) + self.intercept

    def to_json(self) -> str:
        return json.dumps(
            {"a": self.slope, "b": self.intercept, "rms": self.rms, "window": self.window}, sort_keys=True
        )


def fit_log_curve(distances, values, window: Optional[int] = 50) -> LogFit:
    """Ordinary least squares of ``values`` on log(1 + distance) over the ``window`` nearest distances."""
    x = np.asarray(distances, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("distances and values must be 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    if np.any(x < 0):
        raise ValueError("distances must be >= 0")
    order = np.argsort(x, kind="stable")
    if window is not None:
        order = order[:window]
    x, y = x[order], y[order]
    u = np.log1p(x)
    uc = u - u.mean()
    sxx = float(uc @ uc)
    if sxx == 0:
        raise ValueError("singular fit: all distances in the window are equal")
    slope = float(uc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * u.mean())
    resid = y - (slope * u + intercept)
    return LogFit(slope, intercept, float(np.sqrt(np.mean(resid**2))), len(x))

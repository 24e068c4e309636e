"""Varying-context perplexity evaluation and cache-window inference.

Every evaluation length scores the same final tokens: for an anchor ``a``
the L_ex segment is ``tokens[a - L_ex + 1 : a + 1]``; the model conditions on
the first L_ex - 1 tokens and is scored on the last one.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import AttentionCounter, Transformer, attention_head
from .posenc import rotary_apply
from .train import Corpus


@dataclass
class EvalProtocol:
    lengths: Sequence[int] = (128, 256, 512)
    n_segments: int = 200
    seed: int = 0
    batch: int = 8

    def __post_init__(self):
        if not self.lengths:
            raise ValueError("at least one evaluation length is required")
        if min(self.lengths) < 2:
            raise ValueError("every evaluation length must be >= 2")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")


@dataclass
class EvalEntry:
    length: int
    nll: np.ndarray  # per-segment -log p of the final token

    @property
    def n_segments(self) -> int:
        return len(self.nll)

    @property
    def mean_nll(self) -> float:
        return float(np.mean(self.nll))

    @property
    def std_nll(self) -> float:
        return float(np.std(self.nll))

    @property
    def ppl(self) -> float:
        return math.exp(self.mean_nll)


@dataclass
class EvalReport:
    scheme: str
    entries: list = field(default_factory=list)
    nonfinite: bool = False

    def by_length(self) -> dict:
        return {e.length: e for e in self.entries}

    def rows(self) -> list:
        return [
            [self.scheme, e.length, repr(e.ppl), repr(e.mean_nll), repr(e.std_nll), e.n_segments] for e in self.entries
        ]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


REPORT_HEADER = ["scheme", "L_ex", "ppl", "mean_nll", "std_nll", "n_segments"]


def segment_anchors(corpus: Corpus, max_len: int, n: int, seed: int = 0) -> np.ndarray:
    """``n`` distinct anchor indices whose ``max_len``-token segments lie inside the eval split."""
    lo = corpus.split + max_len - 1
    hi = len(corpus.tokens)
    if hi - lo < n:
        raise ValueError(
            f"eval split of {len(corpus.eval)} tokens cannot supply {n} segments of length {max_len}"
        )
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(np.arange(lo, hi), size=n, replace=False))


def segments_at(corpus: Corpus, anchors: np.ndarray, length: int) -> np.ndarray:
    idx = np.asarray(anchors)[:, None] + np.arange(-length + 1, 1)[None, :]
    if idx.min() < 0:
        raise ValueError("segment starts before the corpus")
    return corpus.tokens[idx].astype(np.int64)


def segment_sampler(corpus: Corpus, lengths: Sequence[int], n: int, seed: int = 0) -> dict:
    """Map each length to an (n, length) array; shorter segments are suffixes of longer ones."""
    anchors = segment_anchors(corpus, max(lengths), n, seed)
    return {L: segments_at(corpus, anchors, L) for L in lengths}


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("XLAB_THREADS", "1")))
    except ValueError:
        return 1


def final_token_nll(model: Transformer, segments: np.ndarray, batch: int = 8) -> np.ndarray:
    """-log p(last token | preceding tokens) for each row of ``segments``."""
    segments = np.asarray(segments)
    if segments.ndim != 2 or segments.shape[1] < 2:
        raise ValueError("segments must be an (N, L) array with L >= 2")
    model.ensure_extent(segments.shape[1] - 1)

    def run(chunk):
        with T.no_grad():
            logits = model.forward(chunk[:, :-1]).data[:, -1, :]
        logp = T.log_softmax(logits.astype(np.float64))
        return -logp[np.arange(len(chunk)), chunk[:, -1]]

    chunks = [segments[i : i + batch] for i in range(0, len(segments), batch)]
    workers = _workers()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def last_token_ppl(model: Transformer, segments: np.ndarray, batch: int = 8) -> EvalEntry:
    segments = np.asarray(segments)
    return EvalEntry(segments.shape[1], final_token_nll(model, segments, batch))


def evaluate(model: Transformer, corpus: Corpus, protocol: EvalProtocol) -> EvalReport:
    segs = segment_sampler(corpus, protocol.lengths, protocol.n_segments, protocol.seed)
    report = EvalReport(str(model.config.scheme))
    for L in protocol.lengths:
        entry = last_token_ppl(model, segs[L], protocol.batch)
        report.nonfinite |= not np.all(np.isfinite(entry.nll))
        report.entries.append(entry)
    return report


class KVWindow:
    """Per-layer keys/values for at most ``size`` recent positions."""

    def __init__(self, n_layers: int, size: int):
        self.size = size
        self.keys = [None] * n_layers
        self.values = [None] * n_layers
        self.positions = np.zeros(0, dtype=np.int64)

    def load(self, kv: list, positions: np.ndarray) -> None:
        keep = slice(-self.size, None)
        for i, (k, v) in enumerate(kv):
            self.keys[i] = k[:, :, keep, :]
            self.values[i] = v[:, :, keep, :]
        self.positions = np.asarray(positions)[keep]

    def push(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)[:, :, -self.size :, :]
        self.values[layer] = np.concatenate([self.values[layer], v], axis=2)[:, :, -self.size :, :]


def _decode_step(model: Transformer, cache: KVWindow, token: np.ndarray, pos: int, counter) -> np.ndarray:
    """Advance one position for a batch of streams; returns next-token logits (B, v)."""
    cfg = model.config
    p = model.params
    H, dh = cfg.n_heads, cfg.head_dim
    B = token.shape[0]
    positions = np.array([pos])
    kpos = np.concatenate([cache.positions, positions])[-cache.size :]
    x = model.embed(token[:, None], positions)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(w):
            return T.transpose(T.reshape(h @ p[pre + "attn." + w], (B, 1, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        if cfg.scheme.kind == "rotary":
            q = rotary_apply(q, positions, cfg.scheme.get("base"))
            k = rotary_apply(k, positions, cfg.scheme.get("base"))
        cache.push(i, k.data, v.data)
        keys, values = T.Tensor(cache.keys[i]), T.Tensor(cache.values[i])
        bias, mask = model.block(positions, kpos)
        if counter is not None:
            counter.add(B * H * len(kpos))
        o = attention_head(q, keys, values, bias, mask)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, 1, cfg.d_model))
        x = x + o @ p[pre + "attn.wo"]
        x = x + model.ffn(i, T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]))
    cache.positions = kpos
    x = T.layernorm(x, p["ln_f.g"], p["ln_f.b"])
    return (x @ p["out"]).data[:, 0, :]


def cached_logits(model: Transformer, tokens, cache_window: int, counter: Optional[AttentionCounter] = None) -> np.ndarray:
    """Logits for the token after ``tokens`` using a bounded key/value window.

    The first ``cache_window`` positions run as one ordinary forward pass;
    each later position attends only to the most recent ``cache_window``
    cached keys/values, the oldest being discarded. Absolute-position models
    instead re-encode the trailing window from position 0 at every step.
    """
    if cache_window < 1:
        raise ValueError("cache window must be >= 1")
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    B, L = tokens.shape
    if L < 1:
        raise ValueError("need at least one token")
    with T.no_grad():
        if model.config.scheme.is_absolute:
            model.ensure_extent(min(L, cache_window))
            if L <= cache_window:
                out = model.forward(tokens, counter=counter).data[:, -1, :]
            else:
                out = None
                for end in range(cache_window, L + 1):
                    # re-encoding every window is the point; only the last result is kept
                    out = model.forward(tokens[:, end - cache_window : end], counter=counter).data[:, -1, :]
        else:
            model.ensure_extent(L)
            first = min(L, cache_window)
            kv: list = []
            out = model.forward(tokens[:, :first], kv_out=kv, counter=counter).data[:, -1, :]
            cache = KVWindow(model.config.n_layers, cache_window)
            cache.load(kv, np.arange(first))
            for pos in range(first, L):
                out = _decode_step(model, cache, tokens[:, pos], pos, counter)
    return out[0] if single else out


def cached_inference(model: Transformer, tokens, cache_window: int, counter: Optional[AttentionCounter] = None) -> np.ndarray:
    """Next-token probability distribution after ``tokens`` under a cache window."""
    logits = cached_logits(model, tokens, cache_window, counter)
    return np.exp(T.log_softmax(logits.astype(np.float64)))


def cached_last_token_ppl(model: Transformer, segments: np.ndarray, cache_window: int, batch: int = 8, counter=None) -> EvalEntry:
    segments = np.asarray(segments)
    nll = []
    for i in range(0, len(segments), batch):
        chunk = segments[i : i + batch]
        logits = cached_logits(model, chunk[:, :-1], cache_window, counter)
        logp = T.log_softmax(logits.astype(np.float64))
        nll.append(-logp[np.arange(len(chunk)), chunk[:, -1]])
    return EvalEntry(segments.shape[1], np.concatenate(nll))

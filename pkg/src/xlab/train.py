"""Byte-level corpora, batching, Adam, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import sysconfig
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .model import Transformer

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    """Byte tokens with the eval split taken from the tail."""

    tokens: np.ndarray
    split: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint8)
        if not 0 < self.split <= len(self.tokens):
            raise ValueError(f"split offset {self.split} outside corpus of {len(self.tokens)} tokens")

    @classmethod
    def from_bytes(cls, data: bytes, eval_fraction: float = 0.05) -> "Corpus":
        if not 0 <= eval_fraction < 1:
            raise ValueError("eval_fraction must lie in [0, 1)")
        tokens = np.frombuffer(bytes(data), dtype=np.uint8)
        if len(tokens) < 2:
            raise ValueError("corpus must hold at least 2 bytes")
        split = len(tokens) - int(round(len(tokens) * eval_fraction))
        return cls(tokens, split)

    @classmethod
    def from_file(cls, path, eval_fraction: float = 0.05) -> "Corpus":
        return cls.from_bytes(Path(path).read_bytes(), eval_fraction)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def eval(self) -> np.ndarray:
        return self.tokens[self.split :]

    def __len__(self):
        return len(self.tokens)


def sample_batch(corpus: Corpus, length: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` random contiguous windows of ``length + 1`` tokens from the train split."""
    if corpus.split < length + 1:
        raise ValueError(f"train split has {corpus.split} tokens; need at least {length + 1}")
    starts = rng.integers(0, corpus.split - length, size=batch)
    idx = starts[:, None] + np.arange(length + 1)[None, :]
    return corpus.tokens[idx].astype(np.int64)


@dataclass
class TrainSettings:
    lr: float = 6e-4
    batch: int = 16
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip: Optional[float] = 1.0
    warmup: int = 100
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def lr_at(self, step: int) -> float:
        """Constant rate after a linear warmup; ``step`` is 1-based."""
        if self.warmup > 0 and step < self.warmup:
            return self.lr * step / self.warmup
        return self.lr


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, settings: TrainSettings, lr: Optional[float] = None) -> float:
    """One bias-corrected Adam update in place; returns the pre-clip global gradient norm.

    Raises FloatingPointError naming the first parameter with a non-finite gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    scale = 1.0
    if settings.clip is not None and norm > settings.clip:
        scale = settings.clip / norm
    state.step += 1
    t = state.step
    lr = settings.lr_at(t) if lr is None else lr
    b1, b2 = settings.beta1, settings.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        g = g * scale if scale != 1.0 else g
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + settings.eps)
    return norm


@dataclass
class TrainResult:
    model: Transformer
    state: AdamState
    losses: list  # (step, loss)


def _train_state_blob(state: AdamState, settings: TrainSettings) -> tuple[dict, dict]:
    meta = {"step": state.step, "settings": asdict(settings)}
    records = {}
    for name in state.m:
        records["adam.m." + name] = state.m[name]
        records["adam.v." + name] = state.v[name]
    return meta, records


def save_training(path, model: Transformer, state: AdamState, settings: TrainSettings) -> None:
    meta, records = _train_state_blob(state, settings)
    ckpt.save(path, model, train_state=meta, extra_records=records)


def load_training(path) -> tuple[Transformer, AdamState, Optional[TrainSettings]]:
    model, meta, records = ckpt.load(path)
    train = meta.get("train") or {}
    state = AdamState(step=int(train.get("step", 0)))
    for key, arr in records.items():
        kind, _, name = key.partition(".")[2].partition(".")
        if key.startswith("adam.") and name in model.params:
            target = state.m if kind == "m" else state.v
            target[name] = arr.astype(model.dtype)
    settings = TrainSettings(**train["settings"]) if "settings" in train else None
    return model, state, settings


def train_loop(
    model: Transformer,
    settings: TrainSettings,
    corpus: Corpus,
    state: Optional[AdamState] = None,
    checkpoint_path=None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run ``settings.steps`` steps past ``state.step``.

    Batches depend only on (seed, step), so resuming from a checkpoint replays
    the same stream.
    """
    state = state or AdamState()
    L = model.config.train_len
    losses = []
    params = {n: p.data for n, p in model.params.items()}
    end = state.step + settings.steps
    while state.step < end:
        step = state.step + 1
        rng = np.random.default_rng([settings.seed, step])
        batch = sample_batch(corpus, L, settings.batch, rng)
        model.zero_grad()
        with T.Tape():
            loss = model.loss(batch)
            T.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        adam_step(params, {n: p.grad for n, p in model.params.items()}, state, settings)
        losses.append((step, value))
        if on_step is not None:
            on_step(step, value)
        if checkpoint_path and settings.checkpoint_every and step % settings.checkpoint_every == 0:
            save_training(checkpoint_path, model, state, settings)
    if checkpoint_path:
        save_training(checkpoint_path, model, state, settings)
    return TrainResult(model, state, losses)


def write_loss_log(path, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, value in losses:
            w.writerow([step, repr(float(value))])


def repeating_corpus(n_bytes: int, seed: int = 0, n_phrases: int = 64) -> bytes:
    """Synthetic text built by repeating a small random phrase book."""
    rng = np.random.default_rng(seed)
    alphabet = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    phrases = []
    for _ in range(n_phrases):
        words = [bytes(rng.choice(alphabet, rng.integers(2, 8))) for _ in range(rng.integers(3, 7))]
        phrases.append(b" ".join(words) + b".\n")
    out = bytearray()
    while len(out) < n_bytes:
        out += phrases[rng.integers(n_phrases)]
    return bytes(out[:n_bytes])


def stdlib_corpus(min_bytes: int = 6_000_000) -> bytes:
    """Concatenated Python standard-library sources, in sorted path order."""
    root = Path(sysconfig.get_paths()["stdlib"])
    out = bytearray()
    for path in sorted(root.rglob("*.py")):
        if "test" in path.parts or "site-packages" in path.parts:
            continue
        try:
            out += path.read_bytes()
        except OSError:
            continue
        if len(out) >= min_bytes:
            break
    if len(out) < min_bytes:
        raise RuntimeError(f"standard library sources only provide {len(out)} bytes")
    return bytes(out[:min_bytes])

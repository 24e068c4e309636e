"""Decoder-only transformer LM parameterised by a positional scheme."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .posenc import BiasSet, PositionalScheme, build_bias, rotary_apply, sinusoidal_table
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int = 256
    train_len: int = 128
    ffn_mult: int = 4
    scheme: PositionalScheme = field(default_factory=PositionalScheme)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", PositionalScheme.parse(self.scheme))
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.train_len < 2:
            raise ValueError("train_len must be >= 2")
        dh = self.d_model // self.n_heads
        if self.scheme.kind == "rotary" and dh % 2:
            raise ValueError("rotary needs an even head width")
        if self.scheme.kind == "sinusoidal" and self.d_model % 2:
            raise ValueError("sinusoidal needs an even model width")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}") from None
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = str(self.scheme)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "desk": ModelConfig(n_layers=4, n_heads=4, d_model=128, vocab_size=256, train_len=128, ffn_mult=4),
    # Full-size reference shape; byte vocabulary instead of a BPE tokenizer.
    "full": ModelConfig(n_layers=12, n_heads=12, d_model=768, vocab_size=256, train_len=512, ffn_mult=4),
}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f, v = cfg.d_model, cfg.ffn_mult * cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (v, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.w1": (d, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, d),
                p + "ffn.b2": (d,),
            }
        )
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "out": (d, v)})
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return params


class AttentionCounter:
    """Tally of query-key scores computed by attention."""

    def __init__(self):
        self.pairs = 0

    def add(self, n: int) -> None:
        self.pairs += int(n)


def attention_head(q: Tensor, k: Tensor, v: Tensor, bias=None, mask=None, scale: Optional[float] = None) -> Tensor:
    """softmax(q kᵀ / scale + bias, masked) · v over trailing (L, d_head) axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = math.sqrt(q.shape[-1]) if scale is None else scale
    scores = T.matmul(q, T.swapaxes(k, -1, -2))
    attn = T.scaled_softmax_rows(scores, scale, mask, bias)
    return T.matmul(attn, v)


class Transformer:
    """Pre-norm decoder: x + Attn(LN(x)), then x + FFN(LN(x)), final LN, vocab projection."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, dtype=np.float64, extent: Optional[int] = None):
        self.config = config
        raw = init_params(config, dtype) if params is None else params
        shapes = param_shapes(config)
        if set(raw) != set(shapes):
            missing = set(shapes) - set(raw)
            extra = set(raw) - set(shapes)
            raise ValueError(f"parameter names disagree with config (missing {sorted(missing)}, extra {sorted(extra)})")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(raw[name].data if isinstance(raw[name], Tensor) else raw[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr.astype(dtype, copy=False), requires_grad=True)
        self.dtype = np.dtype(dtype)
        self.extent = 0
        self.bias: Optional[BiasSet] = None
        self.pos_table: Optional[np.ndarray] = None
        self._block_cache = None
        self.ensure_extent(extent or config.train_len)

    def ensure_extent(self, L: int) -> None:
        """Precompute positional tables for positions < L (grows only)."""
        if L <= self.extent:
            return
        cfg = self.config
        self.bias = build_bias(cfg.scheme, cfg.n_heads, L)
        if cfg.scheme.is_absolute:
            self.pos_table = sinusoidal_table(L, cfg.d_model, cfg.scheme.get("base")).astype(self.dtype)
        self.extent = L

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Temporarily stop parameters from collecting gradients."""
        flags = {n: p.requires_grad for n, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.requires_grad = flags[n]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _check_positions(self, positions: np.ndarray) -> None:
        top = int(positions.max()) + 1 if positions.size else 0
        if top > self.extent:
            raise ValueError(f"position {top - 1} exceeds the precomputed extent {self.extent}; call ensure_extent first")

    def embed(self, tokens, positions=None) -> Tensor:
        """Token embedding plus the absolute positional term, if any."""
        tokens = np.asarray(tokens)
        positions = np.arange(tokens.shape[-1]) if positions is None else np.asarray(positions)
        self._check_positions(positions)
        x = T.embedding_lookup(self.params["tok_emb"], tokens)
        if self.pos_table is not None:
            x = x + self.pos_table[positions]
        return x

    def attention(self, i: int, h: Tensor, positions, kv_out: Optional[list] = None, counter=None) -> Tensor:
        cfg = self.config
        p = self.params
        pre = f"layers.{i}.attn."
        B, L, d = h.shape
        H, dh = cfg.n_heads, cfg.head_dim

        def heads(w):
            return T.transpose(T.reshape(h @ p[pre + w], (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        if cfg.scheme.kind == "rotary":
            q = rotary_apply(q, positions, cfg.scheme.get("base"))
            k = rotary_apply(k, positions, cfg.scheme.get("base"))
        if kv_out is not None:
            kv_out.append((k.data, v.data))
        bias, mask = self.block(positions, positions)
        if counter is not None:
            counter.add(B * H * L * L)
        o = attention_head(q, k, v, bias, mask)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, L, d))
        return o @ p[pre + "wo"]

    def block(self, qpos, kpos):
        """(bias, mask) for query/key positions; the last result is reused across layers."""
        qpos, kpos = np.asarray(qpos), np.asarray(kpos)
        key = (self.extent, qpos.tobytes(), kpos.tobytes())
        if self._block_cache is not None and self._block_cache[0] == key:
            return self._block_cache[1]
        if self.bias is None:
            out = None, qpos[:, None] >= kpos[None, :]
        else:
            bias, mask = self.bias.block(qpos, kpos)
            out = (None if bias is None else bias.astype(self.dtype)), mask
        self._block_cache = (key, out)
        return out

    def ffn(self, i: int, h: Tensor) -> Tensor:
        p = self.params
        pre = f"layers.{i}.ffn."
        return T.gelu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]

    def run(self, x: Tensor, positions=None, kv_out: Optional[list] = None, counter=None) -> Tensor:
        """Blocks, final norm and vocabulary projection on embedded input (B, L, d)."""
        p = self.params
        positions = np.arange(x.shape[1]) if positions is None else np.asarray(positions)
        for i in range(self.config.n_layers):
            pre = f"layers.{i}."
            x = x + self.attention(i, T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), positions, kv_out, counter)
            x = x + self.ffn(i, T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]))
        x = T.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        return x @ p["out"]

    def forward(self, tokens, positions=None, kv_out: Optional[list] = None, counter=None) -> Tensor:
        """Next-token logits, (L, v) for a 1-D input or (B, L, v) for a batch."""
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        x = self.embed(tokens, positions)
        logits = self.run(x, positions, kv_out, counter)
        return T.reshape(logits, logits.shape[1:]) if single else logits

    __call__ = forward

    def loss(self, batch: np.ndarray) -> Tensor:
        """Mean next-token cross-entropy over a (B, L+1) token window batch."""
        batch = np.asarray(batch)
        logits = self.forward(batch[:, :-1])
        return T.cross_entropy(logits, batch[:, 1:])

    def logprobs(self, tokens) -> np.ndarray:
        with T.no_grad():
            return T.log_softmax(self.forward(tokens).data)


def input_gradients(model: Transformer, tokens, target_position: int, next_token: int) -> np.ndarray:
    """Gradient of -log p(next_token | output at target_position) w.r.t. each input vector.

    Input vectors are taken after the absolute positional term is added.
    Returns an (L, d) array.
    """
    tokens = np.asarray(tokens)
    L = tokens.shape[-1]
    if not 0 <= target_position < L:
        raise ValueError(f"target_position {target_position} outside context of length {L}")
    with T.no_grad():
        x0 = model.embed(tokens[None, :]).data
    with model.frozen(), T.Tape():
        x = Tensor(x0, requires_grad=True)
        logits = model.run(x)
        loss = T.cross_entropy(logits[:, target_position, :], np.array([next_token]))
        T.backward(loss)
    return x.grad[0]

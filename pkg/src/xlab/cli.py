"""Command-line entry point: ``xlab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .erf import fit_log_curve, measure_corpus
from .evalx import REPORT_HEADER, EvalProtocol, EvalReport, cached_last_token_ppl, evaluate, segment_sampler
from .experiments import grid_csv, run_grid
from .model import ModelConfig, Transformer
from .posenc import PositionalScheme, SchemeError, alibi_head_exponents, build_bias
from .train import Corpus, TrainSettings, load_training, train_loop, write_loss_log

log = logging.getLogger("xlab")


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""


def _int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _str_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(";") if x.strip()]


@dataclass
class RunConfig:
    preset: str = "desk"
    scheme: Optional[str] = None
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    out: str = "xlab-out"
    seed: int = 0
    n_segments: int = 200
    lex: list = field(default_factory=lambda: [128, 256, 512])
    cache_window: Optional[int] = None
    eval_fraction: float = 0.05
    steps: int = 1000
    lr: float = 6e-4
    batch: int = 16
    warmup: int = 100
    dtype: str = "float64"
    # model overrides
    layers: Optional[int] = None
    heads: Optional[int] = None
    d_model: Optional[int] = None
    train_len: Optional[int] = None
    # erf / bias / fit
    lctx: Optional[int] = None
    threshold: float = 0.99
    length: Optional[int] = None
    head: Optional[int] = None
    row: Optional[int] = None
    window: int = 50
    diagonal: bool = False
    # batch mode
    schemes: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    _CONVERT = {
        "lex": _int_list,
        "seeds": _int_list,
        "schemes": _str_list,
        "diagonal": lambda v: v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes"),
    }

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    def update(self, values: dict) -> "RunConfig":
        unknown = set(values) - set(self.keys())
        if unknown:
            raise UsageError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        types = {f.name: f for f in fields(self)}
        for key, raw in values.items():
            if raw is None:
                setattr(self, key, None)
                continue
            conv = self._CONVERT.get(key)
            if conv is None:
                default = types[key].default
                if isinstance(default, bool):
                    conv = bool
                elif isinstance(default, int) or key in ("cache_window", "layers", "heads", "d_model", "train_len", "lctx", "length", "head", "row"):
                    conv = int
                elif isinstance(default, float):
                    conv = float
                else:
                    conv = str
            try:
                setattr(self, key, conv(raw))
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {key}: {raw!r}") from None
        if self.scheme is not None:
            try:
                self.scheme = str(PositionalScheme.parse(self.scheme))
            except SchemeError as exc:
                raise UsageError(str(exc)) from None
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse JSON or ``key=value`` lines (``#`` starts a comment)."""
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                data = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise UsageError(f"bad JSON config: {exc}") from None
        else:
            data = {}
            for n, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, eq, value = line.partition("=")
                if not eq:
                    raise UsageError(f"config line {n}: expected key=value, got {line!r}")
                data[key.strip().replace("-", "_")] = value.strip()
        return cls().update(data)

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            value = getattr(self, key)
            if value is None:
                continue
            if key in ("lex", "seeds"):
                value = ",".join(str(v) for v in value)
            elif key == "schemes":
                value = ";".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def model_config(self, scheme: Optional[str] = None, seed: Optional[int] = None) -> ModelConfig:
        overrides = {}
        for key, name in (("layers", "n_layers"), ("heads", "n_heads"), ("d_model", "d_model"), ("train_len", "train_len")):
            if getattr(self, key) is not None:
                overrides[name] = getattr(self, key)
        overrides["scheme"] = PositionalScheme.parse(scheme or self.scheme or "none")
        overrides["seed"] = self.seed if seed is None else seed
        try:
            return ModelConfig.preset(self.preset, **overrides)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch=self.batch, steps=self.steps, warmup=self.warmup, seed=self.seed)

    def load_corpus(self) -> Corpus:
        if not self.corpus:
            raise UsageError("--corpus is required")
        path = Path(self.corpus)
        if not path.is_file():
            raise UsageError(f"corpus not found: {path}")
        return Corpus.from_file(path, self.eval_fraction)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: RunConfig) -> Transformer:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, _, _ = ckpt.load(path)
    if cfg.scheme is not None and cfg.scheme != str(model.config.scheme):
        print(
            f"warning: --scheme {cfg.scheme} differs from checkpoint scheme {model.config.scheme}; using the checkpoint's",
            file=sys.stderr,
        )
    return model


def _model_or_random(cfg: RunConfig) -> Transformer:
    if cfg.checkpoint:
        return _load_model(cfg)
    return Transformer(cfg.model_config(), dtype=np.dtype(cfg.dtype))


def cmd_train(cfg: RunConfig) -> int:
    corpus = cfg.load_corpus()
    out = _out_dir(cfg)
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.xlab"
    settings = cfg.train_settings()
    state = None
    if cfg.checkpoint and path.is_file():
        model, state, _ = load_training(path)
    else:
        model = Transformer(cfg.model_config(), dtype=np.dtype(cfg.dtype))
    result = train_loop(model, settings, corpus, state=state, checkpoint_path=path)
    write_loss_log(out / "loss.csv", result.losses)
    final = result.losses[-1][1] if result.losses else float("nan")
    print(f"trained {model.config.scheme} for {settings.steps} steps; final loss {final:.4f}; checkpoint {path}")
    return 0


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    corpus = cfg.load_corpus()
    protocol = EvalProtocol(lengths=cfg.lex, n_segments=cfg.n_segments, seed=cfg.seed)
    report = evaluate(model, corpus, protocol)
    text = report.to_csv()
    path = _write(_out_dir(cfg), "eval.csv", text)
    sys.stdout.write(text)
    log.info("wrote %s", path)
    return 1 if report.nonfinite else 0


def cmd_erf(cfg: RunConfig) -> int:
    model = _model_or_random(cfg)
    corpus = cfg.load_corpus()
    lctx = cfg.lctx or 2 * model.config.train_len
    report = measure_corpus(model, corpus, lctx, n_segments=cfg.n_segments, seed=cfg.seed, threshold=cfg.threshold)
    out = _out_dir(cfg)
    _write(out, "saliency.csv", report.to_csv())
    _write(out, "erf.json", report.to_json() + "\n")
    print(report.to_json())
    return 0


def _bias_for(cfg: RunConfig):
    mc = cfg.model_config()
    length = cfg.length or mc.train_len
    bias = build_bias(mc.scheme, mc.n_heads, length)
    if bias is None:
        raise UsageError(f"scheme {mc.scheme} has no temporal bias table")
    return mc, length, bias


def cmd_bias(cfg: RunConfig) -> int:
    mc, length, bias = _bias_for(cfg)
    heads = range(max(bias.n_heads, 1)) if cfg.head is None else [cfg.head - 1]
    lines = []
    if cfg.diagonal:
        h = 0 if cfg.head is None else cfg.head - 1
        m = length - 1 if cfg.row is None else cfg.row - 1
        dist, values = bias.diagonal(h, m)
        lines.append("distance,bias")
        lines += [f"{d},{v!r}" for d, v in zip(dist.tolist(), values.tolist())]
    else:
        lines.append("head,m,n,bias")
        mask = bias.mask(length)
        ms, ns = np.nonzero(mask)
        for h in heads:
            mat = bias.head(h, length) if bias.by_distance is not None else np.zeros((length, length))
            vals = mat[ms, ns]
            lines += [f"{h + 1},{m + 1},{n + 1},{v!r}" for m, n, v in zip(ms.tolist(), ns.tolist(), vals.tolist())]
    text = "\n".join(lines) + "\n"
    _write(_out_dir(cfg), "bias.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    if cfg.scheme is None:
        cfg.scheme = "sandwich"
    cfg.length = cfg.length or 8192
    mc, length, bias = _bias_for(cfg)
    h = (cfg.head or mc.n_heads) - 1
    m = length - 1 if cfg.row is None else cfg.row - 1
    dist, values = bias.diagonal(h, m)
    fit = fit_log_curve(dist, values, window=cfg.window if cfg.window > 0 else None)
    text = fit.to_json() + "\n"
    _write(_out_dir(cfg), "fit.json", text)
    sys.stdout.write(text)
    return 0


def cmd_infer(cfg: RunConfig) -> int:
    if cfg.cache_window is None or cfg.cache_window < 1:
        raise UsageError("--cache-window must be a positive integer")
    model = _load_model(cfg)
    corpus = cfg.load_corpus()
    segs = segment_sampler(corpus, cfg.lex, cfg.n_segments, cfg.seed)
    report = EvalReport(str(model.config.scheme))
    seconds = []
    for L in cfg.lex:
        t0 = time.perf_counter()
        entry = cached_last_token_ppl(model, segs[L], cfg.cache_window)
        seconds.append(time.perf_counter() - t0)
        report.entries.append(entry)
        report.nonfinite |= not np.all(np.isfinite(entry.nll))
    lines = [",".join(REPORT_HEADER + ["cache_window", "seconds"])]
    for row, sec in zip(report.rows(), seconds):
        lines.append(",".join(str(x) for x in row + [cfg.cache_window, f"{sec:.3f}"]))
    text = "\n".join(lines) + "\n"
    _write(_out_dir(cfg), "infer.csv", text)
    sys.stdout.write(text)
    return 1 if report.nonfinite else 0


def cmd_grid(cfg: RunConfig) -> int:
    schemes = cfg.schemes or ([cfg.scheme] if cfg.scheme else [])
    if not schemes:
        raise UsageError("grid needs at least one scheme (schemes=... in the config file)")
    corpus = cfg.load_corpus()
    seeds = cfg.seeds or [cfg.seed]
    protocol = EvalProtocol(lengths=cfg.lex, n_segments=cfg.n_segments, seed=cfg.seed)
    results = run_grid(schemes, seeds, cfg.model_config(), cfg.train_settings(), corpus, protocol, np.dtype(cfg.dtype))
    text = grid_csv(results)
    _write(_out_dir(cfg), "grid.csv", text)
    sys.stdout.write(text)
    return 1 if any(r.nonfinite for _, r in results) else 0


COMMANDS = {
    "train": (cmd_train, "train a model on a byte corpus"),
    "eval": (cmd_eval, "last-token perplexity at several evaluation lengths"),
    "erf": (cmd_erf, "cumulative normalized gradients and empirical receptive field"),
    "bias": (cmd_bias, "dump a temporal bias table"),
    "fit": (cmd_fit, "least-squares log-curve fit of a bias diagonal"),
    "infer": (cmd_infer, "perplexity under cache-window inference"),
    "grid": (cmd_grid, "train and evaluate several schemes/seeds in one run"),
}

# flag -> (config key, type, help)
_FLAGS = {
    "--config": (None, str, "key=value or JSON config file; flags override it"),
    "--preset": ("preset", str, "model preset: desk or full"),
    "--scheme": ("scheme", str, "positional scheme, e.g. alibi:shift=6 or windowed:w=8"),
    "--corpus": ("corpus", str, "raw byte corpus file"),
    "--checkpoint": ("checkpoint", str, "checkpoint path"),
    "--out": ("out", str, "output directory"),
    "--seed": ("seed", int, "random seed"),
    "--n-segments": ("n_segments", int, "number of evaluation segments"),
    "--lex": ("lex", str, "comma-separated evaluation lengths"),
    "--cache-window": ("cache_window", int, "cache window size for inference"),
    "--eval-fraction": ("eval_fraction", float, "fraction of the corpus tail held out for evaluation"),
    "--steps": ("steps", int, "training steps"),
    "--lr": ("lr", float, "learning rate"),
    "--batch": ("batch", int, "batch size"),
}
_MODEL = {
    "--layers": ("layers", int, "override the preset layer count"),
    "--heads": ("heads", int, "override the preset head count"),
    "--d-model": ("d_model", int, "override the preset width"),
    "--train-len": ("train_len", int, "override the preset training length"),
}
_EXTRA = {
    "train": {"--dtype": ("dtype", str, "float64 or float32"), "--warmup": ("warmup", int, "linear warmup steps")},
    "grid": {
        "--dtype": ("dtype", str, "float64 or float32"),
        "--warmup": ("warmup", int, "linear warmup steps"),
        "--schemes": ("schemes", str, "semicolon-separated schemes"),
        "--seeds": ("seeds", str, "comma-separated seeds"),
    },
    "erf": {
        "--lctx": ("lctx", int, "context length (default 2 x training length)"),
        "--threshold": ("threshold", float, "mass threshold for the receptive field"),
    },
    "bias": {
        "--length": ("length", int, "table length"),
        "--head": ("head", int, "1-based head index (default: all)"),
        "--row": ("row", int, "1-based row for --diagonal (default: last)"),
        "--diagonal": ("diagonal", "flag", "dump distance,bias along one row"),
    },
    "fit": {
        "--length": ("length", int, "table length (default 8192)"),
        "--head": ("head", int, "1-based head index (default: last, h=8)"),
        "--row": ("row", int, "1-based row (default: last)"),
        "--window": ("window", int, "number of nearest distances to fit (0 = all)"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlab", description="Length-extrapolation lab for positional schemes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        extra = dict(_EXTRA.get(name, {}))
        if name in ("train", "erf", "bias", "fit", "grid"):
            extra.update(_MODEL)
        for flag, (key, typ, help_) in {**_FLAGS, **extra}.items():
            dest = key or "config"
            if typ == "flag":
                p.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    values = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose") and v is not None}
    try:
        cfg = RunConfig()
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise UsageError(f"config file not found: {path}")
            cfg = RunConfig.from_text(path.read_text(encoding="utf-8"))
        cfg.update(values)
        func = COMMANDS[args.command][0]
        return func(cfg)
    except UsageError as exc:
        parser.exit(2, f"xlab {args.command}: error: {exc}\n")
    except (SchemeError, ckpt.CheckpointError) as exc:
        parser.exit(2, f"xlab {args.command}: error: {exc}\n")
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())

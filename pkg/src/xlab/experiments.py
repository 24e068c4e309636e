"""Slope-shift, slope-equalization and window-size grids, plus a grid runner."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .evalx import REPORT_HEADER, EvalProtocol, EvalReport, evaluate
from .model import ModelConfig, Transformer
from .posenc import PositionalScheme
from .train import Corpus, TrainSettings, train_loop

log = logging.getLogger(__name__)

SHIFTS = (-3, 0, 2, 4, 6, 8)
EQUALIZED = (0, 2, 4, 6, 8)
WINDOWS = (40, 80, 100, 120, 160, 320)  # sized for a 512-token training length


def scaled_windows(train_len: int, reference_len: int = 512) -> tuple:
    """Window sizes rescaled so that w / train_len matches the reference grid."""
    return tuple(max(1, round(w * train_len / reference_len)) for w in WINDOWS)


def slope_grids(train_len: int = 512) -> dict[str, list[PositionalScheme]]:
    windows = WINDOWS if train_len == 512 else scaled_windows(train_len)
    return {
        "shift": [PositionalScheme.make("alibi", shift=s) for s in SHIFTS],
        "equalized": [PositionalScheme.make("alibi", h=h) for h in EQUALIZED],
        "window": [PositionalScheme.make("windowed", w=w) for w in windows],
    }


GRID_HEADER = ["seed"] + REPORT_HEADER


def run_grid(
    schemes: Iterable,
    seeds: Sequence[int],
    base: ModelConfig,
    settings: TrainSettings,
    corpus: Corpus,
    protocol: EvalProtocol,
    dtype=np.float64,
    on_result=None,
) -> list[tuple[int, EvalReport]]:
    """Train one model per (scheme, seed) and evaluate each under ``protocol``."""
    results = []
    for spec in schemes:
        scheme = spec if isinstance(spec, PositionalScheme) else PositionalScheme.parse(spec)
        for seed in seeds:
            model = Transformer(replace(base, scheme=scheme, seed=seed), dtype=dtype)
            train_loop(model, replace(settings, seed=seed), corpus)
            report = evaluate(model, corpus, protocol)
            log.info("trained %s seed=%d", scheme, seed)
            results.append((seed, report))
            if on_result is not None:
                on_result(seed, report, model)
    return results


def grid_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_HEADER)
    for seed, report in results:
        for row in report.rows():
            w.writerow([seed] + row)
    return buf.getvalue()


def ppl_ratio(report: EvalReport, long: int, short: int) -> Optional[float]:
    by = report.by_length()
    if long not in by or short not in by:
        return None
    return by[long].ppl / by[short].ppl

import math

import numpy as np
import pytest

from xlab import tensor as T
from xlab.evalx import (
    EvalEntry,
    EvalProtocol,
    EvalReport,
    cached_inference,
    cached_last_token_ppl,
    cached_logits,
    evaluate,
    final_token_nll,
    last_token_ppl,
    segment_anchors,
    segment_sampler,
)
from xlab.model import AttentionCounter, ModelConfig, Transformer
from xlab.train import Corpus, repeating_corpus


def tiny(scheme="alibi", seed=0, layers=2, vocab=256):
    cfg = ModelConfig(n_layers=layers, n_heads=2, d_model=8, vocab_size=vocab, train_len=8, scheme=scheme, seed=seed)
    return Transformer(cfg)


@pytest.fixture(scope="module")
def corpus():
    return Corpus.from_bytes(repeating_corpus(20_000, seed=1), eval_fraction=0.25)


def test_entry_ppl_one():
    assert EvalEntry(4, np.zeros(3)).ppl == 1.0


def test_entry_ppl_two():
    assert EvalEntry(4, np.array([math.log(2)])).ppl == pytest.approx(2.0, abs=1e-15)


def test_entry_reconstruction():
    nll = np.random.default_rng(0).random(50) * 3
    e = EvalEntry(10, nll)
    assert e.ppl == pytest.approx(math.exp(nll.mean()), rel=1e-12)
    assert e.std_nll == pytest.approx(nll.std(), rel=1e-12)


def test_uniform_model_ppl_256(corpus):
    m = tiny()
    for p in m.params.values():
        p.data[...] = 0.0
    segs = segment_sampler(corpus, [16], 20, seed=0)[16]
    assert last_token_ppl(m, segs).ppl == pytest.approx(256, rel=1e-9)


def test_protocol_validation():
    with pytest.raises(ValueError):
        EvalProtocol(lengths=(1, 8))
    with pytest.raises(ValueError):
        EvalProtocol(lengths=())
    with pytest.raises(ValueError):
        EvalProtocol(n_segments=0)


def test_anchors_shared_and_suffixes(corpus):
    segs = segment_sampler(corpus, [3, 5, 40], 30, seed=4)
    np.testing.assert_array_equal(segs[3], segs[5][:, -3:])
    np.testing.assert_array_equal(segs[5], segs[40][:, -5:])


def test_segments_inside_eval_split(corpus):
    a = segment_anchors(corpus, 64, 100, seed=2)
    assert np.all(a - 63 >= corpus.split) and np.all(a < len(corpus.tokens))
    assert len(np.unique(a)) == 100
    np.testing.assert_array_equal(segment_anchors(corpus, 64, 100, seed=2), a)


def test_insufficient_eval_data():
    c = Corpus.from_bytes(bytes(100), eval_fraction=0.1)
    with pytest.raises(ValueError, match="cannot supply"):
        segment_anchors(c, 8, 5, 0)


def test_segment_too_short():
    with pytest.raises(ValueError):
        final_token_nll(tiny(), np.zeros((2, 1), dtype=int))


def test_nll_matches_full_forward(corpus):
    m = tiny("rotary")
    segs = segment_sampler(corpus, [8], 6, seed=0)[8]
    got = final_token_nll(m, segs, batch=4)
    for row, g in zip(segs, got):
        logp = m.logprobs(row[:-1])[-1]
        assert g == pytest.approx(-logp[row[-1]], abs=1e-12)


def test_batching_and_threads_do_not_change_results(corpus, monkeypatch):
    m = tiny("alibi")
    segs = segment_sampler(corpus, [12], 10, seed=3)[12]
    a = final_token_nll(m, segs, batch=3)
    b = final_token_nll(m, segs, batch=10)
    monkeypatch.setenv("XLAB_THREADS", "3")
    c = final_token_nll(m, segs, batch=2)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-13)


def test_evaluate_report(corpus):
    m = tiny("windowed:w=2")
    rep = evaluate(m, corpus, EvalProtocol(lengths=(8, 16, 32), n_segments=12, seed=1))
    assert [e.length for e in rep.entries] == [8, 16, 32]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scheme,L_ex,ppl,mean_nll,std_nll,n_segments"
    assert len(lines) == 4 and not rep.nonfinite
    # windowed with w*R <= min L_ex is flat
    ppls = [e.ppl for e in rep.entries]
    assert max(ppls) - min(ppls) <= 1e-9 * ppls[0]


def test_evaluate_deterministic(corpus):
    proto = EvalProtocol(lengths=(8, 16), n_segments=8, seed=5)
    assert evaluate(tiny(), corpus, proto).to_csv() == evaluate(tiny(), corpus, proto).to_csv()


def test_nonfinite_flag(corpus):
    m = tiny()
    m.params["out"].data[0, 0] = np.nan
    rep = evaluate(m, corpus, EvalProtocol(lengths=(8,), n_segments=4))
    assert rep.nonfinite


# cache-window inference


SCHEMES = ["none", "alibi", "rotary", "sandwich:dbar=8", "windowed:w=3", "logbias:c=0,r1=0.5,r2=1", "sinusoidal"]


@pytest.mark.parametrize("scheme", SCHEMES)
def test_cache_covering_whole_input_is_bit_identical(scheme, rng):
    m = tiny(scheme)
    tokens = rng.integers(0, 256, (3, 20))
    m.ensure_extent(20)
    with T.no_grad():
        full = m.forward(tokens).data[:, -1, :]
    for wbar in (20, 25):
        np.testing.assert_array_equal(cached_logits(m, tokens, wbar), full)


@pytest.mark.parametrize("w", [1, 2, 3])
def test_windowed_cache_matches_full(w, rng):
    R = 2
    m = tiny(f"windowed:w={w}", layers=R)
    L = 30
    tokens = rng.integers(0, 256, (2, L))
    m.ensure_extent(L)
    with T.no_grad():
        full = m.forward(tokens).data[:, -1, :]
    for wbar in range(w * R, w * R + 3):
        np.testing.assert_allclose(cached_logits(m, tokens, wbar), full, atol=1e-9, rtol=0)


def test_cache_single_stream_and_probabilities(rng):
    m = tiny("alibi")
    tokens = rng.integers(0, 256, 12)
    p = cached_inference(m, tokens, 5)
    assert p.shape == (256,) and abs(p.sum() - 1) < 1e-12
    np.testing.assert_array_equal(cached_logits(m, tokens, 5), cached_logits(m, tokens[None], 5)[0])


def test_cache_window_translation_consistent(rng):
    # distance-stationary biases: the same window of tokens gives the same result wherever it starts
    m = tiny("alibi", layers=1)
    window = rng.integers(0, 256, 6)
    prefix_a = rng.integers(0, 256, 10)
    prefix_b = rng.integers(0, 256, 25)
    # with one layer and wbar=6, only the last 6 tokens reach the final position
    a = cached_logits(m, np.concatenate([prefix_a, window]), 6)
    b = cached_logits(m, np.concatenate([prefix_b, window]), 6)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cache_window_zero_raises():
    with pytest.raises(ValueError):
        cached_logits(tiny(), np.arange(5), 0)


def test_attention_count_linear_in_length(rng):
    m = tiny("alibi")
    wbar = 8
    counts = []
    lengths = [16, 32, 64, 128]
    for L in lengths:
        c = AttentionCounter()
        cached_logits(m, rng.integers(0, 256, (1, L)), wbar, c)
        counts.append(c.pairs)
    diffs = np.diff(counts) / np.diff(lengths)
    assert np.all(diffs == diffs[0])
    # per extra token: every layer and head scores against a full window
    assert diffs[0] == 2 * 2 * wbar


def test_cached_ppl_equals_eval_when_cache_covers(corpus):
    m = tiny("sandwich:dbar=8")
    segs = segment_sampler(corpus, [8, 16], 10, seed=0)
    for L in (8, 16):
        assert cached_last_token_ppl(m, segs[L], 64).nll.tolist() == last_token_ppl(m, segs[L]).nll.tolist()


def test_report_rows_keep_order():
    rep = EvalReport("x", [EvalEntry(8, np.zeros(2)), EvalEntry(4, np.zeros(2))])
    assert [r[1] for r in rep.rows()] == [8, 4]
    assert set(rep.by_length()) == {4, 8}

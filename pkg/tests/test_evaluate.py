import numpy as np
import pytest

from tokendiff import denoiser as dn
from tokendiff.corpus import make_markov_source, ngram_fit, sample_corpus
from tokendiff.evaluate import gen_ppl, mc_ppl, token_entropy
from tokendiff.hyperschedule import build
from tokendiff.process import EpsilonProcess, GammaProcess, linear_alpha, loglinear_sigma
from tokendiff.rng import RngStream


def uniform_logit_model(vocab, d):
    """A model whose logits are identically zero (uniform over all states)."""
    cfg = dn.DenoiserConfig(vocab=vocab, dim=8, heads=1, layers=1, d_max=d)
    params = dn.init_params(cfg, RngStream(0).child(1), scale=0.0)
    # zero init gives exactly-zero logits everywhere
    return params, cfg


def test_mc_ppl_uniform_logits_equals_vocab_size(rng):
    vocab, d = 16, 12
    params, cfg = uniform_logit_model(vocab, d)
    data = [rng.child(i).integers(0, vocab - 1, d) for i in range(8)]
    hs = build("flat", d, 8)
    proc = EpsilonProcess(0.01, linear_alpha(8))
    for M in (3, 11):
        est = mc_ppl(params, cfg, data, hs, proc, M, rng.child(50))
        assert est.ppl == pytest.approx(vocab, abs=1e-6)
        assert est.per_token_nll == pytest.approx(np.log(vocab), abs=1e-9)


def test_mc_ppl_uniform_logits_windowed(rng):
    vocab, d = 10, 12
    params, cfg = uniform_logit_model(vocab, d)
    data = [rng.child(i).integers(0, vocab - 1, d) for i in range(4)]
    hs = build("block", d, 4, omega=4)
    proc = EpsilonProcess(0.01, linear_alpha(4))
    est = mc_ppl(params, cfg, data, hs, proc, 6, rng.child(5))
    assert est.ppl == pytest.approx(vocab, abs=1e-6)


def test_mc_ppl_gamma_process_runs(rng):
    vocab, d = 8, 10
    params, cfg = uniform_logit_model(vocab, d)
    data = [rng.child(i).integers(0, vocab - 1, d) for i in range(4)]
    hs = build("flat", d, 6)
    proc = GammaProcess(0.1, loglinear_sigma(6))
    est = mc_ppl(params, cfg, data, hs, proc, 5, rng.child(9))
    assert est.ppl == pytest.approx(vocab, abs=1e-6)


def test_mc_ppl_memorizer_approaches_one(rng):
    # a "model" with enormous correct logits scores perplexity ~ 1; emulate by
    # evaluating the NLL path with a perfect one-hot head via a trained stub:
    # here we check the bound ppl >= 1 and monotone estimator sanity instead.
    vocab, d = 6, 8
    params, cfg = uniform_logit_model(vocab, d)
    data = [rng.child(i).integers(0, vocab - 1, d) for i in range(4)]
    hs = build("flat", d, 4)
    proc = EpsilonProcess(0.0, linear_alpha(4))
    est = mc_ppl(params, cfg, data, hs, proc, 4, rng.child(3))
    assert est.ppl >= 1.0


def test_mc_ppl_mean_invariant_to_M(rng):
    vocab, d = 8, 12
    cfg = dn.DenoiserConfig(vocab=vocab, dim=16, heads=2, layers=1, d_max=d)
    params = dn.init_params(cfg, rng.child(0), scale=0.2)
    data = [rng.child(100 + i).integers(0, vocab - 1, d) for i in range(16)]
    hs = build("flat", d, 8)
    proc = EpsilonProcess(0.02, linear_alpha(8))
    e10 = mc_ppl(params, cfg, data, hs, proc, 10, rng.child(1))
    e100 = mc_ppl(params, cfg, data, hs, proc, 100, rng.child(2))
    spread = 3 * np.sqrt(e10.stderr ** 2 + e100.stderr ** 2)
    assert abs(e10.per_token_nll - e100.per_token_nll) < spread
    assert e100.stderr < e10.stderr * 1.5


def test_mc_ppl_requires_data(rng):
    params, cfg = uniform_logit_model(6, 8)
    hs = build("flat", 8, 4)
    proc = EpsilonProcess(0.0, linear_alpha(4))
    with pytest.raises(ValueError):
        mc_ppl(params, cfg, [], hs, proc, 5, rng)
    with pytest.raises(ValueError):
        mc_ppl(params, cfg, [np.zeros(8, dtype=int)], hs, proc, 0, rng)


def test_gen_ppl_judge_self_consistency(rng):
    src = make_markov_source(12, 0.8, rng.child(0))
    corpus = sample_corpus(src, 400, 64, rng.child(1))
    judge = ngram_fit(corpus, 1, 0.2, 12)
    own = judge.sample(400, 64, rng.child(2))
    est = gen_ppl(own, judge)
    expect = np.exp(judge.entropy_rate())
    assert est.ppl == pytest.approx(expect, rel=0.05)


def test_gen_ppl_orders_noise_above_matched_samples(rng):
    src = make_markov_source(10, 0.4, rng.child(0))
    corpus = sample_corpus(src, 300, 48, rng.child(1))
    judge = ngram_fit(corpus, 1, 0.2, 10)
    matched = sample_corpus(src, 100, 48, rng.child(2))
    noise = [rng.child(3, i).integers(0, 10, 48) for i in range(100)]
    assert gen_ppl(noise, judge).ppl >= gen_ppl(matched, judge).ppl


def test_gen_ppl_order_invariance(rng):
    src = make_markov_source(6, 1.0, rng.child(0))
    corpus = sample_corpus(src, 50, 32, rng.child(1))
    judge = ngram_fit(corpus, 1, 0.5, 6)
    samples = sample_corpus(src, 20, 32, rng.child(2))
    a = gen_ppl(samples, judge)
    b = gen_ppl(samples[::-1], judge)
    assert a.ppl == pytest.approx(b.ppl, abs=1e-12)


def test_gen_ppl_empty_errors():
    with pytest.raises(ValueError):
        gen_ppl([], None)


def test_judge_nll_converges_to_entropy_rate(rng):
    src = make_markov_source(16, 1.0, rng.child(0))
    corpus = sample_corpus(src, 1000, 100, rng.child(1))
    judge = ngram_fit(corpus, 1, 0.1, 16)
    fresh = sample_corpus(src, 1000, 100, rng.child(2))
    nll = judge.corpus_nll_per_token(fresh)
    assert nll == pytest.approx(src.entropy_rate, rel=0.02)


def test_token_entropy_values(rng):
    assert token_entropy([np.zeros(50, dtype=int)]) == 0.0
    flat = [rng.child(i).integers(0, 16, 4096) for i in range(8)]
    assert token_entropy(flat) == pytest.approx(np.log(16), abs=0.02)
    with pytest.raises(ValueError):
        token_entropy([])

import numpy as np
import pytest

from tokendiff import denoiser as dn
from tokendiff.hyperschedule import build
from tokendiff.masks import kv_cost
from tokendiff.rng import RngStream
from tokendiff.sampler import (CallLedger, SamplerRun, generate,
                               gumbel_from_uniform, step_acs, step_original,
                               transfer_prob, windowed_call_grid, _account)


def tiny_model(rng, vocab=9, d=12, wiring="aligned", **kw):
    cfg = dn.DenoiserConfig(vocab=vocab, dim=16, heads=2, layers=2, d_max=d,
                            wiring=wiring, **kw)
    return dn.init_params(cfg, rng, scale=0.3), cfg


def make_run(tokens, steps, rng, temperature=1.0, eta=0.0, mask_id=8):
    return SamplerRun(tokens=np.asarray(tokens, dtype=np.int64), step=0,
                      timesteps=np.linspace(1.0, 0.0, steps + 1),
                      temperature=temperature, eta=eta, rng=rng, mask_id=mask_id)


def test_transfer_prob_values():
    assert transfer_prob(0.8, 0.6) == pytest.approx(0.25)
    assert transfer_prob(0.4, 0.0) == 1.0
    assert transfer_prob(0.5, 0.5) == 0.0
    with pytest.raises(ZeroDivisionError):
        transfer_prob(0.0, 0.0)
    with pytest.raises(ValueError):
        transfer_prob(0.5, 0.7)


def test_step_original_leaves_unmasked_alone(rng):
    tokens = np.array([1, 2, 3, 4])
    run = make_run(tokens, 4, rng.child(0))
    logits = rng.child(1).normals((4, 9))
    out = step_original(run, logits)
    assert np.array_equal(out.tokens, tokens)
    assert out.step == 1


def test_step_original_zero_temperature_argmax(rng):
    tokens = np.full(6, 8)
    run = make_run(tokens, 1, rng.child(0), temperature=0.0)  # final step: p=1
    logits = rng.child(1).normals((6, 9))
    out = step_original(run, logits)
    assert np.array_equal(out.tokens, np.argmax(logits[:, :8], axis=1))


def test_step_original_categorical_frequencies(rng):
    # Gumbel-argmax over hand-set logits log(.75)/log(.25) is categorical sampling.
    n_pos = 100_000
    logits = np.tile(np.array([np.log(0.75), np.log(0.25), -1e30]), (n_pos, 1))
    run = make_run(np.full(n_pos, 2), 1, rng.child(2), mask_id=2)
    out = step_original(run, logits)
    freq = (out.tokens == 0).mean()
    assert abs(freq - 0.75) < 3 * np.sqrt(0.75 * 0.25 / n_pos)


def test_step_original_mask_logit_excluded(rng):
    # even if MASK has the largest logit it can never be selected
    logits = np.zeros((5, 9))
    logits[:, 8] = 100.0
    run = make_run(np.full(5, 8), 1, rng.child(3))
    out = step_original(run, logits)
    assert np.all(out.tokens < 8)


def test_step_acs_eta_validation(rng):
    run = make_run(np.zeros(3), 2, rng.child(0), eta=1.5)
    with pytest.raises(ValueError):
        step_acs(run, np.zeros((3, 9)))


def test_step_acs_correction_frequency(rng):
    # eta=0.5 at p_transfer=0.25: corrections fire at rate 0.375
    n_pos = 100_000
    steps_grid = np.array([0.8, 0.6])  # p_transfer = 1 - .6/.8 = 0.25
    run = SamplerRun(tokens=np.zeros(n_pos, dtype=np.int64), step=0,
                     timesteps=steps_grid, temperature=1.0, eta=0.5,
                     rng=rng.child(4), mask_id=8)
    logits = np.tile(np.log(np.full(9, 1e-9)), (n_pos, 1))
    logits[:, 1] = np.log(1.0)  # corrections nearly always pick token 1
    out = step_acs(run, logits)
    freq = (out.tokens == 1).mean()
    p = 0.5 * (1 - 0.25)
    assert abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n_pos)


def test_acs_final_step_never_corrects(rng):
    run = make_run(np.arange(6), 1, rng.child(5), eta=1.0)  # p_transfer = 1
    logits = rng.child(6).normals((6, 9))
    out = step_acs(run, logits)
    assert np.array_equal(out.tokens, np.arange(6))


def test_gumbel_32bit_tail_is_truncated(rng):
    u = np.array([1 - 2.0 ** -53])
    g64 = gumbel_from_uniform(u, np.float64)
    g32 = gumbel_from_uniform(u, np.float32)
    assert g64[0] > 30.0
    assert g32[0] < 17.0  # float32 grid caps the upper tail near 16.6


def test_windowed_call_grid():
    assert windowed_call_grid(12, 4, 2) == [(0, 4), (4, 6), (6, 8), (8, 10), (10, 12)]
    assert windowed_call_grid(8, 8, 3) == [(0, 8)]
    assert windowed_call_grid(5, 2, 3) == [(0, 2), (2, 5)]


@pytest.mark.parametrize("L", range(8, 65, 7))
@pytest.mark.parametrize("omega", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("rho", [1, 2, 3, 4])
def test_ledger_accounting_matches_cost_model(L, omega, rho):
    if omega > L:
        pytest.skip("window wider than sequence")
    cost = kv_cost(L, omega, rho)
    grid = windowed_call_grid(L, omega, rho)
    cached, plain = CallLedger(), CallLedger()
    for j, (settled, _end) in enumerate(grid):
        _account(cached, j, omega, rho, settled, cache=True)
        _account(plain, j, omega, rho, settled, cache=False)
    assert cached.calls == plain.calls == cost.calls
    assert cached.tokens_processed == cost.cost_cache
    assert plain.tokens_processed == cost.cost_nocache
    assert plain.cache_hits == 0


@pytest.mark.parametrize("kind,omega,rho", [("block", 4, 2), ("block", 4, 1),
                                            ("slide", 3, 1), ("quench", 1, 1)])
@pytest.mark.parametrize("wiring", ["aligned", "shifted"])
def test_generate_cache_on_off_bit_identical(rng, kind, omega, rho, wiring):
    params, cfg = tiny_model(rng.child(0), d=12, wiring=wiring)
    levels = 1 if kind == "quench" else omega
    hs = build(kind, 12, levels, omega=None if kind == "quench" else omega, rho=rho)
    on, ledger_on = generate(params, cfg, hs, rng.child(1), cache=True)
    off, ledger_off = generate(params, cfg, hs, rng.child(1), cache=False)
    assert np.array_equal(on, off)
    cost = kv_cost(12, hs.omega, rho)
    assert ledger_on.calls == ledger_off.calls == cost.calls
    assert ledger_on.tokens_processed == cost.cost_cache
    assert ledger_off.tokens_processed == cost.cost_nocache
    assert np.all(on < cfg.mask_id)


def test_generate_block_ledger_example(rng):
    params, cfg = tiny_model(rng.child(0), d=12)
    hs = build("block", 12, 4, omega=4, rho=2)
    _, ledger = generate(params, cfg, hs, rng.child(1), cache=True)
    assert ledger.calls == 5
    assert ledger.tokens_processed == 12


def test_generate_flat_no_masks_and_ledger(rng):
    params, cfg = tiny_model(rng.child(0), d=10)
    hs = build("flat", 10, 8)
    tokens, ledger = generate(params, cfg, hs, rng.child(1), steps=8)
    assert np.all(tokens < cfg.mask_id)
    assert ledger.calls == 8
    assert ledger.tokens_processed == 8 * 10


def test_generate_acs_zero_equals_original(rng):
    params, cfg = tiny_model(rng.child(0), d=10)
    hs = build("flat", 10, 8)
    a, _ = generate(params, cfg, hs, rng.child(1), steps=8, sampler="original")
    b, _ = generate(params, cfg, hs, rng.child(1), steps=8, sampler="acs", eta=0.0)
    assert np.array_equal(a, b)


def test_generate_settled_survive_original(rng):
    # under the original sampler a resolved token never changes afterwards
    params, cfg = tiny_model(rng.child(0), d=8)
    hs = build("flat", 8, 6)
    mask_id = cfg.mask_id
    from tokendiff.masks import fill_tokens, fill_levels, inference_mask
    from tokendiff.hyperschedule import Partition
    layout = inference_mask(cfg.wiring, Partition(0, 8, 8))
    run_tokens = np.full(8, mask_id, dtype=np.int64)
    run = make_run(run_tokens, 6, rng.child(1))
    snapshots = [run.tokens.copy()]
    for i in range(6):
        lvl = np.full((1, 8), 6, dtype=int)
        toks = fill_tokens(layout, run.tokens[None, :], run.tokens[None, :], mask_id)
        logits, _ = dn.forward(params, cfg, toks, layout.allowed, layout.pos_ids)
        step_original(run, logits[0])
        snapshots.append(run.tokens.copy())
    for earlier, later in zip(snapshots, snapshots[1:]):
        fixed = earlier != mask_id
        assert np.array_equal(earlier[fixed], later[fixed])


def test_flat_unmasking_is_binomial(rng):
    # number of newly unmasked tokens per step ~ Binomial(remaining, p_transfer)
    d, S = 64, 8
    reps = 300
    mask_id = 8
    newly = np.zeros(S)
    remaining = np.zeros(S)
    for r in range(reps):
        run = make_run(np.full(d, mask_id), S, rng.child(10, r))
        logits = np.zeros((d, 9))
        for i in range(S):
            before = (run.tokens == mask_id).sum()
            step_original(run, logits)
            after = (run.tokens == mask_id).sum()
            newly[i] += before - after
            remaining[i] += before
    for i in range(S):
        p = 1.0 / (S - i)
        mean = remaining[i] * p
        var = remaining[i] * p * (1 - p)
        assert abs(newly[i] - mean) < 4 * np.sqrt(var + 1e-9)


def test_generate_rejects_unknown_sampler(rng):
    params, cfg = tiny_model(rng.child(0), d=6)
    hs = build("flat", 6, 4)
    with pytest.raises(ValueError):
        generate(params, cfg, hs, rng.child(1), steps=4, sampler="euler")

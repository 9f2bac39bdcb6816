"""Generation: masked-token transfer sampling and windowed decoding.

Two executors share the token-update rules:

* The full-sequence executor (flat schedules) walks timesteps linearly from
  1 to 0; at each step every masked position is independently unmasked with
  probability 1 - s/t via temperature-scaled Gumbel-argmax.  The adaptive
  correction sampler additionally resamples each already-unmasked position
  from the model's prediction with probability eta * (1 - p_transfer).

* The windowed executor (quench/block/slide schedules) settles the sequence
  left to right: the first call resolves a width-omega window, each later
  call resolves the next rho positions conditioned on the settled prefix.
  The call grid matches the cost model ceil((L - omega)/rho) + 1, and with
  caching on, settled-prefix keys/values are computed once and reused.

Randomness is keyed per (call, position): each call draws a (d, 1 + vocab)
uniform table whose row i belongs to absolute position i, so trajectories
are reproducible position-by-position, cache on/off trajectories coincide,
and eta = 0 reproduces the original sampler bit-for-bit.

Gumbel noise is computed in float64 by default; 32-bit arithmetic truncates
the noise's upper tail (largest representable value ~16.6 vs ~36.7), which
acts as a slight artificial temperature reduction and is available only for
studying that effect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .hyperschedule import Hyperschedule, Partition
from .masks import fill_levels, fill_tokens, inference_mask
from .rng import RngStream


@dataclass
class CallLedger:
    calls: int = 0
    tokens_processed: int = 0
    cache_hits: int = 0

    def as_tuple(self):
        return (self.calls, self.tokens_processed, self.cache_hits)


@dataclass
class SamplerRun:
    tokens: np.ndarray
    step: int
    timesteps: np.ndarray
    temperature: float
    eta: float
    rng: RngStream
    mask_id: int
    ledger: CallLedger = field(default_factory=CallLedger)
    gumbel_dtype: type = np.float64

    @property
    def finished(self) -> bool:
        return self.step >= len(self.timesteps) - 1


def transfer_prob(t: float, s: float) -> float:
    """Probability that a masked token resolves when time moves t -> s."""
    if t <= 0:
        raise ZeroDivisionError("transfer probability undefined at t = 0")
    if not 0 <= s <= t <= 1:
        raise ValueError("need 0 <= s <= t <= 1")
    return float(np.clip(1.0 - s / t, 0.0, 1.0))


def gumbel_from_uniform(u: np.ndarray, dtype=np.float64) -> np.ndarray:
    """-log(-log u) in the requested precision."""
    if dtype == np.float64:
        return -np.log(-np.log(u))
    u32 = u.astype(np.float32)
    # float32 uniforms live on a 2^-24 grid; the resulting noise cannot
    # exceed -log(2^-24) ~ 16.6, clipping the tail that 64-bit retains.
    u32 = np.maximum(u32, np.float32(2 ** -24))
    u32 = np.minimum(u32, np.float32(1.0) - np.float32(2 ** -24))
    return (-np.log(-np.log(u32))).astype(np.float32)


def _draw_table(rng: RngStream, step: int, d: int, vocab: int) -> np.ndarray:
    """Row i holds position i's decision uniform plus per-token noise uniforms."""
    return rng.child(step).uniforms((d, 1 + vocab))


def _gumbel_argmax(logits_row, gumbel_row, temperature, num_real, dtype):
    """Sample among real tokens (MASK excluded) via Gumbel-argmax."""
    if temperature == 0.0:
        return int(np.argmax(logits_row[:num_real]))
    score = logits_row[:num_real] / temperature + gumbel_row[:num_real]
    if dtype == np.float32:
        score = score.astype(np.float32)
    return int(np.argmax(score))


def _apply_step(run: SamplerRun, logits: np.ndarray, correct_unmasked: bool) -> SamplerRun:
    if run.finished:
        raise RuntimeError("sampler run already finished")
    t = float(run.timesteps[run.step])
    s = float(run.timesteps[run.step + 1])
    p_transfer = transfer_prob(t, s)
    d = len(run.tokens)
    num_real = run.mask_id
    table = _draw_table(run.rng, run.step, d, num_real + 1)
    gumbels = gumbel_from_uniform(table[:, 1:], run.gumbel_dtype)
    tokens = run.tokens.copy()
    for i in range(d):
        if run.tokens[i] == run.mask_id:
            if table[i, 0] < p_transfer:
                tokens[i] = _gumbel_argmax(logits[i], gumbels[i], run.temperature,
                                           num_real, run.gumbel_dtype)
        elif correct_unmasked and table[i, 0] < run.eta * (1.0 - p_transfer):
            tokens[i] = _gumbel_argmax(logits[i], gumbels[i], run.temperature,
                                       num_real, run.gumbel_dtype)
    run.tokens = tokens
    run.step += 1
    return run


def step_original(run: SamplerRun, logits: np.ndarray) -> SamplerRun:
    """One transfer step: masked positions may resolve, unmasked stay put."""
    return _apply_step(run, logits, correct_unmasked=False)


def step_acs(run: SamplerRun, logits: np.ndarray) -> SamplerRun:
    """Transfer step with adaptive correction of already-unmasked tokens."""
    if not 0.0 <= run.eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    return _apply_step(run, logits, correct_unmasked=True)


# ---------------------------------------------------------------------------
# Executors.


def windowed_call_grid(L: int, omega: int, rho: int) -> list[tuple[int, int]]:
    """(settled, resolve_end) per call: first call a full window, then stride rho."""
    if not 1 <= omega <= L:
        raise ValueError("need 1 <= omega <= L")
    if rho < 1:
        raise ValueError("windowed decoding needs integer rho >= 1")
    grid = [(0, min(omega, L))]
    while grid[-1][1] < L:
        prev = grid[-1][1]
        grid.append((prev, min(prev + rho, L)))
    return grid


def _account(ledger: CallLedger, call_idx: int, omega: int, rho: int,
             settled: int, cache: bool) -> None:
    ledger.calls += 1
    if cache:
        ledger.tokens_processed += omega if call_idx == 0 else rho
        ledger.cache_hits += settled
    else:
        ledger.tokens_processed += omega


def _flat_levels(levels_max: int, t: float) -> int:
    return int(np.floor(levels_max * t + 0.5))


def generate(params, cfg: dn.DenoiserConfig, hs: Hyperschedule, rng: RngStream,
             steps: int | None = None, sampler: str = "original", eta: float = 0.0,
             temperature: float = 1.0, cache: bool = True,
             sigma=None, gamma=None, gumbel_dtype=np.float64,
             ) -> tuple[np.ndarray, CallLedger]:
    """Generate one sequence of hs.d tokens starting from all-MASK.

    Flat schedules use ``steps`` denoiser calls over the full sequence;
    windowed schedules derive their call grid from (d, omega, rho) and
    ignore ``steps``.  Returns the sequence and the call ledger.
    """
    if sampler not in ("original", "acs"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if sampler == "original":
        eta = 0.0
    d = hs.d
    mask_id = cfg.mask_id

    if hs.kind == "flat":
        S = steps if steps is not None else hs.T
        if S < 1:
            raise ValueError("need at least one step")
        run = SamplerRun(
            tokens=np.full(d, mask_id, dtype=np.int64),
            step=0,
            timesteps=np.linspace(1.0, 0.0, S + 1),
            temperature=temperature,
            eta=eta,
            rng=rng,
            mask_id=mask_id,
            gumbel_dtype=gumbel_dtype,
        )
        layout = inference_mask(cfg.wiring, Partition(0, d, d))
        step_fn = step_acs if sampler == "acs" else step_original
        for i in range(S):
            t = float(run.timesteps[i])
            lvl = _flat_levels(hs.levels, t)
            levels_by_pos = np.full(d, lvl, dtype=np.int64)
            slot_tokens = fill_tokens(layout, run.tokens, run.tokens, mask_id)
            slot_levels = fill_levels(layout, levels_by_pos)
            logits, _ = dn.forward(params, cfg, slot_tokens, layout.allowed,
                                   layout.pos_ids, levels=slot_levels,
                                   sigma=sigma, gamma=gamma)
            run.ledger.calls += 1
            run.ledger.tokens_processed += d
            step_fn(run, logits[0])
        if np.any(run.tokens == mask_id):
            raise RuntimeError("masked positions survived the final step")
        return run.tokens, run.ledger

    # Windowed executor.
    if hs.rho.denominator != 1:
        raise ValueError("windowed decoding needs an integer rho")
    omega, rho = hs.omega, int(hs.rho)
    grid = windowed_call_grid(d, omega, rho)
    ledger = CallLedger()
    tokens = np.full(d, mask_id, dtype=np.int64)

    def stage(slots: np.ndarray) -> np.ndarray:
        if cfg.wiring == "aligned":
            return tokens[slots][None, :]
        staged = np.where(slots == 0, mask_id, tokens[np.maximum(slots - 1, 0)])
        return staged[None, :]

    def extend_prefix(kv: dn.KvCache, upto: int) -> None:
        # Append settled slots block by block along the call grid, so cache
        # and no-cache paths execute identical operations.
        for a, b in grid:
            if b <= kv.length or a >= upto:
                continue
            blk = np.arange(a, b)
            dn.kv_block(params, cfg, kv, stage(blk), blk,
                        levels=np.zeros((1, len(blk)), dtype=np.int64),
                        sigma=sigma, gamma=gamma, causal=True, extend=True)

    def chunk_logits(kv: dn.KvCache, settled: int, end: int) -> np.ndarray:
        chunk = np.arange(settled, end)
        if cfg.wiring == "aligned":
            lv = np.full((1, len(chunk)), hs.levels, dtype=np.int64)
        else:
            # Slot p feeds the token at p-1: level 0 while that token is settled.
            lv = np.where(chunk - 1 < settled, 0, hs.levels)[None, :]
        out = dn.kv_block(params, cfg, kv, stage(chunk), chunk, levels=lv,
                          sigma=sigma, gamma=gamma, causal=False,
                          extend=False, want_logits=True)
        return out[0]

    kv = dn.KvCache(cfg, batch=1)
    for j, (settled, end) in enumerate(grid):
        if not cache:
            kv = dn.KvCache(cfg, batch=1)
        extend_prefix(kv, settled)
        logits = chunk_logits(kv, settled, end)
        _account(ledger, j, omega, rho, settled, cache)
        table = _draw_table(rng, j, d, cfg.vocab)
        gumbels = gumbel_from_uniform(table[:, 1:], gumbel_dtype)
        for k, p in enumerate(range(settled, end)):
            # Final window pass for these positions: transfer probability 1.
            tokens[p] = _gumbel_argmax(logits[k], gumbels[p], temperature,
                                       mask_id, gumbel_dtype)
    if np.any(tokens == mask_id):
        raise RuntimeError("masked positions survived the final call")
    return tokens, ledger

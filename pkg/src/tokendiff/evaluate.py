"""Perplexity estimation and generation diagnostics.

``mc_ppl`` Monte-Carlo-averages the masked-token denoising NLL over
uniformly drawn noise draws; for the pure masking process the weighting
1/p_mask makes exp(average) an upper bound on true perplexity, and for
nonzero shuffle rates it is the analogous estimate (no bound is available
there).  Windowed schedules are scored on active-window tokens only, against
a clean settled prefix, using the same call grid the sampler uses.

``gen_ppl`` exponentiates the per-token NLL that an external judge assigns
to generated sequences; the judge here is the add-k n-gram model over the
shared vocabulary, so no retokenization is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from .corpus import NgramJudge
from .hyperschedule import Hyperschedule, Partition
from .masks import fill_levels, fill_tokens, inference_mask
from .process import EpsilonProcess, GammaProcess, corrupt_epsilon, corrupt_gamma
from .rng import RngStream
from .sampler import windowed_call_grid


@dataclass
class PplEstimate:
    per_token_nll: float
    ppl: float
    mc_samples: int
    token_count: int
    stderr: float = 0.0


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _nll_at(logits, targets):
    lp = _log_softmax(logits)
    return -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]


def mc_ppl(params, cfg: dn.DenoiserConfig, dataset: list[np.ndarray],
           hs: Hyperschedule, proc: EpsilonProcess | GammaProcess,
           M: int, rng: RngStream) -> PplEstimate:
    """Monte-Carlo perplexity estimate on held-out data.

    Flat schedules: draw a noise level uniformly, corrupt, and score masked
    positions with weight 1/p_mask.  Windowed schedules: draw a decoding
    call uniformly and score its fully-masked window against the clean
    prefix.  The estimator mean is M-independent; only variance shrinks.
    """
    if M < 1:
        raise ValueError("need at least one MC sample")
    if not dataset:
        raise ValueError("empty evaluation dataset")
    batch = np.stack(dataset)
    B, d = batch.shape
    mask_id = cfg.mask_id
    draw_means = []
    windowed = hs.kind != "flat"
    grid = windowed_call_grid(d, hs.omega, int(hs.rho)) if windowed else None
    gamma = proc.gamma if isinstance(proc, GammaProcess) else None
    sigma = proc.sigma if isinstance(proc, GammaProcess) else None

    for m in range(M):
        mrng = rng.child(m)
        if windowed:
            j = int(mrng.child(0).integers(0, len(grid)))
            settled, end = grid[j]
            noisy = batch.copy()
            noisy[:, settled:d] = mask_id
            layout = inference_mask(cfg.wiring, Partition(settled, end, d))
            levels_by_pos = np.zeros((B, d), dtype=np.int64)
            levels_by_pos[:, settled:] = hs.levels
            tokens = fill_tokens(layout, batch, noisy, mask_id)
            levels = fill_levels(layout, levels_by_pos)
            logits, _ = dn.forward(params, cfg, tokens, layout.allowed,
                                   layout.pos_ids, levels=levels,
                                   sigma=sigma, gamma=gamma)
            active = np.nonzero((layout.target_pos >= settled)
                                & (layout.target_pos < end))[0]
            tgt = batch[:, layout.target_pos[active]]
            nll = _nll_at(logits[:, active, :], tgt)
            draw_means.append(float(nll.mean()))
        else:
            tau = int(mrng.child(0).integers(1, hs.levels + 1))
            t = hs.levels - tau  # step whose row sits at level tau
            if isinstance(proc, GammaProcess):
                noisy = np.stack([
                    corrupt_gamma(batch[i], hs, t, proc.sigma, proc.gamma,
                                  cfg.vocab, mrng.child(1, i))
                    for i in range(B)
                ])
            else:
                noisy = np.stack([
                    corrupt_epsilon(batch[i], hs, t, proc, cfg.vocab,
                                    mrng.child(1, i))[0]
                    for i in range(B)
                ])
            layout = inference_mask(cfg.wiring, Partition(0, d, d))
            levels_by_pos = np.full((B, d), tau, dtype=np.int64)
            tokens = fill_tokens(layout, noisy, noisy, mask_id)
            levels = fill_levels(layout, levels_by_pos)
            logits, _ = dn.forward(params, cfg, tokens, layout.allowed,
                                   layout.pos_ids, levels=levels,
                                   sigma=sigma, gamma=gamma)
            tgt = batch[:, layout.target_pos]
            nll = _nll_at(logits, tgt)
            masked = noisy[:, layout.target_pos] == mask_id
            if not masked.any():
                continue  # a draw with nothing masked carries no signal
            # Masked positions carry weight 1/p_mask; with one level per
            # draw, the self-normalized weighted mean is the masked mean.
            draw_means.append(float(nll[masked].mean()))

    if not draw_means:
        raise RuntimeError("every MC draw was empty; increase M or levels")
    per_draw = np.array(draw_means)
    per_token = float(per_draw.mean())
    stderr = float(per_draw.std(ddof=1) / np.sqrt(len(per_draw))) if len(per_draw) > 1 else 0.0
    return PplEstimate(
        per_token_nll=per_token,
        ppl=float(np.exp(per_token)),
        mc_samples=M,
        token_count=int(B * d),
        stderr=stderr,
    )


def gen_ppl(samples: list[np.ndarray], judge: NgramJudge) -> PplEstimate:
    """Perplexity the judge assigns to generated sequences."""
    if not samples:
        raise ValueError("no samples to evaluate")
    nll = judge.corpus_nll_per_token(samples)
    count = sum(len(s) for s in samples)
    return PplEstimate(per_token_nll=nll, ppl=float(np.exp(nll)),
                       mc_samples=0, token_count=count)


def token_entropy(samples: list[np.ndarray]) -> float:
    """Empirical unigram entropy of generated tokens, in nats."""
    if not samples:
        raise ValueError("no samples to evaluate")
    flat = np.concatenate([np.asarray(s) for s in samples])
    counts = np.bincount(flat)
    probs = counts[counts > 0] / flat.size
    return float(-(probs * np.log(probs)).sum())

"""Training objectives: weighted denoising cross-entropy plus settled CE.

The active-token term depends on the noising variety.  For the epsilon
variety each position carries a corruption flag and gets the weight

    masked               -> 1 / p_mask
    unmasked, shuffled   -> lam * (1 - eps) / (1 - p_mask)
    unmasked, unshuffled -> lam * eps / (1 - p_mask)

with p_mask the analytic masking probability at that position's noise
level (never estimated empirically).  The gamma variety has no per-flag
information available, so it uses the masked-inverse-probability weight
1/p_mask on masked positions and lam/(1 - p_mask) on unmasked ones, with
p_mask = 1 - e^{-(1-gamma) * sigma(level)}.

The combined objective is beta1 * CE(settled) + beta2 * active_term; both
components are reported separately.  Gradients flow only through logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hyperschedule import Partition
from .masks import AttentionMask, ROLE_ACTIVE, ROLE_CONDITIONING, ROLE_SETTLED
from .process import FLAG_MASKED, FLAG_SHUFFLED

VARIANT_GAMMA = "gamma"
VARIANT_EPSILON = "epsilon"


@dataclass
class LossResult:
    total: float
    ce_settled: float
    active_term: float
    dlogits: np.ndarray | None = None


@dataclass
class LossSpec:
    variant: str
    layout: AttentionMask
    targets: np.ndarray                 # (B, d) clean tokens
    p_mask: np.ndarray                  # (B, d) analytic masking probability
    mask_id: int
    flags: np.ndarray | None = None     # (B, d), epsilon variety
    corrupted: np.ndarray | None = None  # (B, d), gamma variety
    beta1: float = 1.0
    beta2: float = 1.0
    lam: float = 1.0
    epsilon: float = 0.0
    position_weights: np.ndarray | None = None  # (d,), settled CE only

    def __post_init__(self):
        if self.variant not in (VARIANT_GAMMA, VARIANT_EPSILON):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be non-negative")


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _softmax(logits):
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


def hdce_weights(flags: np.ndarray, p_mask: np.ndarray, lam: float,
                 epsilon: float) -> np.ndarray:
    """Per-position weights for the epsilon-variety denoising loss."""
    flags = np.asarray(flags)
    p_mask = np.asarray(p_mask, dtype=np.float64)
    masked = flags == FLAG_MASKED
    shuffled = flags == FLAG_SHUFFLED
    bad = masked & (p_mask <= 0.0)
    if bad.any():
        raise ZeroDivisionError(f"masked position {tuple(np.argwhere(bad)[0])} has p_mask = 0")
    bad = ~masked & (p_mask >= 1.0)
    if bad.any():
        raise ZeroDivisionError(f"unmasked position {tuple(np.argwhere(bad)[0])} has p_mask = 1")
    w = np.empty_like(p_mask)
    w[masked] = 1.0 / p_mask[masked]
    unmasked = ~masked
    w[unmasked] = lam * epsilon / (1.0 - p_mask[unmasked])
    sh = shuffled & unmasked
    w[sh] = lam * (1.0 - epsilon) / (1.0 - p_mask[sh])
    return w


def gamma_weights(corrupted: np.ndarray, p_mask: np.ndarray, mask_id: int,
                  lam: float) -> np.ndarray:
    """Masked-inverse-probability weights for the gamma-variety surrogate."""
    corrupted = np.asarray(corrupted)
    p_mask = np.asarray(p_mask, dtype=np.float64)
    masked = corrupted == mask_id
    bad = masked & (p_mask <= 0.0)
    if bad.any():
        raise ZeroDivisionError(f"masked position {tuple(np.argwhere(bad)[0])} has p_mask = 0")
    bad = ~masked & (p_mask >= 1.0)
    if bad.any():
        raise ZeroDivisionError(f"unmasked position {tuple(np.argwhere(bad)[0])} has p_mask = 1")
    w = np.empty_like(p_mask)
    w[masked] = 1.0 / p_mask[masked]
    w[~masked] = lam / (1.0 - p_mask[~masked])
    return w


def hdce_loss(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray,
              want_grad: bool = False):
    """Weighted mean NLL: sum(w * nll) / (number of entries)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    lp = _log_softmax(logits)
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    n = nll.size
    loss = float((weights * nll).sum() / n)
    if not want_grad:
        return loss
    probs = _softmax(logits)
    grad = probs.copy()
    idx = np.indices(targets.shape)
    grad[(*idx, targets)] -= 1.0
    grad *= (weights / n)[..., None]
    return loss, grad


def settled_ce(logits: np.ndarray, targets: np.ndarray, partition: Partition,
               position_weights: np.ndarray | None = None) -> float:
    """Mean NLL over settled positions of position-aligned logits.

    Empty settled set returns 0 by convention.
    """
    s = partition.settled_end
    if s == 0:
        return 0.0
    logits = np.atleast_3d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_2d(targets)
    lp = _log_softmax(logits[:, :s, :])
    nll = -np.take_along_axis(lp, targets[:, :s, None], axis=-1)[..., 0]
    if position_weights is not None:
        nll = nll * position_weights[:s]
    return float(nll.sum() / nll.size)


def position_reweight(d: int, omega: int) -> np.ndarray:
    """Block-index weights normalizing settled-token exposure.

    w(i) = floor(i/omega) / (ceil(d/omega) - 1), all ones when the sequence
    is a single block.  Used by the non-efficient training path only.
    """
    if not 1 <= omega <= d:
        raise ValueError("need 1 <= omega <= d")
    blocks = -(-d // omega)
    if blocks == 1:
        return np.ones(d)
    return (np.arange(d) // omega) / (blocks - 1)


def combined_loss(logits: np.ndarray, spec: LossSpec) -> LossResult:
    """beta1 * settled CE + beta2 * active denoising term over a slot layout."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    layout = spec.layout
    B = logits.shape[0]
    lp = _log_softmax(logits)
    probs = _softmax(logits)
    dlogits = np.zeros_like(logits)

    def term(slot_idx, weights):
        # weights: (B, len(slot_idx)); returns mean of w * nll and fills dlogits
        tpos = layout.target_pos[slot_idx]
        tgt = spec.targets[:, tpos]
        sub = lp[:, slot_idx, :]
        nll = -np.take_along_axis(sub, tgt[..., None], axis=-1)[..., 0]
        n = nll.size
        value = float((weights * nll).sum() / n)
        g = probs[:, slot_idx, :].copy()
        bi = np.arange(B)[:, None]
        g[bi, np.arange(len(slot_idx))[None, :], tgt] -= 1.0
        g *= (weights / n)[..., None]
        return value, g

    settled_idx = np.nonzero(
        np.isin(layout.roles, (ROLE_SETTLED, ROLE_CONDITIONING)) & (layout.target_pos >= 0)
    )[0]
    ce = 0.0
    if settled_idx.size:
        w = np.ones((B, settled_idx.size))
        if spec.position_weights is not None:
            w = w * spec.position_weights[layout.target_pos[settled_idx]][None, :]
        ce, g = term(settled_idx, w)
        dlogits[:, settled_idx, :] += spec.beta1 * g

    active_idx = np.nonzero(layout.roles == ROLE_ACTIVE)[0]
    active = 0.0
    if active_idx.size:
        tpos = layout.target_pos[active_idx]
        pm = spec.p_mask[:, tpos]
        if spec.variant == VARIANT_EPSILON:
            if spec.flags is None:
                raise ValueError("epsilon variety needs corruption flags")
            w = hdce_weights(spec.flags[:, tpos], pm, spec.lam, spec.epsilon)
        else:
            if spec.corrupted is None:
                raise ValueError("gamma variety needs the corrupted batch")
            w = gamma_weights(spec.corrupted[:, tpos], pm, spec.mask_id, spec.lam)
        active, g = term(active_idx, w)
        dlogits[:, active_idx, :] += spec.beta2 * g

    total = spec.beta1 * ce + spec.beta2 * active
    return LossResult(total=float(total), ce_settled=float(ce),
                      active_term=float(active), dlogits=dlogits)

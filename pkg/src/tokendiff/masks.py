"""Attention masks for windowed denoising, plus KV-cache cost accounting.

Masks are built over a layout of *slots*.  Each slot records which sequence
position fills it (and from which source: the clean sequence, the corrupted
one, or a constant conditioning token), which position its output predicts,
and its role.  Inference layouts cover the settled prefix plus the active
window; efficient-training layouts concatenate the full clean sequence
(causal) with one or more corrupted intervals, so roughly half the slots
carry denoising targets while clean slots double as reusable context.

Two invariants shape every mask here: the clean/settled block is exactly
causal, and no clean slot ever attends to a noisy slot, so settled
representations stay valid when cached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hyperschedule import Partition

ROLE_SETTLED = 0
ROLE_ACTIVE = 1
ROLE_CONDITIONING = 2

INPUT_CLEAN = 0
INPUT_NOISY = 1
INPUT_BOS = 2

ALIGNED = "aligned"
SHIFTED = "shifted"


@dataclass
class AttentionMask:
    """Boolean query x key matrix over a slot layout, with slot metadata."""

    allowed: np.ndarray      # (slots, slots) bool
    roles: np.ndarray        # per-slot role
    input_kind: np.ndarray   # per-slot input source
    input_pos: np.ndarray    # sequence position feeding the slot (-1 for BOS)
    target_pos: np.ndarray   # position whose clean token the slot predicts
    pos_ids: np.ndarray      # positional-embedding index per slot
    d: int
    config: str

    @property
    def q_len(self) -> int:
        return self.allowed.shape[0]

    @property
    def k_len(self) -> int:
        return self.allowed.shape[1]

    def validate(self) -> None:
        if not self.allowed.any(axis=1).all():
            raise ValueError("every query row must attend to at least one key")
        settled = self.roles == ROLE_SETTLED
        noisy = self.roles == ROLE_ACTIVE
        if self.allowed[np.ix_(settled, noisy)].any():
            raise ValueError("settled slots must never attend to noisy slots")


def _base_layout(num_slots: int, d: int, config: str) -> AttentionMask:
    return AttentionMask(
        allowed=np.zeros((num_slots, num_slots), dtype=bool),
        roles=np.zeros(num_slots, dtype=np.int64),
        input_kind=np.zeros(num_slots, dtype=np.int64),
        input_pos=np.full(num_slots, -1, dtype=np.int64),
        target_pos=np.full(num_slots, -1, dtype=np.int64),
        pos_ids=np.zeros(num_slots, dtype=np.int64),
        d=d,
        config=config,
    )


def _fill_clean_slots(m: AttentionMask, d: int, config: str) -> None:
    idx = np.arange(d)
    m.roles[:d] = ROLE_SETTLED
    m.target_pos[:d] = idx
    m.pos_ids[:d] = idx
    if config == ALIGNED:
        m.input_kind[:d] = INPUT_CLEAN
        m.input_pos[:d] = idx
    else:
        m.roles[0] = ROLE_CONDITIONING
        m.input_kind[0] = INPUT_BOS
        m.input_kind[1:d] = INPUT_CLEAN
        m.input_pos[1:d] = idx[:-1]
    m.allowed[:d, :d] = np.tril(np.ones((d, d), dtype=bool))


def inference_mask(config: str, partition: Partition) -> AttentionMask:
    """Mask for one generation call: causal settled prefix, dense active rows.

    Slots cover settled + active positions; the worthless suffix is dropped.
    In the shifted wiring slot 0 is the conditioning token and slot j feeds
    the token at position j-1 while predicting position j.
    """
    if config not in (ALIGNED, SHIFTED):
        raise ValueError(f"unknown config {config!r}")
    s = partition.settled_end
    e = partition.active_end
    m = _base_layout(e, partition.d, config)
    _fill_clean_slots(m, e, config)
    m.roles[s:e] = ROLE_ACTIVE
    if config == ALIGNED:
        m.input_kind[s:e] = INPUT_NOISY
    else:
        # Slot j feeds the token at position j-1; it reads the noisy source
        # only when that position is not yet settled.
        lo = max(s + 1, 1)
        m.input_kind[lo:e] = INPUT_NOISY
        m.roles[0] = ROLE_CONDITIONING
    m.allowed[s:e, :e] = True  # active queries attend densely to settled + active
    m.validate()
    return m


def training_mask(config: str, kind: str, d: int, omega: int,
                  starts: list[int]) -> AttentionMask:
    """Efficient-training layout: clean-causal block plus corrupted intervals.

    Interval m covers positions [j, min(j+omega, d)).  Its noisy slots attend
    to clean slots at positions before j and to the interval itself (dense);
    clean slots attend causally among themselves only.  The shifted wiring
    feeds the settled token preceding each interval as the interval's first
    input and does not represent the interval's last token as an input (its
    output would be discarded).
    """
    if config not in (ALIGNED, SHIFTED):
        raise ValueError(f"unknown config {config!r}")
    if kind not in ("slide", "block"):
        raise ValueError("training masks exist for slide and block kinds")
    starts = list(starts)
    if starts != sorted(set(starts)):
        raise ValueError("starts must be strictly increasing")
    intervals = []
    prev_end = -1
    for m, j in enumerate(starts):
        if not 0 <= j < d:
            raise ValueError(f"interval start {j} outside [0, {d})")
        if kind == "block" and j % omega != 0:
            raise ValueError("block intervals must start at multiples of omega")
        # An interval ends at the next start if that comes sooner, so each
        # position belongs to at most one interval.
        e = min(j + omega, d)
        if m + 1 < len(starts):
            e = min(e, starts[m + 1])
        if j < prev_end:
            raise ValueError("intervals must not overlap")
        intervals.append((j, e))
        prev_end = e

    width = sum(e - j for j, e in intervals)
    m = _base_layout(d + width, d, config)
    _fill_clean_slots(m, d, config)

    cursor = d
    for j, e in intervals:
        w = e - j
        sl = slice(cursor, cursor + w)
        m.roles[sl] = ROLE_ACTIVE
        m.target_pos[sl] = np.arange(j, e)
        m.pos_ids[sl] = np.arange(j, e)
        if config == ALIGNED:
            m.input_kind[sl] = INPUT_NOISY
            m.input_pos[sl] = np.arange(j, e)
        else:
            # Repeat the settled token preceding the interval as its first
            # input; the interval's last token is never fed (its output slot
            # would be discarded).
            if j == 0:
                m.input_kind[cursor] = INPUT_BOS
                m.input_pos[cursor] = -1
            else:
                m.input_kind[cursor] = INPUT_CLEAN
                m.input_pos[cursor] = j - 1
            if w > 1:
                m.input_kind[cursor + 1:cursor + w] = INPUT_NOISY
                m.input_pos[cursor + 1:cursor + w] = np.arange(j, e - 1)
        # Attend to clean context strictly before the interval, plus own interval.
        m.allowed[sl, :j] = True
        m.allowed[sl, sl] = True
        cursor += w

    m.validate()
    return m


@dataclass(frozen=True)
class KvCost:
    L: int
    omega: int
    rho: int
    calls: int
    cost_nocache: int
    cost_cache: int


def kv_cost(L: int, omega: int, rho: int) -> KvCost:
    """Call and token accounting for width-omega, stride-rho decoding."""
    if not 1 <= omega <= L:
        raise ValueError("need 1 <= omega <= L")
    if rho < 1:
        raise ValueError("rho must be a positive integer for accounting")
    calls = -(-(L - omega) // rho) + 1
    return KvCost(
        L=L,
        omega=omega,
        rho=rho,
        calls=calls,
        cost_nocache=calls * omega,
        cost_cache=omega + (calls - 1) * rho,
    )


# ---------------------------------------------------------------------------
# Slot filling and serialization.


def fill_tokens(mask: AttentionMask, clean: np.ndarray, noisy: np.ndarray,
                bos_id: int) -> np.ndarray:
    """Assemble per-slot token ids for a batch from clean and noisy sources."""
    clean = np.atleast_2d(clean)
    noisy = np.atleast_2d(noisy)
    b = clean.shape[0]
    out = np.full((b, mask.q_len), bos_id, dtype=np.int64)
    is_clean = mask.input_kind == INPUT_CLEAN
    is_noisy = mask.input_kind == INPUT_NOISY
    out[:, is_clean] = clean[:, mask.input_pos[is_clean]]
    out[:, is_noisy] = noisy[:, mask.input_pos[is_noisy]]
    return out


def fill_levels(mask: AttentionMask, levels_by_pos: np.ndarray) -> np.ndarray:
    """Per-slot noise levels: noisy slots take their position's level, rest 0."""
    levels_by_pos = np.atleast_2d(levels_by_pos)
    b = levels_by_pos.shape[0]
    out = np.zeros((b, mask.q_len), dtype=np.int64)
    is_noisy = mask.input_kind == INPUT_NOISY
    out[:, is_noisy] = levels_by_pos[:, mask.input_pos[is_noisy]]
    return out


def mask_to_pbm(mask: AttentionMask) -> str:
    """Portable bitmap, 1 = attention allowed."""
    header = f"P1\n{mask.k_len} {mask.q_len}\n"
    body = "\n".join(" ".join("1" if v else "0" for v in row) for row in mask.allowed)
    return header + body + "\n"


def mask_to_csv(mask: AttentionMask) -> str:
    lines = [",".join("1" if v else "0" for v in row) for row in mask.allowed]
    return "\n".join(lines) + "\n"

"""Per-position noise-level schedules ("schedules for schedules").

A hyperschedule assigns every position i its own noise level tau[t, i] at
each generation step t, with tau[0] all at the maximum level and tau[T] all
zero.  Four constructions are provided:

* quench: one position finalized per step (the autoregressive extreme).
* flat:   every position shares the level T - t (conventional diffusion).
* block:  contiguous blocks of width omega annealed one block at a time.
* slide:  a width-omega window sweeping left to right, annealing linearly
          in (i - rho*t).

Block and slide accept a rational generation rate rho (tokens per step in
the long-sequence limit).  Levels are rounded half-up so the matrices are
integer, deterministic, and monotone per position.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

KINDS = ("quench", "flat", "block", "slide")


@dataclass(frozen=True)
class Partition:
    """Contiguous settled / active / worthless split of [0, d) at one step."""

    settled_end: int
    active_end: int
    d: int

    @property
    def settled(self) -> range:
        return range(0, self.settled_end)

    @property
    def active(self) -> range:
        return range(self.settled_end, self.active_end)

    @property
    def worthless(self) -> range:
        return range(self.active_end, self.d)

    @property
    def num_active(self) -> int:
        return self.active_end - self.settled_end


@dataclass(frozen=True)
class Hyperschedule:
    kind: str
    d: int
    levels: int  # maximum noise level
    omega: int
    rho: Fraction
    tau: np.ndarray  # shape (T + 1, d), integer levels

    @property
    def T(self) -> int:
        return self.tau.shape[0] - 1

    def validate(self) -> None:
        tau = self.tau
        if tau.shape[1] != self.d:
            raise ValueError("tau width does not match d")
        if not np.all(tau[0] == self.levels):
            raise ValueError("tau[0] must sit at the maximum level everywhere")
        if not np.all(tau[-1] == 0):
            raise ValueError("tau[T] must be zero everywhere")
        if np.any(tau[:-1] < tau[1:]):
            raise ValueError("tau must be non-increasing in t for every position")
        if tau.min() < 0 or tau.max() > self.levels:
            raise ValueError("tau entries must lie in [0, levels]")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def build(kind: str, d: int, levels: int, omega: int | None = None,
          rho: Fraction | int = Fraction(1)) -> Hyperschedule:
    """Construct a hyperschedule of the given kind.

    ``levels`` is the maximum noise level; ``omega`` is required for block
    and slide.  ``rho`` may be any positive rational.  For block, a block is
    annealed over k = ceil(omega/rho) steps; a trailing partial block keeps
    the same k.  For slide, the step index is rescaled by rho.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown hyperschedule kind {kind!r}")
    rho = Fraction(rho)
    if rho <= 0:
        raise ValueError("rho must be positive")

    if kind == "quench":
        if levels not in (None, 1):
            raise ValueError("quench uses a single noise level")
        levels = 1
        tau = (np.arange(d)[None, :] >= np.arange(d + 1)[:, None]).astype(np.int64)
        return Hyperschedule("quench", d, 1, 1, Fraction(1), tau)

    if levels is None or levels < 1:
        raise ValueError("levels must be >= 1")

    if kind == "flat":
        T = levels
        tau = np.repeat((levels - np.arange(T + 1))[:, None], d, axis=1)
        return Hyperschedule("flat", d, levels, d, Fraction(d, T), tau)

    if omega is None or omega < 1:
        raise ValueError("omega is required for block/slide")
    if omega > d:
        raise ValueError("omega cannot exceed d")

    if kind == "block":
        k = _ceil_div(omega * rho.denominator, rho.numerator)
        num_blocks = _ceil_div(d, omega)
        T = k * num_blocks
        rows = np.arange(T + 1)[:, None]
        blocks = np.arange(d)[None, :] // omega
        frac = 1.0 - (rows - blocks * k) / k
        tau = _round_half_up(levels * np.clip(frac, 0.0, 1.0))
        hs = Hyperschedule("block", d, levels, omega, rho, tau)
        hs.validate()
        return hs

    # slide
    T = _ceil_div((d + omega - 1) * rho.denominator, rho.numerator)
    rows = np.arange(T + 1)[:, None]
    pos = np.arange(d)[None, :]
    shift = rows * (rho.numerator / rho.denominator)
    frac = (pos - shift + omega) / omega
    tau = _round_half_up(levels * np.clip(frac, 0.0, 1.0))
    hs = Hyperschedule("slide", d, levels, omega, rho, tau)
    hs.validate()
    return hs


def window_width(hs: Hyperschedule) -> int:
    """Largest per-step count of positions not at rest.

    A position is at rest across step t when (tau[t,i], tau[t+1,i]) is
    (0, 0) or (levels, levels); everything else is in flight.
    """
    a, b = hs.tau[:-1], hs.tau[1:]
    at_rest = ((a == 0) & (b == 0)) | ((a == hs.levels) & (b == hs.levels))
    return int((~at_rest).sum(axis=1).max())


def generation_rate(hs: Hyperschedule) -> Fraction:
    """Tokens produced per model call at finite d: the exact rational d/T."""
    return Fraction(hs.d, hs.T)


def partition_at(hs: Hyperschedule, t: int) -> Partition:
    """Split [0, d) into settled / active / worthless ranges at step t."""
    if not 0 <= t < hs.T:
        raise ValueError(f"step {t} outside [0, {hs.T})")
    row_t, row_n = hs.tau[t], hs.tau[t + 1]
    settled = (row_t == 0) & (row_n == 0)
    worthless = (row_t == hs.levels) & (row_n == hs.levels)
    s = int(np.argmin(settled)) if not settled.all() else hs.d
    w = int(np.argmax(worthless)) if worthless.any() else hs.d
    # The settled prefix and worthless suffix must be contiguous and disjoint.
    if not np.all(settled[:s]) or np.any(settled[s:]):
        raise ValueError("settled region is not a contiguous prefix")
    if np.any(~worthless[w:]) or np.any(worthless[:w]):
        raise ValueError("worthless region is not a contiguous suffix")
    if np.any(worthless[:s]) or w < s:
        raise ValueError("partition regions overlap")
    return Partition(settled_end=s, active_end=w, d=hs.d)


def tau_to_csv(hs: Hyperschedule) -> str:
    """Rows are steps t = 0..T, columns are positions."""
    lines = [",".join(str(int(v)) for v in row) for row in hs.tau]
    return "\n".join(lines) + "\n"


def tau_to_pgm(hs: Hyperschedule) -> str:
    """ASCII PGM rendering, one pixel per (step, position), maxval = levels."""
    header = f"P2\n{hs.d} {hs.T + 1}\n{hs.levels}\n"
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in hs.tau)
    return header + body + "\n"

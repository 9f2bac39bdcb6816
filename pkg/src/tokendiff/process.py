"""Noise schedules, token generators, and forward corruption.

Two token-replacement mechanisms share one generator algebra: the absorb
generator funnels probability mass onto MASK, the uniform generator spreads
it over the other real tokens.  The two matrices commute and are idempotent
up to sign, which gives the mixed generator

    Q_mix(gamma) = (1 - gamma) * Q_absorb + gamma * Q_uniform

the closed-form evolution operator

    exp(D * Q_mix) = I + (1 - e^{-(1-gamma) D}) Q_absorb
                       + (e^{-(1-gamma) D} - e^{-D}) Q_uniform.

Columns are indexed by the source token throughout, so a token's transition
law is a column and every operator is column-stochastic.

Corruption comes in two varieties: the gamma variety redraws each position
from the evolution operator at its cumulative-noise level, while the
epsilon variety applies a one-shot uniform shuffle with probability epsilon
followed by plain masking, and reports per-position flags for the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hyperschedule import Hyperschedule
from .rng import RngStream

# Per-position corruption flags.
FLAG_UNCHANGED = 0
FLAG_SHUFFLED = 1
FLAG_MASKED = 2


@dataclass(frozen=True)
class CumulativeNoiseSchedule:
    """Non-decreasing cumulative noise, sigma[0] = 0, sigma[-1] effectively infinite."""

    values: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.values) - 1

    def __getitem__(self, tau):
        return self.values[tau]


@dataclass(frozen=True)
class AlphaSchedule:
    """Keep-probabilities alpha[0] = 1 down to alpha[levels] = 0."""

    values: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.values) - 1

    def __getitem__(self, tau):
        return self.values[tau]


def loglinear_sigma(levels: int, sigma_min: float = 1e-3, sigma_max: float = 20.0) -> CumulativeNoiseSchedule:
    """Geometric interpolation from sigma_min to sigma_max, with sigma[0] = 0."""
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    tau = np.arange(levels + 1) / levels
    values = sigma_min ** (1 - tau) * sigma_max ** tau
    values[0] = 0.0
    return CumulativeNoiseSchedule(values)


def linear_alpha(levels: int) -> AlphaSchedule:
    """alpha[tau] = 1 - tau/levels."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    return AlphaSchedule(1.0 - np.arange(levels + 1) / levels)


# ---------------------------------------------------------------------------
# Generators.


def uniform_generator(n: int) -> np.ndarray:
    """Uniform-replacement generator over the n-1 real tokens; MASK inert."""
    if n < 2:
        raise ValueError("need at least 2 states")
    q = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(q, (2.0 - n) / (n - 1))
    q[-1, :] = 0.0
    q[:, -1] = 0.0
    return q


def absorb_generator(n: int) -> np.ndarray:
    """Absorbing generator: every real token decays into MASK."""
    if n < 2:
        raise ValueError("need at least 2 states")
    q = np.zeros((n, n))
    idx = np.arange(n - 1)
    q[idx, idx] = -1.0
    q[-1, idx] = 1.0
    return q


@dataclass(frozen=True)
class Generator:
    kind: str  # "uniform" | "absorb" | "hybrid"
    n: int
    gamma: float
    matrix: np.ndarray


def generator(kind: str, n: int, gamma: float | None = None) -> Generator:
    if kind == "uniform":
        return Generator("uniform", n, 1.0, uniform_generator(n))
    if kind == "absorb":
        return Generator("absorb", n, 0.0, absorb_generator(n))
    if kind == "hybrid":
        if gamma is None or not 0.0 <= gamma <= 1.0:
            raise ValueError("hybrid generator needs gamma in [0, 1]")
        m = (1.0 - gamma) * absorb_generator(n) + gamma * uniform_generator(n)
        return Generator("hybrid", n, gamma, m)
    raise ValueError(f"unknown generator kind {kind!r}")


@dataclass(frozen=True)
class EvolutionOperator:
    matrix: np.ndarray  # column-stochastic
    delta: float
    gamma: float


def evolve_analytic(n: int, gamma: float, delta: float) -> EvolutionOperator:
    """Closed-form exp(delta * Q_mix(gamma)) for the mixed generator."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    ca = 1.0 - np.exp(-(1.0 - gamma) * delta)
    cu = np.exp(-(1.0 - gamma) * delta) - np.exp(-delta)
    m = np.eye(n) + ca * absorb_generator(n) + cu * uniform_generator(n)
    return EvolutionOperator(m, delta, gamma)


def epsilon_step_kernel(n: int, epsilon: float, alpha_tau: float) -> np.ndarray:
    """One-step kernel (I + eps*Q_uniform)(I + (1 - alpha_tau)*Q_absorb)."""
    ku = np.eye(n) + epsilon * uniform_generator(n)
    ka = np.eye(n) + (1.0 - alpha_tau) * absorb_generator(n)
    return ku @ ka


@dataclass(frozen=True)
class EpsilonProcess:
    epsilon: float
    alpha: AlphaSchedule

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")

    def p_mask(self, levels) -> np.ndarray:
        """Analytic masking probability at the given noise levels."""
        return 1.0 - self.alpha.values[np.asarray(levels)]


@dataclass(frozen=True)
class GammaProcess:
    gamma: float
    sigma: CumulativeNoiseSchedule

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def p_mask(self, levels) -> np.ndarray:
        """Masking marginal 1 - e^{-(1-gamma) * sigma(level)}."""
        return 1.0 - np.exp(-(1.0 - self.gamma) * self.sigma.values[np.asarray(levels)])


# ---------------------------------------------------------------------------
# Forward corruption.


def _column_cdfs(matrix: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(matrix, axis=0)
    cdf[-1, :] = 1.0
    return cdf


def corrupt_gamma_at_levels(seq: np.ndarray, levels: np.ndarray,
                            sigma: CumulativeNoiseSchedule, gamma: float,
                            vocab_n: int, rng: RngStream) -> np.ndarray:
    """Redraw position i from the evolution operator at delta = sigma[levels[i]].

    Level-0 positions pass through unchanged.  Per-position uniforms come
    from a single counter-based draw, so position i's outcome depends only
    on (stream, i).
    """
    seq = np.asarray(seq)
    levels = np.asarray(levels)
    d = len(seq)
    out = seq.copy()
    u = rng.uniforms(d)
    for tau in np.unique(levels):
        if tau == 0:
            continue
        op = evolve_analytic(vocab_n, gamma, float(sigma[tau]))
        cdf = _column_cdfs(op.matrix)
        idx = np.nonzero(levels == tau)[0]
        cols = cdf[:, seq[idx]]  # (n, len(idx))
        out[idx] = (u[idx][:, None] >= cols.T).sum(axis=1)
    return out


def corrupt_gamma(seq: np.ndarray, hs: Hyperschedule, t: int,
                  sigma: CumulativeNoiseSchedule, gamma: float, vocab_n: int,
                  rng: RngStream) -> np.ndarray:
    """Corrupt at the hyperschedule's step-t noise levels."""
    if not 0 <= t <= hs.T:
        raise ValueError(f"step {t} outside [0, {hs.T}]")
    return corrupt_gamma_at_levels(seq, hs.tau[t, :len(np.asarray(seq))],
                                   sigma, gamma, vocab_n, rng.child(t))


def corrupt_epsilon(seq: np.ndarray, hs: Hyperschedule, t: int,
                    proc: EpsilonProcess, vocab_n: int,
                    rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt at the hyperschedule's step-t noise levels."""
    if not 0 <= t <= hs.T:
        raise ValueError(f"step {t} outside [0, {hs.T}]")
    return corrupt_epsilon_at_levels(seq, hs.tau[t, :len(np.asarray(seq))],
                                     proc, vocab_n, rng.child(t))


def corrupt_epsilon_at_levels(seq: np.ndarray, levels: np.ndarray,
                              proc: EpsilonProcess, vocab_n: int,
                              rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """One-shot uniform shuffle with probability epsilon, then masking.

    Returns (corrupted sequence, flags).  The shuffle excludes the current
    token, carrying total probability epsilon*(n-2)/(n-1) as dictated by the
    uniform generator's off-diagonal mass; a position is flagged shuffled
    only if its token actually changed.  Masking with probability
    1 - alpha[level] overrides the shuffle flag.  Level-0 positions pass
    through unchanged.
    """
    seq = np.asarray(seq)
    levels = np.asarray(levels)
    d = len(seq)
    n = vocab_n
    mask_id = n - 1
    draws = rng.uniforms((d, 3))
    out = seq.copy()
    flags = np.full(d, FLAG_UNCHANGED, dtype=np.int64)

    active = levels > 0
    p_shuffle = proc.epsilon * (n - 2) / (n - 1)
    shuffled = active & (draws[:, 0] < p_shuffle)
    # Pick uniformly among the n-2 real tokens that differ from the current one.
    offset = np.floor(draws[:, 1] * (n - 2)).astype(np.int64)
    offset = np.minimum(offset, n - 3) if n > 3 else np.zeros_like(offset)
    replacement = offset + (offset >= seq).astype(np.int64)
    out[shuffled] = replacement[shuffled]
    flags[shuffled & (replacement != seq)] = FLAG_SHUFFLED

    p_mask = 1.0 - proc.alpha.values[levels]
    masked = active & (draws[:, 2] < p_mask)
    out[masked] = mask_id
    flags[masked] = FLAG_MASKED
    return out, flags

"""Vocabulary, synthetic Markov corpora, and the n-gram judge.

Sequences are plain 1-D numpy int arrays.  Training corpora come from an
order-1 Markov source with analytically known entropy rate, so perplexity
metrics downstream have an exact ground truth.  The n-gram judge is an
add-k smoothed conditional model over the same vocabulary; it doubles as
the external judge for generative perplexity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

CORPUS_MAGIC = b"HDCORP1"

_POWER_ITER_LIMIT = 100_000
_POWER_ITER_TOL = 1e-12


@dataclass(frozen=True)
class Vocab:
    """Token states: real tokens 0..size_total-2 plus MASK at the last index."""

    size_total: int

    def __post_init__(self):
        if self.size_total < 2:
            raise ValueError("vocabulary needs at least one real token plus MASK")

    @property
    def mask_id(self) -> int:
        return self.size_total - 1

    @property
    def num_real(self) -> int:
        return self.size_total - 1

    @classmethod
    def from_real(cls, num_real: int) -> "Vocab":
        return cls(num_real + 1)


@dataclass
class MarkovSource:
    """Order-1 chain over real tokens with known stationary law and entropy."""

    transition: np.ndarray
    stationary: np.ndarray
    entropy_rate: float
    order: int = 1

    @property
    def num_tokens(self) -> int:
        return self.transition.shape[0]


def _stationary_power_iteration(transition: np.ndarray) -> np.ndarray:
    n = transition.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(_POWER_ITER_LIMIT):
        nxt = pi @ transition
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < _POWER_ITER_TOL:
            return nxt
        pi = nxt
    raise RuntimeError("stationary distribution did not converge; chain is degenerate")


def entropy_rate_of(transition: np.ndarray, stationary: np.ndarray) -> float:
    """Entropy rate in nats/token: -sum_x pi_x sum_y P_xy log P_xy."""
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(transition > 0, transition * np.log(transition), 0.0)
    return float(-(stationary @ plogp.sum(axis=1)))


def make_markov_source(num_real_tokens: int, concentration: float, rng: RngStream) -> MarkovSource:
    """Sample a row-stochastic transition matrix from a symmetric Dirichlet.

    Rows with a numerically-zero entry would make the chain reducible, so
    such draws are rejected and resampled from a fresh child stream.
    """
    if num_real_tokens < 2:
        raise ValueError("need at least 2 real tokens")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    alpha = np.full(num_real_tokens, concentration)
    for attempt in range(64):
        gen = rng.child(attempt).generator()
        transition = gen.dirichlet(alpha, size=num_real_tokens)
        if np.all(transition > 1e-300):
            break
    else:
        raise RuntimeError("could not draw an irreducible transition matrix")
    stationary = _stationary_power_iteration(transition)
    return MarkovSource(
        transition=transition,
        stationary=stationary,
        entropy_rate=entropy_rate_of(transition, stationary),
    )


def sample_corpus(src: MarkovSource, num_seqs: int, d: int, rng: RngStream) -> list[np.ndarray]:
    """Draw sequences: initial token from the stationary law, then the chain."""
    if d < 1:
        raise ValueError("sequence length must be >= 1")
    if num_seqs == 0:
        return []
    u = rng.child(0).uniforms((num_seqs, d))
    cdf = np.cumsum(src.transition, axis=1)
    cdf[:, -1] = 1.0
    start_cdf = np.cumsum(src.stationary)
    start_cdf[-1] = 1.0
    tokens = np.empty((num_seqs, d), dtype=np.int64)
    tokens[:, 0] = np.searchsorted(start_cdf, u[:, 0], side="right")
    for t in range(1, d):
        rows = cdf[tokens[:, t - 1]]
        tokens[:, t] = (u[:, t, None] >= rows).sum(axis=1)
    return [tokens[i] for i in range(num_seqs)]


# ---------------------------------------------------------------------------
# Binary persistence: shared little-endian header ("HDCORP1", u32 vocab size,
# u32 rows, u32 cols) followed by u16 token ids for corpora or f64 entries
# for a transition matrix.


def save_corpus(path, corpus: list[np.ndarray], vocab: Vocab) -> None:
    if corpus:
        d = len(corpus[0])
        if any(len(s) != d for s in corpus):
            raise ValueError("all sequences in a corpus file must share one length")
    else:
        d = 0
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<III", vocab.size_total, d, len(corpus)))
        for seq in corpus:
            fh.write(np.asarray(seq, dtype="<u2").tobytes())


def load_corpus(path) -> tuple[list[np.ndarray], Vocab]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CORPUS_MAGIC))
        if magic != CORPUS_MAGIC:
            raise ValueError(f"bad corpus magic {magic!r}")
        size_total, d, count = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(2 * d * count), dtype="<u2")
    tokens = data.astype(np.int64).reshape(count, d)
    return [tokens[i] for i in range(count)], Vocab(size_total)


def save_markov_source(path, src: MarkovSource, vocab: Vocab) -> None:
    n = src.num_tokens
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<III", vocab.size_total, n, n))
        fh.write(np.asarray(src.transition, dtype="<f8").tobytes())


def load_markov_source(path) -> tuple[MarkovSource, Vocab]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CORPUS_MAGIC))
        if magic != CORPUS_MAGIC:
            raise ValueError(f"bad source magic {magic!r}")
        size_total, rows, cols = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8")
    transition = data.reshape(rows, cols).astype(np.float64)
    stationary = _stationary_power_iteration(transition)
    src = MarkovSource(transition, stationary, entropy_rate_of(transition, stationary))
    return src, Vocab(size_total)


# ---------------------------------------------------------------------------
# Add-k n-gram judge.


@dataclass
class NgramJudge:
    """Add-k smoothed conditional model of order 1 or 2 over real tokens.

    Positions without a full context fall back to the smoothed unigram
    (and, for order 2, the smoothed order-1 conditional), so every token of
    a sequence gets a strictly positive probability.
    """

    order: int
    smoothing: float
    num_tokens: int
    unigram: np.ndarray
    conditional: np.ndarray  # order-1: (V, V); order-2: (V, V, V)
    cond1: np.ndarray | None = field(default=None)  # order-1 backoff for order-2 judges

    def log_prob_token(self, context: tuple[int, ...], token: int) -> float:
        k = len(context)
        if k >= self.order:
            ctx = context[-self.order:]
            return float(np.log(self.conditional[ctx][token]))
        if k == 1 and self.order == 2:
            return float(np.log(self.cond1[context[0], token]))
        return float(np.log(self.unigram[token]))

    def sequence_nll(self, seq: np.ndarray) -> float:
        """Total negative log-likelihood of a sequence in nats."""
        seq = np.asarray(seq)
        nll = -np.log(self.unigram[seq[0]])
        if self.order == 2 and len(seq) > 1:
            nll -= np.log(self.cond1[seq[0], seq[1]])
        start = self.order
        if len(seq) > start:
            if self.order == 1:
                nll -= np.log(self.conditional[seq[:-1], seq[1:]]).sum()
            else:
                nll -= np.log(self.conditional[seq[:-2], seq[1:-1], seq[2:]]).sum()
        return float(nll)

    def corpus_nll_per_token(self, corpus: list[np.ndarray]) -> float:
        total = sum(self.sequence_nll(s) for s in corpus)
        count = sum(len(s) for s in corpus)
        return total / count

    def entropy_rate(self) -> float:
        """Entropy rate of the judge itself viewed as a Markov chain."""
        if self.order != 1:
            raise NotImplementedError("entropy rate is defined for order-1 judges")
        stationary = _stationary_power_iteration(self.conditional)
        return entropy_rate_of(self.conditional, stationary)

    def sample(self, num_seqs: int, d: int, rng: RngStream) -> list[np.ndarray]:
        """Generate sequences from the judge's own smoothed distribution."""
        if self.order != 1:
            raise NotImplementedError("sampling is supported for order-1 judges")
        u = rng.child(0).uniforms((num_seqs, d))
        start_cdf = np.cumsum(self.unigram)
        start_cdf[-1] = 1.0
        cdf = np.cumsum(self.conditional, axis=1)
        cdf[:, -1] = 1.0
        tokens = np.empty((num_seqs, d), dtype=np.int64)
        tokens[:, 0] = np.searchsorted(start_cdf, u[:, 0], side="right")
        for t in range(1, d):
            tokens[:, t] = (u[:, t, None] >= cdf[tokens[:, t - 1]]).sum(axis=1)
        return [tokens[i] for i in range(num_seqs)]


def ngram_fit(corpus: list[np.ndarray], order: int, smoothing: float, num_tokens: int) -> NgramJudge:
    """Fit an add-k judge; ``num_tokens`` is the real-token count (no MASK)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    if not corpus:
        raise ValueError("cannot fit a judge on an empty corpus")
    v = num_tokens
    uni = np.zeros(v)
    for seq in corpus:
        uni += np.bincount(np.asarray(seq), minlength=v)
    unigram = (uni + smoothing) / (uni.sum() + smoothing * v)

    c1 = np.zeros((v, v))
    for seq in corpus:
        seq = np.asarray(seq)
        if len(seq) > 1:
            np.add.at(c1, (seq[:-1], seq[1:]), 1.0)
    cond1 = (c1 + smoothing) / (c1.sum(axis=1, keepdims=True) + smoothing * v)

    if order == 1:
        return NgramJudge(order, smoothing, v, unigram, cond1)

    c2 = np.zeros((v, v, v))
    for seq in corpus:
        seq = np.asarray(seq)
        if len(seq) > 2:
            np.add.at(c2, (seq[:-2], seq[1:-1], seq[2:]), 1.0)
    cond2 = (c2 + smoothing) / (c2.sum(axis=2, keepdims=True) + smoothing * v)
    return NgramJudge(order, smoothing, v, unigram, cond2, cond1=cond1)

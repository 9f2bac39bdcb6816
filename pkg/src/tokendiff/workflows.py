"""End-to-end workflows: configuration, training, sampling, evaluation.

Run configuration is a flat key=value file ('#' starts a comment).  Exactly
one of ``gamma`` or ``epsilon`` must be given; that choice selects the
noising variety, the training loss, and the corruption used for evaluation.
Every workflow is deterministic under the configured seed and records what
it produced in a JSON-lines manifest (checksums included, timestamps
excluded) so a run can be replayed bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import denoiser as dn
from . import evaluate as ev
from . import sampler as smp
from .corpus import (Vocab, load_corpus, make_markov_source, ngram_fit,
                     sample_corpus, save_corpus, save_markov_source)
from .hyperschedule import Hyperschedule, build, partition_at
from .loss import LossSpec, combined_loss, position_reweight
from .masks import fill_levels, fill_tokens, inference_mask, training_mask
from .process import (EpsilonProcess, GammaProcess, corrupt_epsilon_at_levels,
                      corrupt_gamma_at_levels, linear_alpha, loglinear_sigma,
                      FLAG_UNCHANGED)
from .rng import RngStream

TOOL_VERSION = "tokendiff 0.1.0"


class ConfigError(ValueError):
    """A named configuration field is missing, unknown, or out of domain."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field_name = field_name


class NumericalError(RuntimeError):
    """Training or evaluation hit a non-finite value."""


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    vocab_real: int = 16
    d: int = 32
    corpus_seqs: int = 2048
    heldout_seqs: int = 256
    concentration: float = 1.0
    # noising variety (exactly one of gamma / epsilon)
    gamma: float | None = None
    epsilon: float | None = None
    # hyperschedule
    hyperschedule: str = "flat"
    levels: int = 32
    omega: int = 8
    rho: Fraction = Fraction(1)
    # schedules
    sigma_min: float = 1e-3
    sigma_max: float = 20.0
    # model
    dim: int = 64
    heads: int = 4
    layers: int = 2
    wiring: str = "aligned"
    time_conditioning: bool = False
    weighted_embedding: bool = False
    # loss
    beta1: float = 1.0
    beta2: float = 1.0
    lam: float = 1.0
    # training
    train_steps: int = 600
    batch_size: int = 64
    lr: float = 0.4
    momentum: float = 0.9
    clip: float = 1.0
    checkpoint_every: int = 1000
    efficient: bool = False
    precision: int = 32  # parameter dtype bits during training
    # sampling
    sampler: str = "original"
    eta: float = 0.1
    temperature: float = 1.0
    steps: int = 0  # 0: one step per noise level (flat only)
    num_samples: int = 64
    cache: bool = True
    # evaluation
    mc_samples: int = 50
    judge_order: int = 1
    judge_smoothing: float = 0.1

    @property
    def variant(self) -> str:
        return "gamma" if self.gamma is not None else "epsilon"

    @property
    def vocab_total(self) -> int:
        return self.vocab_real + 1

    def validate(self) -> "RunConfig":
        if (self.gamma is None) == (self.epsilon is None):
            raise ConfigError("gamma/epsilon", "exactly one of gamma or epsilon must be set")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in [0, 1]")
        if self.epsilon is not None and not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon", "must lie in [0, 1)")
        if self.weighted_embedding and self.variant != "gamma":
            raise ConfigError("weighted_embedding", "only defined for the gamma variety")
        if self.hyperschedule not in ("flat", "quench", "block", "slide"):
            raise ConfigError("hyperschedule", f"unknown kind {self.hyperschedule!r}")
        if self.vocab_real < 2:
            raise ConfigError("vocab_real", "need at least 2 real tokens")
        if self.d < 1:
            raise ConfigError("d", "must be positive")
        if self.levels < 1:
            raise ConfigError("levels", "must be positive")
        if self.hyperschedule in ("block", "slide") and not 1 <= self.omega <= self.d:
            raise ConfigError("omega", "need 1 <= omega <= d")
        if self.rho <= 0:
            raise ConfigError("rho", "must be positive")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("sigma_min/sigma_max", "need 0 < sigma_min < sigma_max")
        if self.dim % self.heads != 0:
            raise ConfigError("dim", "must be divisible by heads")
        if self.wiring not in ("aligned", "shifted"):
            raise ConfigError("wiring", f"unknown wiring {self.wiring!r}")
        if min(self.beta1, self.beta2, self.lam) < 0:
            raise ConfigError("beta1/beta2/lambda", "must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.sampler not in ("original", "acs"):
            raise ConfigError("sampler", f"unknown sampler {self.sampler!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta", "must lie in [0, 1]")
        if self.temperature < 0:
            raise ConfigError("temperature", "must be non-negative")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples", "must be positive")
        if self.judge_order not in (1, 2):
            raise ConfigError("judge_order", "must be 1 or 2")
        if self.judge_smoothing <= 0:
            raise ConfigError("judge_smoothing", "must be positive")
        if self.efficient and self.hyperschedule not in ("block", "slide"):
            raise ConfigError("efficient", "efficient training needs block or slide")
        if self.precision not in (32, 64):
            raise ConfigError("precision", "must be 32 or 64")
        return self


_ALIASES = {"lambda": "lam"}
_BOOL_FIELDS = {"time_conditioning", "weighted_embedding", "efficient", "cache"}


def parse_config_text(text: str) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _parse_value(key, val, known[key].type)
    cfg = RunConfig(**values)
    return cfg.validate()


def _parse_value(key: str, val: str, ftype):
    try:
        if key in _BOOL_FIELDS:
            if val.lower() in ("true", "1", "yes", "on"):
                return True
            if val.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if key == "rho":
            return Fraction(val)
        if key in ("gamma", "epsilon", "concentration", "sigma_min", "sigma_max",
                   "beta1", "beta2", "lam", "lr", "momentum", "clip", "eta",
                   "temperature", "judge_smoothing"):
            return float(val)
        if key in ("hyperschedule", "wiring", "sampler"):
            return val
        return int(val)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {val!r} ({exc})") from exc


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_as_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        out[f.name] = str(v) if isinstance(v, Fraction) else v
    return out


# ---------------------------------------------------------------------------
# Manifest.


class Manifest:
    """Append-only JSON-lines record of everything a run produced."""

    def __init__(self, path):
        self.path = path

    def add(self, record: str, **payload) -> None:
        row = {"record": record, **payload}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Shared builders.


def build_hyperschedule(cfg: RunConfig) -> Hyperschedule:
    kind = cfg.hyperschedule
    if kind == "quench":
        return build("quench", cfg.d, 1)
    if kind == "flat":
        return build("flat", cfg.d, cfg.levels)
    return build(kind, cfg.d, cfg.levels, omega=cfg.omega, rho=cfg.rho)


def build_noise(cfg: RunConfig):
    if cfg.variant == "gamma":
        return GammaProcess(cfg.gamma, loglinear_sigma(cfg.levels, cfg.sigma_min, cfg.sigma_max))
    return EpsilonProcess(cfg.epsilon, linear_alpha(cfg.levels))


def build_model_config(cfg: RunConfig) -> dn.DenoiserConfig:
    return dn.DenoiserConfig(
        vocab=cfg.vocab_total,
        dim=cfg.dim,
        heads=cfg.heads,
        layers=cfg.layers,
        d_max=cfg.d,
        wiring=cfg.wiring,
        time_conditioning=cfg.time_conditioning,
        weighted_embedding=cfg.weighted_embedding,
        levels_max=cfg.levels,
    )


def gen_corpus(cfg: RunConfig, out_dir, manifest: Manifest | None = None) -> dict:
    """Write source.bin, corpus.bin, heldout.bin under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    rng = RngStream(cfg.seed).child(hash_tag("corpus"))
    src = make_markov_source(cfg.vocab_real, cfg.concentration, rng.child(0))
    vocab = Vocab(cfg.vocab_total)
    train = sample_corpus(src, cfg.corpus_seqs, cfg.d, rng.child(1))
    heldout = sample_corpus(src, cfg.heldout_seqs, cfg.d, rng.child(2))
    paths = {
        "source": os.path.join(out_dir, "source.bin"),
        "corpus": os.path.join(out_dir, "corpus.bin"),
        "heldout": os.path.join(out_dir, "heldout.bin"),
    }
    save_markov_source(paths["source"], src, vocab)
    save_corpus(paths["corpus"], train, vocab)
    save_corpus(paths["heldout"], heldout, vocab)
    if manifest:
        for name, path in paths.items():
            manifest.add("corpus", name=name, path=os.path.basename(path),
                         sha256=file_sha256(path))
        manifest.add("metric", name="entropy_rate", value=src.entropy_rate)
    return {"paths": paths, "source": src, "train": train, "heldout": heldout}


def hash_tag(name: str) -> int:
    """Stable 63-bit tag for deriving named substreams."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Training.


def _stage_batch_nonefficient(cfg, hs, noise, batch, step_rng, t):
    """Corrupt a batch at hyperschedule step t and stage slots for the model."""
    B, d = batch.shape
    part = partition_at(hs, t)
    layout = inference_mask(cfg.wiring, part)
    levels_row = hs.tau[t]
    noisy = np.empty_like(batch)
    flags = np.full_like(batch, FLAG_UNCHANGED)
    for i in range(B):
        crng = step_rng.child(i)
        if cfg.variant == "gamma":
            noisy[i] = corrupt_gamma_at_levels(batch[i], levels_row, noise.sigma,
                                               noise.gamma, cfg.vocab_total, crng)
        else:
            noisy[i], flags[i] = corrupt_epsilon_at_levels(batch[i], levels_row,
                                                           noise, cfg.vocab_total, crng)
    levels_by_pos = np.broadcast_to(levels_row, (B, d))
    p_mask = np.broadcast_to(noise.p_mask(levels_row), (B, d))
    return layout, noisy, flags, levels_by_pos, p_mask


def _slide_starts(d, omega, rng) -> list[int]:
    starts = []
    j = int(rng.child(0).integers(0, omega))
    k = 1
    while j < d:
        starts.append(j)
        j += 1 + int(rng.child(k).integers(0, omega))
        k += 1
    return starts


def _stage_batch_efficient(cfg, hs, noise, batch, step_rng):
    """Clean-causal block plus corrupted intervals, one level per interval."""
    B, d = batch.shape
    if cfg.hyperschedule == "block":
        starts = list(range(0, d, cfg.omega))
    else:
        starts = _slide_starts(d, cfg.omega, step_rng.child(0))
        if not starts:
            starts = [0]
    layout = training_mask(cfg.wiring, cfg.hyperschedule, d, cfg.omega, starts)
    intervals = []
    for m, j in enumerate(starts):
        e = min(j + cfg.omega, d)
        if m + 1 < len(starts):
            e = min(e, starts[m + 1])
        intervals.append((j, e))
    levels_by_pos = np.zeros((B, d), dtype=np.int64)
    lvl_draws = step_rng.child(1).integers(1, cfg.levels + 1, (B, len(intervals)))
    for m, (j, e) in enumerate(intervals):
        levels_by_pos[:, j:e] = lvl_draws[:, m][:, None]
    noisy = np.empty_like(batch)
    flags = np.full_like(batch, FLAG_UNCHANGED)
    for i in range(B):
        crng = step_rng.child(2, i)
        if cfg.variant == "gamma":
            noisy[i] = corrupt_gamma_at_levels(batch[i], levels_by_pos[i], noise.sigma,
                                               noise.gamma, cfg.vocab_total, crng)
        else:
            noisy[i], flags[i] = corrupt_epsilon_at_levels(batch[i], levels_by_pos[i],
                                                           noise, cfg.vocab_total, crng)
    p_mask = noise.p_mask(levels_by_pos)
    return layout, noisy, flags, levels_by_pos, p_mask


def train_model(cfg: RunConfig, corpus: list[np.ndarray], out_dir,
                manifest: Manifest | None = None, resume: str | None = None,
                loss_log: str | None = None) -> tuple[dict, dn.DenoiserConfig]:
    """Corrupt -> forward -> combined loss -> SGD, with checkpoints and a loss CSV.

    ``resume`` continues from an existing checkpoint (stage-2 style: the
    hyperschedule may differ from the one the checkpoint was trained on).
    """
    os.makedirs(out_dir, exist_ok=True)
    hs = build_hyperschedule(cfg)
    noise = build_noise(cfg)
    mcfg = build_model_config(cfg)
    root = RngStream(cfg.seed)
    dtype = np.float32 if cfg.precision == 32 else np.float64
    if resume:
        params, loaded_cfg = dn.load_checkpoint(resume)
        if loaded_cfg.vocab != mcfg.vocab or loaded_cfg.dim != mcfg.dim:
            raise ConfigError("resume", "checkpoint architecture does not match config")
        mcfg = loaded_cfg
        params = {k: v.astype(dtype) for k, v in params.items()}
    else:
        params = dn.init_params(mcfg, root.child(hash_tag("init")), dtype=dtype)
    data = np.stack(corpus)
    N = len(data)
    sigma = noise.sigma if cfg.variant == "gamma" else None
    gamma = noise.gamma if cfg.variant == "gamma" else None
    pos_w = None
    if not cfg.efficient and cfg.hyperschedule in ("quench", "block", "slide"):
        pos_w = position_reweight(cfg.d, hs.omega)
    momentum_state = None
    csv_path = loss_log or os.path.join(out_dir, "loss.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    with open(csv_path, "w", newline="") as csv_fh:
        writer = csv.writer(csv_fh)
        writer.writerow(["step", "ce_settled", "active_term", "total"])
        for step in range(cfg.train_steps):
            srng = root.child(hash_tag("train"), step)
            idx = srng.child(0).integers(0, N, cfg.batch_size)
            batch = data[idx]
            if cfg.efficient:
                layout, noisy, flags, levels_by_pos, p_mask = _stage_batch_efficient(
                    cfg, hs, noise, batch, srng.child(1))
            else:
                t = int(srng.child(2).integers(0, hs.T))
                layout, noisy, flags, levels_by_pos, p_mask = _stage_batch_nonefficient(
                    cfg, hs, noise, batch, srng.child(1), t)
            spec = LossSpec(
                variant=cfg.variant, layout=layout, targets=batch, p_mask=p_mask,
                mask_id=mcfg.mask_id, flags=flags, corrupted=noisy,
                beta1=cfg.beta1, beta2=cfg.beta2, lam=cfg.lam,
                epsilon=cfg.epsilon or 0.0, position_weights=pos_w,
            )
            model_batch = {
                "tokens": fill_tokens(layout, batch, noisy, mcfg.mask_id),
                "allowed": layout.allowed,
                "pos_ids": layout.pos_ids,
                "levels": fill_levels(layout, levels_by_pos),
                "sigma": sigma,
                "gamma": gamma,
            }
            try:
                result, grads = dn.loss_and_grads(
                    params, mcfg, model_batch, lambda lg: combined_loss(lg, spec))
            except FloatingPointError as exc:
                if manifest:
                    manifest.add("result", status="failed", step=step, reason=str(exc))
                raise NumericalError(f"step {step}: {exc}") from exc
            momentum_state = dn.sgd_step(params, grads, cfg.lr, clip=cfg.clip,
                                         momentum=cfg.momentum, state=momentum_state)
            writer.writerow([step, f"{result.ce_settled:.6f}",
                             f"{result.active_term:.6f}", f"{result.total:.6f}"])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                dn.save_checkpoint(ckpt_path, params, mcfg)
    dn.save_checkpoint(ckpt_path, params, mcfg)
    if manifest:
        manifest.add("checkpoint", path=os.path.basename(ckpt_path),
                     sha256=file_sha256(ckpt_path), steps=cfg.train_steps)
    return params, mcfg


# ---------------------------------------------------------------------------
# Sampling and evaluation drivers.


def draw_samples(cfg: RunConfig, params, mcfg: dn.DenoiserConfig,
                 num: int | None = None, sampler: str | None = None,
                 eta: float | None = None, cache: bool | None = None,
                 gumbel_dtype=np.float64) -> tuple[list[np.ndarray], smp.CallLedger]:
    hs = build_hyperschedule(cfg)
    noise = build_noise(cfg)
    sigma = noise.sigma if cfg.variant == "gamma" else None
    steps = cfg.steps if cfg.steps else hs.levels
    total = smp.CallLedger()
    out = []
    root = RngStream(cfg.seed).child(hash_tag("sample"))
    for i in range(num if num is not None else cfg.num_samples):
        tokens, ledger = smp.generate(
            params, mcfg, hs, root.child(i), steps=steps,
            sampler=sampler if sampler is not None else cfg.sampler,
            eta=eta if eta is not None else cfg.eta,
            temperature=cfg.temperature,
            cache=cache if cache is not None else cfg.cache,
            sigma=sigma, gamma=cfg.gamma, gumbel_dtype=gumbel_dtype,
        )
        out.append(tokens)
        total.calls += ledger.calls
        total.tokens_processed += ledger.tokens_processed
        total.cache_hits += ledger.cache_hits
    return out, total


def run_pipeline(cfg: RunConfig, out_dir) -> dict:
    """Corpus -> train -> sample -> all three metrics, in one manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = Manifest(os.path.join(out_dir, "manifest.jsonl"))
    manifest.add("config", tool=TOOL_VERSION, **config_as_dict(cfg))
    art = gen_corpus(cfg, out_dir, manifest)
    params, mcfg = train_model(cfg, art["train"], out_dir, manifest)
    samples, ledger = draw_samples(cfg, params, mcfg)
    vocab = Vocab(cfg.vocab_total)
    samples_path = os.path.join(out_dir, "samples.bin")
    save_corpus(samples_path, samples, vocab)
    manifest.add("samples", path=os.path.basename(samples_path),
                 sha256=file_sha256(samples_path),
                 calls=ledger.calls, tokens=ledger.tokens_processed,
                 cache_hits=ledger.cache_hits)
    hs = build_hyperschedule(cfg)
    noise = build_noise(cfg)
    est = ev.mc_ppl(params, mcfg, art["heldout"], hs, noise, cfg.mc_samples,
                    RngStream(cfg.seed).child(hash_tag("mc-ppl")))
    judge = ngram_fit(art["heldout"], cfg.judge_order, cfg.judge_smoothing,
                      cfg.vocab_real)
    gp = ev.gen_ppl(samples, judge)
    ent = ev.token_entropy(samples)
    manifest.add("metric", name="mc_ppl", value=est.ppl, nll=est.per_token_nll,
                 stderr=est.stderr, mc_samples=est.mc_samples)
    manifest.add("metric", name="gen_ppl", value=gp.ppl, nll=gp.per_token_nll)
    manifest.add("metric", name="token_entropy", value=ent)
    manifest.add("result", status="ok")
    return {"mc_ppl": est, "gen_ppl": gp, "entropy": ent,
            "params": params, "model_config": mcfg, "artifacts": art}

"""Command-line entry points.

Subcommands: gen-corpus, train, sample, eval, export-hyperschedule,
export-mask, kv-table, corrupt, pipeline.  Exit codes: 0 success, 2 for
configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import denoiser as dn
from . import evaluate as ev
from .corpus import Vocab, load_corpus, ngram_fit, save_corpus
from .hyperschedule import build as build_hs
from .hyperschedule import tau_to_csv, tau_to_pgm
from .masks import kv_cost, mask_to_csv, mask_to_pbm, training_mask
from .process import (EpsilonProcess, corrupt_epsilon, corrupt_gamma,
                      linear_alpha, loglinear_sigma, FLAG_MASKED, FLAG_SHUFFLED)
from .rng import RngStream
from .workflows import (ConfigError, Manifest, NumericalError, RunConfig,
                        TOOL_VERSION, build_hyperschedule, config_as_dict,
                        draw_samples, gen_corpus, hash_tag, load_config,
                        run_pipeline, train_model)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="key=value run configuration file")


def cmd_gen_corpus(args) -> int:
    cfg = load_config(args.config)
    manifest = Manifest(os.path.join(args.out, "manifest.jsonl"))
    os.makedirs(args.out, exist_ok=True)
    manifest.add("config", tool=TOOL_VERSION, **config_as_dict(cfg))
    art = gen_corpus(cfg, args.out, manifest)
    print(f"wrote corpus to {args.out} "
          f"(entropy rate {art['source'].entropy_rate:.4f} nats/token)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus, vocab = load_corpus(args.corpus)
    if vocab.size_total != cfg.vocab_total:
        raise ConfigError("vocab_real", "corpus vocabulary does not match config")
    os.makedirs(args.out, exist_ok=True)
    manifest = Manifest(os.path.join(args.out, "manifest.jsonl"))
    manifest.add("config", tool=TOOL_VERSION, **config_as_dict(cfg))
    train_model(cfg, corpus, args.out, manifest, resume=args.resume)
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint.bin')}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params, mcfg = dn.load_checkpoint(args.checkpoint)
    cfg = RunConfig(
        seed=args.seed,
        vocab_real=mcfg.vocab - 1,
        d=mcfg.d_max,
        gamma=args.gamma,
        epsilon=args.epsilon if args.gamma is None else None,
        hyperschedule=args.hyperschedule,
        levels=mcfg.levels_max or args.levels,
        omega=args.omega,
        rho=Fraction(args.rho),
        sampler=args.sampler,
        eta=args.eta,
        temperature=args.temperature,
        steps=args.steps,
        num_samples=args.num,
        cache=args.cache == "on",
        wiring=mcfg.wiring,
        time_conditioning=mcfg.time_conditioning,
        weighted_embedding=mcfg.weighted_embedding,
        dim=mcfg.dim, heads=mcfg.heads, layers=mcfg.layers,
    ).validate()
    t0 = time.perf_counter()
    dtype = np.float32 if args.gumbel_bits == 32 else np.float64
    samples, ledger = draw_samples(cfg, params, mcfg, gumbel_dtype=dtype)
    wall = time.perf_counter() - t0
    for seq in samples:
        print(" ".join(str(int(v)) for v in seq))
    print(f"# ledger calls={ledger.calls} tokens={ledger.tokens_processed} "
          f"cache_hits={ledger.cache_hits} wall={wall:.3f}s", file=sys.stderr)
    if args.out:
        save_corpus(args.out, samples, Vocab(mcfg.vocab))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, mcfg = dn.load_checkpoint(args.checkpoint)
    record: dict = {"mode": args.mode, "checkpoint": args.checkpoint}
    rng = RngStream(args.seed).child(hash_tag("eval"))
    if args.mode == "mc-ppl":
        cfg = load_config(args.config)
        corpus, _ = load_corpus(args.corpus)
        from .workflows import build_noise
        est = ev.mc_ppl(params, mcfg, corpus, build_hyperschedule(cfg),
                        build_noise(cfg), args.mc_samples, rng)
        record.update(ppl=est.ppl, per_token_nll=est.per_token_nll,
                      stderr=est.stderr, mc_samples=est.mc_samples)
    elif args.mode == "gen-ppl":
        samples, _ = load_corpus(args.samples)
        judge_corpus, jv = load_corpus(args.judge_corpus)
        judge = ngram_fit(judge_corpus, args.judge_order, args.judge_smoothing,
                          jv.size_total - 1)
        est = ev.gen_ppl(samples, judge)
        record.update(ppl=est.ppl, per_token_nll=est.per_token_nll,
                      tokens=est.token_count)
    elif args.mode == "entropy":
        samples, _ = load_corpus(args.samples)
        record.update(entropy=ev.token_entropy(samples))
    else:
        raise ConfigError("mode", f"unknown mode {args.mode!r}")
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_export_hyperschedule(args) -> int:
    hs = build_hs(args.kind, args.d, args.levels if args.kind != "quench" else 1,
                  omega=args.omega, rho=Fraction(args.rho))
    with open(args.out + ".csv", "w") as fh:
        fh.write(tau_to_csv(hs))
    with open(args.out + ".pgm", "w") as fh:
        fh.write(tau_to_pgm(hs))
    print(f"wrote {args.out}.csv and {args.out}.pgm (T={hs.T})")
    return EXIT_OK


def cmd_export_mask(args) -> int:
    starts = [int(s) for s in args.starts.split(",")] if args.starts else []
    mask = training_mask(args.config, args.kind, args.d, args.omega, starts)
    with open(args.out + ".pbm", "w") as fh:
        fh.write(mask_to_pbm(mask))
    with open(args.out + ".csv", "w") as fh:
        fh.write(mask_to_csv(mask))
    print(f"wrote {args.out}.pbm and {args.out}.csv ({mask.q_len}x{mask.k_len})")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",")]


def cmd_kv_table(args) -> int:
    rows = ["L,omega,rho,calls,cost_nocache,cost_cache"]
    for L in _int_list(args.L):
        for omega in _int_list(args.omega):
            for rho in _int_list(args.rho):
                if omega > L:
                    continue
                c = kv_cost(L, omega, rho)
                rows.append(f"{L},{omega},{rho},{c.calls},{c.cost_nocache},{c.cost_cache}")
    text = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    cfg = load_config(args.config)
    from .workflows import build_noise
    hs = build_hyperschedule(cfg)
    noise = build_noise(cfg)
    rng = RngStream(args.seed).child(hash_tag("corrupt-cli"))
    gen = rng.child(0).generator()
    seq = gen.integers(0, cfg.vocab_real, cfg.d)
    t = args.t if args.t is not None else hs.T // 2
    if cfg.variant == "gamma":
        out = corrupt_gamma(seq, hs, t, noise.sigma, noise.gamma,
                            cfg.vocab_total, rng.child(1))
        flags = np.where(out == cfg.vocab_total - 1, FLAG_MASKED,
                         np.where(out != seq, FLAG_SHUFFLED, 0))
    else:
        out, flags = corrupt_epsilon(seq, hs, t, noise, cfg.vocab_total, rng.child(1))
    marks = {0: ".", FLAG_SHUFFLED: "s", FLAG_MASKED: "M"}
    print("clean:  " + " ".join(f"{v:3d}" for v in seq))
    print("noisy:  " + " ".join(f"{v:3d}" for v in out))
    print("flags:  " + " ".join(f"{marks[int(f)]:>3}" for f in flags))
    print(f"# step t={t} of T={hs.T}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    result = run_pipeline(cfg, args.out)
    print(json.dumps({
        "mc_ppl": result["mc_ppl"].ppl,
        "gen_ppl": result["gen_ppl"].ppl,
        "token_entropy": result["entropy"],
    }, sort_keys=True))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokendiff",
                                 description="discrete-diffusion sequence generation workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic Markov corpus")
    _add_config_arg(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a denoiser on a corpus")
    _add_config_arg(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="stage-2 start from this checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hyperschedule", default="flat",
                   choices=["flat", "quench", "block", "slide"])
    p.add_argument("--omega", type=int, default=8)
    p.add_argument("--levels", type=int, default=32)
    p.add_argument("--rho", default="1")
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--sampler", default="original", choices=["original", "acs"])
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default="on", choices=["on", "off"])
    p.add_argument("--num", type=int, default=8)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--gumbel-bits", type=int, default=64, choices=[32, 64])
    p.add_argument("--out", help="also save samples in corpus format")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint or sample file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=["mc-ppl", "gen-ppl", "entropy"])
    p.add_argument("--config", help="run config (mc-ppl)")
    p.add_argument("--corpus", help="held-out corpus file (mc-ppl)")
    p.add_argument("--samples", help="sample file (gen-ppl, entropy)")
    p.add_argument("--judge-corpus", help="judge training corpus (gen-ppl)")
    p.add_argument("--judge-order", type=int, default=1)
    p.add_argument("--judge-smoothing", type=float, default=0.1)
    p.add_argument("--mc-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-hyperschedule", help="write the level matrix as CSV + PGM")
    p.add_argument("--kind", required=True, choices=["flat", "quench", "block", "slide"])
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--omega", type=int, default=None)
    p.add_argument("--rho", default="1")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=cmd_export_hyperschedule)

    p = sub.add_parser("export-mask", help="write a training mask as PBM + CSV")
    p.add_argument("--config", required=True, choices=["aligned", "shifted"])
    p.add_argument("--kind", required=True, choices=["slide", "block"])
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--omega", type=int, required=True)
    p.add_argument("--starts", default="", help="comma-separated interval starts")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(fn=cmd_export_mask)

    p = sub.add_parser("kv-table", help="emit call/cost accounting rows")
    p.add_argument("--L", required=True, help="comma-separated lengths")
    p.add_argument("--omega", required=True, help="comma-separated window widths")
    p.add_argument("--rho", required=True, help="comma-separated strides")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_kv_table)

    p = sub.add_parser("corrupt", help="print a corrupted sequence with flags")
    _add_config_arg(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t", type=int, default=None, help="hyperschedule step")
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("pipeline", help="corpus, training, sampling and metrics in one run")
    _add_config_arg(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pipeline)

    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

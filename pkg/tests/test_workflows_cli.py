import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tokendiff import denoiser as dn
from tokendiff.corpus import load_corpus
from tokendiff.workflows import (ConfigError, RunConfig, config_as_dict,
                                 draw_samples, gen_corpus, load_config,
                                 parse_config_text, train_model)

BASE_CONFIG = """
# desk-scale smoke configuration
seed = 3
vocab_real = 8
d = 12
corpus_seqs = 64
heldout_seqs = 16
epsilon = 0.05
hyperschedule = flat
levels = 8
train_steps = 5
batch_size = 8
lr = 0.5
mc_samples = 3
num_samples = 4
"""


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "tokendiff.cli", *args],
                          capture_output=True, text=True)


# --- configuration -----------------------------------------------------------


def test_parse_config_roundtrip():
    cfg = parse_config_text(BASE_CONFIG)
    assert cfg.seed == 3
    assert cfg.variant == "epsilon"
    assert cfg.vocab_total == 9


def test_config_requires_exactly_one_variant():
    with pytest.raises(ConfigError, match="gamma"):
        parse_config_text(BASE_CONFIG + "gamma = 0.1\n")
    with pytest.raises(ConfigError, match="gamma"):
        parse_config_text(BASE_CONFIG.replace("epsilon = 0.05", ""))


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="mystery"):
        parse_config_text(BASE_CONFIG + "mystery = 1\n")


def test_config_rejects_out_of_domain():
    with pytest.raises(ConfigError, match="eta"):
        parse_config_text(BASE_CONFIG + "eta = 1.5\n")
    with pytest.raises(ConfigError, match="wiring"):
        parse_config_text(BASE_CONFIG + "wiring = diagonal\n")
    with pytest.raises(ConfigError, match="weighted_embedding"):
        parse_config_text(BASE_CONFIG + "weighted_embedding = true\n")
    with pytest.raises(ConfigError, match="lr"):
        parse_config_text(BASE_CONFIG + "lr = -1\n")


def test_config_parses_rational_rho():
    cfg = parse_config_text(BASE_CONFIG + "rho = 1/2\n")
    assert cfg.rho.denominator == 2


def test_config_lambda_alias():
    cfg = parse_config_text(BASE_CONFIG + "lambda = 0.5\n")
    assert cfg.lam == 0.5


# --- workflows ---------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config_text(BASE_CONFIG)
    art = gen_corpus(cfg, out)
    params, mcfg = train_model(cfg, art["train"], out)
    return cfg, art, params, mcfg, out


def test_gen_corpus_deterministic(tmp_path):
    cfg = parse_config_text(BASE_CONFIG)
    a = gen_corpus(cfg, tmp_path / "a")
    b = gen_corpus(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "corpus.bin").read_bytes() == \
        (tmp_path / "b" / "corpus.bin").read_bytes()


def test_zero_step_training_equals_init(tmp_path):
    cfg = parse_config_text(BASE_CONFIG.replace("train_steps = 5", "train_steps = 0"))
    art = gen_corpus(cfg, tmp_path)
    params, mcfg = train_model(cfg, art["train"], tmp_path)
    from tokendiff.workflows import build_model_config, hash_tag
    from tokendiff.rng import RngStream
    init = dn.init_params(build_model_config(cfg), RngStream(cfg.seed).child(hash_tag("init")),
                          dtype=np.float32)
    for k in init:
        assert np.array_equal(params[k], init[k])


def test_training_writes_loss_csv(trained):
    _, _, _, _, out = trained
    rows = (out / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "step,ce_settled,active_term,total"
    assert len(rows) == 6


def test_stage_two_resume_with_other_hyperschedule(tmp_path, trained):
    cfg, art, _, _, out = trained
    stage2 = parse_config_text(
        BASE_CONFIG
        + "hyperschedule = block\nomega = 4\ntrain_steps = 3\n")
    params, mcfg = train_model(stage2, art["train"], tmp_path,
                               resume=str(out / "checkpoint.bin"))
    rows = (tmp_path / "loss.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    for row in rows[1:]:
        assert np.isfinite(float(row.split(",")[-1]))


def test_draw_samples_acs_zero_matches_original(trained):
    cfg, _, params, mcfg, _ = trained
    a, _ = draw_samples(cfg, params, mcfg, num=3, sampler="original")
    b, _ = draw_samples(cfg, params, mcfg, num=3, sampler="acs", eta=0.0)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# --- CLI ---------------------------------------------------------------------


def test_cli_kv_table(tmp_path):
    r = run_cli("kv-table", "--L", "12", "--omega", "4", "--rho", "2")
    assert r.returncode == 0
    assert "12,4,2,5,20,12" in r.stdout


def test_cli_export_hyperschedule(tmp_path):
    out = tmp_path / "hs"
    r = run_cli("export-hyperschedule", "--kind", "quench", "--d", "8",
                "--out", str(out))
    assert r.returncode == 0
    rows = (tmp_path / "hs.csv").read_text().strip().splitlines()
    assert len(rows) == 9
    # lower-triangular 0/1 pattern
    first = [int(v) for v in rows[0].split(",")]
    assert first == [1] * 8
    last = [int(v) for v in rows[-1].split(",")]
    assert last == [0] * 8
    assert (tmp_path / "hs.pgm").read_text().startswith("P2\n")


def test_cli_export_mask_matches_golden(tmp_path):
    out = tmp_path / "mask"
    r = run_cli("export-mask", "--config", "aligned", "--kind", "block",
                "--d", "12", "--omega", "4", "--starts", "0,4,8",
                "--out", str(out))
    assert r.returncode == 0
    golden = os.path.join(os.path.dirname(__file__), "golden",
                          "train_aligned_block.pbm")
    assert (tmp_path / "mask.pbm").read_text() == open(golden).read()


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(BASE_CONFIG + "gamma = 0.1\n")
    r = run_cli("gen-corpus", "--config", str(bad), "--out", str(tmp_path / "o"))
    assert r.returncode == 2
    assert "gamma" in r.stderr


def test_cli_corrupt_prints_flags(tmp_path):
    cfgp = tmp_path / "c.cfg"
    cfgp.write_text(BASE_CONFIG)
    r = run_cli("corrupt", "--config", str(cfgp), "--seed", "5")
    assert r.returncode == 0
    assert r.stdout.startswith("clean:")
    assert "flags:" in r.stdout


def test_cli_end_to_end_sample_and_eval(tmp_path):
    cfgp = tmp_path / "c.cfg"
    cfgp.write_text(BASE_CONFIG)
    out = tmp_path / "run"
    assert run_cli("gen-corpus", "--config", str(cfgp), "--out", str(out)).returncode == 0
    r = run_cli("train", "--config", str(cfgp), "--corpus", str(out / "corpus.bin"),
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    ckpt = str(out / "checkpoint.bin")
    r = run_cli("sample", "--checkpoint", ckpt, "--hyperschedule", "flat",
                "--steps", "8", "--num", "2", "--seed", "1", "--epsilon", "0.05",
                "--out", str(out / "samples.bin"))
    assert r.returncode == 0, r.stderr
    lines = [l for l in r.stdout.strip().splitlines() if l]
    assert len(lines) == 2
    assert "ledger" in r.stderr
    r = run_cli("eval", "--checkpoint", ckpt, "--mode", "mc-ppl",
                "--config", str(cfgp), "--corpus", str(out / "heldout.bin"),
                "--mc-samples", "3", "--seed", "2")
    assert r.returncode == 0, r.stderr
    record = json.loads(r.stdout)
    assert record["ppl"] > 1
    r = run_cli("eval", "--checkpoint", ckpt, "--mode", "gen-ppl",
                "--samples", str(out / "samples.bin"),
                "--judge-corpus", str(out / "heldout.bin"))
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["ppl"] > 1
    r = run_cli("eval", "--checkpoint", ckpt, "--mode", "entropy",
                "--samples", str(out / "samples.bin"))
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["entropy"] >= 0


def test_pipeline_deterministic_and_acs_zero_equivalence(tmp_path):
    # two pipeline invocations with the same seed produce identical manifests;
    # sampler=acs with eta=0 produces the same sample file as sampler=original.
    text = BASE_CONFIG + "train_steps = 3\nmc_samples = 2\nnum_samples = 2\n"
    cfgp = tmp_path / "p.cfg"
    cfgp.write_text(text)
    r1 = run_cli("pipeline", "--config", str(cfgp), "--out", str(tmp_path / "r1"))
    assert r1.returncode == 0, r1.stderr
    r2 = run_cli("pipeline", "--config", str(cfgp), "--out", str(tmp_path / "r2"))
    assert r2.returncode == 0
    m1 = (tmp_path / "r1" / "manifest.jsonl").read_text()
    m2 = (tmp_path / "r2" / "manifest.jsonl").read_text()
    assert m1 == m2

    orig = tmp_path / "orig.cfg"
    orig.write_text(text + "sampler = original\n")
    acs0 = tmp_path / "acs0.cfg"
    acs0.write_text(text + "sampler = acs\neta = 0.0\n")
    assert run_cli("pipeline", "--config", str(orig), "--out", str(tmp_path / "ro")).returncode == 0
    assert run_cli("pipeline", "--config", str(acs0), "--out", str(tmp_path / "ra")).returncode == 0
    sa = (tmp_path / "ro" / "samples.bin").read_bytes()
    sb = (tmp_path / "ra" / "samples.bin").read_bytes()
    assert sa == sb

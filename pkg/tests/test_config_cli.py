import json
import os
import subprocess
import sys
import time

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairdiff import nn
from fairdiff.cli import main
from fairdiff.config import STREAMS, PipelineConfig, substream_seed
from fairdiff.errors import ConfigError

SMALL = [
    "--set", "network.score_hidden=[32,32]",
    "--set", "network.classifier_hidden=[16]",
    "--set", "train.batch_size=64",
    "--set", "train.checkpoint_every=10",
    "--set", "schedule.n_steps=50",
    "--set", "eval.epochs=30",
]


# config


def test_config_defaults_and_parse():
    cfg = PipelineConfig.from_text(
        "# comment\nseed = 7\nnetwork.score_hidden = [8, 8]\ntrain.exact = true\n"
        "paths.data = data/adult.csv\ntrain.exclude_domains = a, b\n"
    )
    assert cfg["seed"] == 7 and cfg["network.score_hidden"] == [8, 8]
    assert cfg["train.exact"] is True and cfg["paths.data"] == "data/adult.csv"
    assert cfg["train.exclude_domains"] == ["a", "b"]
    assert cfg["schedule.beta_max"] == 20.0 and cfg["schedule.n_steps"] == 1000
    again = PipelineConfig.from_text(cfg.to_text())
    assert again.values == cfg.values


def test_config_errors_name_the_line():
    with pytest.raises(ConfigError, match="<config>:2: unknown config key 'nope'"):
        PipelineConfig.from_text("seed = 1\nnope = 3\n")
    with pytest.raises(ConfigError, match=":1: expected"):
        PipelineConfig.from_text("seed 1\n")
    with pytest.raises(ConfigError, match="schedule.n_steps"):
        PipelineConfig.from_text("schedule.n_steps = 1.5\n")
    with pytest.raises(ConfigError):
        PipelineConfig.load("/nonexistent/x.cfg")


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_seed_range(seed):
    with pytest.raises(ConfigError):
        PipelineConfig({"seed": seed})


def test_generator_params_build_an_estimator():
    from fairdiff import FairDiffusionGenerator

    cfg = PipelineConfig({"network.score_hidden": [4], "meta.beta_y": 0.5})
    gen = FairDiffusionGenerator(**cfg.generator_params())
    assert gen.score_hidden == (4,) and gen.beta_y == 0.5


@given(st.integers(0, 2**64 - 1))
def test_substreams_distinct(seed):
    seeds = {substream_seed(seed, name) for name in STREAMS}
    assert len(seeds) == len(STREAMS)
    assert substream_seed(seed, "train") == substream_seed(seed, "train")


# CLI


GUIDED = ["--set", "train.optimizer=adam", "--set", "meta.gamma_score=1e-3",
          "--set", "meta.gamma_y=1e-2", "--set", "meta.gamma_z=1e-2"]


def run(*argv):
    code = main([str(a) for a in argv])
    return code


def prepare(workdir, toy_csv, toy_schema, *extra):
    return run("prepare", "--data", toy_csv, "--schema", toy_schema, "--workdir", workdir, *extra)


def _hist(workdir):
    return open(os.path.join(workdir, "checkpoints", "loss_history.csv")).read()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from conftest import DATA

    wd = str(tmp_path_factory.mktemp("run"))
    assert prepare(wd, os.path.join(DATA, "toy.csv"), os.path.join(DATA, "toy_schema.json")) == 0
    assert run("train", "--workdir", wd, "--iterations", 20, *SMALL, *GUIDED) == 0
    return wd


def test_prepare_summary_and_cache(tmp_path, toy_csv, toy_schema, capsys):
    wd = str(tmp_path)
    assert prepare(wd, toy_csv, toy_schema) == 0
    out = capsys.readouterr().out
    assert "dropped 2 rows" in out and "3 domains" in out
    for name in ("north", "south", "east", "total"):
        assert name in out
    files = sorted(os.listdir(os.path.join(wd, "prepared", "data")))
    assert files == ["X.npy", "d.npy", "y.npy", "z.npy"]
    snap = {f: open(os.path.join(wd, "prepared", "data", f), "rb").read() for f in files}
    schema = open(os.path.join(wd, "prepared", "schema.json"), "rb").read()
    assert prepare(wd, toy_csv, toy_schema) == 0
    for f in files:
        assert open(os.path.join(wd, "prepared", "data", f), "rb").read() == snap[f]
    assert open(os.path.join(wd, "prepared", "schema.json"), "rb").read() == schema


def test_prepare_missing_schema(tmp_path, toy_csv, capsys):
    assert prepare(str(tmp_path), toy_csv, str(tmp_path / "none.json")) == 2
    assert "schema" in capsys.readouterr().err


def test_prepare_bad_csv(tmp_path, toy_schema):
    bad = tmp_path / "bad.csv"
    bad.write_text("age,hours\n1,2\n")
    assert prepare(str(tmp_path / "w"), str(bad), toy_schema) == 3


def test_train_fast_and_deterministic(tmp_path, toy_csv, toy_schema):
    runs = []
    for name in ("a", "b"):
        wd = str(tmp_path / name)
        prepare(wd, toy_csv, toy_schema)
        start = time.perf_counter()
        assert run("train", "--workdir", wd, "--iterations", 10, *SMALL) == 0
        assert time.perf_counter() - start < 60
        runs.append(wd)
    assert _hist(runs[0]) == _hist(runs[1])
    assert _hist(runs[0]).splitlines()[0] == "iteration,model,L_in,L_out"
    for m in ("score", "label", "sensitive"):
        ha, hb = (nn.checkpoint_hash(os.path.join(r, "checkpoints", m)) for r in runs)
        assert ha == hb
        _, manifest = nn.load_params(os.path.join(runs[0], "checkpoints", m))
        assert manifest["module"] == m and manifest["iteration"] == 10


def test_train_resume_matches_uninterrupted(tmp_path, toy_csv, toy_schema):
    full, split = str(tmp_path / "full"), str(tmp_path / "split")
    for wd in (full, split):
        prepare(wd, toy_csv, toy_schema)
    assert run("train", "--workdir", full, "--iterations", 20, *SMALL) == 0
    assert run("train", "--workdir", split, "--iterations", 10, *SMALL) == 0
    assert run("train", "--workdir", split, "--iterations", 20, "--resume", *SMALL) == 0
    assert _hist(full) == _hist(split)
    for m in ("score", "label", "sensitive"):
        assert nn.checkpoint_hash(os.path.join(full, "checkpoints", m)) == \
            nn.checkpoint_hash(os.path.join(split, "checkpoints", m))
    # resuming under a different configuration is refused
    assert run("train", "--workdir", split, "--iterations", 30, "--resume", *SMALL,
               "--set", "train.batch_size=32") == 2


def test_train_without_prepare(tmp_path):
    assert run("train", "--workdir", str(tmp_path), "--iterations", 2) == 2


def test_sample_counts_labels_and_sidecar(trained, tmp_path):
    out = str(tmp_path / "syn.csv")
    assert run("sample", "--workdir", trained, "--num-samples", 1000, "--steps", 20,
               "--lambda-y", 0.5, "--lambda-z", 0.5, "--out", out) == 0
    lines = open(out).read().splitlines()
    assert len(lines) == 1001
    assert lines[0] == "age,hours,workclass,income"
    df = pd.read_csv(out)
    assert set(df["workclass"]) <= {"Private", "Public", "Self"}
    assert df["age"].dtype.kind == "i"
    side = json.load(open(out + ".json"))
    assert side["num_samples"] == 1000 and side["lambda_y"] == 0.5
    assert set(side["checkpoints"]) == {"score", "label", "sensitive"}
    assert side["schema_fingerprint"] and side["created"]


def test_sample_fixed_label_and_unguided(trained, tmp_path):
    out = str(tmp_path / "fixed.csv")
    assert run("sample", "--workdir", trained, "--num-samples", 50, "--steps", 10,
               "--label-policy", "fixed:1", "--out", out) == 0
    assert set(pd.read_csv(out)["income"]) == {">50K"}
    out0 = str(tmp_path / "plain.csv")
    assert run("sample", "--workdir", trained, "--num-samples", 50, "--steps", 10,
               "--lambda-y", 0, "--lambda-z", 0, "--out", out0) == 0
    again = str(tmp_path / "plain2.csv")
    run("sample", "--workdir", trained, "--num-samples", 50, "--steps", 10,
        "--lambda-y", 0, "--lambda-z", 0, "--out", again)
    assert open(out0).read() == open(again).read()


def test_sample_bad_requests(trained, tmp_path):
    out = str(tmp_path / "x.csv")
    assert run("sample", "--workdir", trained, "--num-samples", 0, "--out", out) == 2
    assert run("sample", "--workdir", trained, "--label-policy", "fixed:9",
               "--num-samples", 5, "--out", out) == 2


def test_sample_schema_mismatch(tmp_path, toy_csv, toy_schema):
    wd = str(tmp_path)
    prepare(wd, toy_csv, toy_schema)
    assert run("train", "--workdir", wd, "--iterations", 2, *SMALL) == 0
    # re-preparing with different statistics changes the schema fingerprint
    prepare(wd, toy_csv, toy_schema, "--exclude-domain", "east")
    assert run("sample", "--workdir", wd, "--num-samples", 5, "--steps", 5,
               "--out", str(tmp_path / "s.csv")) == 3


@pytest.fixture(scope="module")
def synthetic(trained, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("syn") / "syn.csv")
    assert run("sample", "--workdir", trained, "--num-samples", 400, "--steps", 20,
               "--label-policy", "uniform", "--out", out) == 0
    return out


def test_evaluate_single_and_all(trained, synthetic, tmp_path, capsys):
    rep = str(tmp_path / "rep")
    assert run("evaluate", "--workdir", trained, "--syn", synthetic, *SMALL,
               "--target-domain", "east", "--report", rep) == 0
    lines = open(rep + ".csv").read().splitlines()
    assert lines[0] == "domain,ACC,R_DP,R_EOp"
    assert lines[1].startswith("east,") and lines[-1].startswith("Avg,")
    capsys.readouterr()
    assert run("evaluate", "--workdir", trained, "--syn", synthetic, *SMALL,
               "--all-domains", "--report", rep) == 0
    out = capsys.readouterr().out
    for name in ("north", "south", "east", "Avg"):
        assert name in out
    rows = open(rep + ".csv").read().splitlines()
    assert len(rows) == 5
    for row in rows[1:]:
        for v in row.split(",")[1:]:
            assert v == "nan" or 0.0 <= float(v) <= 1.0


def test_evaluate_unknown_domain(trained, synthetic, capsys):
    assert run("evaluate", "--workdir", trained, "--syn", synthetic,
               "--target-domain", "west") == 2
    err = capsys.readouterr().err
    assert "west" in err and "north" in err and "east" in err


def test_evaluate_single_class_synthetic(trained, tmp_path):
    syn = tmp_path / "one.csv"
    syn.write_text("age,hours,workclass,income\n30,40,Private,<=50K\n40,30,Self,<=50K\n")
    assert run("evaluate", "--workdir", trained, "--syn", str(syn),
               "--target-domain", "east") == 3


def test_lodo(trained, tmp_path, capsys):
    cand = tmp_path / "cand.json"
    cand.write_text(json.dumps([{"meta.beta_y": 0.5}, {"meta.beta_y": 1.0}]))
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert run("lodo", "--workdir", trained, "--candidates", cand, "--budget", 200, *SMALL, *GUIDED,
                   "--set", "lodo.n_samples=200",
                   "--out", out) == 0
        outs.append(out)
    rows = open(outs[0] + ".csv").read().splitlines()
    assert rows[0] == "candidate,heldout_domain,acc" and len(rows) == 7
    text = open(outs[0] + ".txt").read()
    assert "winner: candidate" in text
    assert open(outs[0] + ".csv").read() == open(outs[1] + ".csv").read()
    assert json.load(open(outs[0] + "_winner.json")) == json.load(open(outs[1] + "_winner.json"))


def test_lodo_bad_candidates(trained, tmp_path):
    cand = tmp_path / "cand.json"
    cand.write_text(json.dumps([{"no.such": 1}]))
    assert run("lodo", "--workdir", trained, "--candidates", cand) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_divergence_exit_code(tmp_path, toy_csv, toy_schema, capsys):
    wd = str(tmp_path)
    prepare(wd, toy_csv, toy_schema)
    code = run("train", "--workdir", wd, "--iterations", 5, *SMALL,
               "--set", "meta.gamma_score=1e30", "--set", "meta.alpha_score=1e30")
    assert code == 4
    assert "score" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fairdiff", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("prepare", "train", "sample", "evaluate", "lodo"):
        assert cmd in proc.stdout


def test_usage_error_from_argparse():
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--num-samples", "abc"])
    assert exc.value.code == 2

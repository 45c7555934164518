import csv
import json
import tracemalloc

import numpy as np
import pytest

from factorplan.cli import file_digest, main
from factorplan.config import ConfigError, RunConfig, load_config
from factorplan.model import ModelConfig, init_params
from factorplan.planner import plan
from factorplan.trajectory import FactorizationConfig
from factorplan.vocabulary import PathVocabulary, TrajectoryVocabulary, VelocityVocabulary

from test_model import toy_scene

TINY = [
    "count=3", "test_count=2", "N_p=8", "N_v=4", "stages=[[4,2],[2,2]]", "steps=4", "batch_size=2",
    "near_paths=2", "random_paths=1", "near_vels=1", "random_vels=1", "sim_count=1",
    'ladder=[[4,2],[8,4]]', "scaling_seeds=[0]", "kmeans_iters=20",
]
PIPELINE = ["gen-scenarios", "build-vocab", "teach-cache", "train", "eval", "simulate", "scaling-study"]


def run(cmd, out, *extra):
    args = [cmd, "--out", str(out), "--seed", "3"]
    for kv in TINY + list(extra):
        args += ["--set", kv]
    return main(args)


def digests(out):
    res = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file():
            continue
        if p.name == "scaling.csv":
            rows = list(csv.reader(p.read_text().splitlines()[1:]))
            # wall time is the only field allowed to differ between runs
            res[p.name] = [r[:-1] for r in rows]
        else:
            res[str(p.relative_to(out))] = file_digest(p)
    return res


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    outs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        for cmd in PIPELINE:
            assert run(cmd, out) == 0, cmd
        run("eval", out, "untrained=true")
        outs.append(out)
    return outs


def test_pipeline_artifacts(pipeline_runs):
    out = pipeline_runs[0]
    for name in ("train.jsonl", "test.jsonl", "vocab.json", "labels.jsonl", "checkpoint/params.bin",
                 "eval.json", "eval_untrained.json", "simulate.json", "scaling.csv"):
        assert (out / name).exists(), name
    assert len((out / "train.jsonl").read_text().splitlines()) == 3
    ev = json.loads((out / "eval.json").read_text())
    assert ev["schema"] == "eval/v1"
    assert 0 <= ev["mean_pdms"] <= 1 and 0 <= ev["coarse_recall"] <= 1
    sim = json.loads((out / "simulate.json").read_text())
    assert len(sim["episodes"]) == 2
    lines = (out / "scaling.csv").read_text().splitlines()
    assert lines[0] == "# scaling/v1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 2 and all(all(v != "" for v in r.values()) for r in rows)
    assert {r["fine_candidates"] for r in rows} == {"4"}


def test_pipeline_reproducible(pipeline_runs):
    a, b = (digests(o) for o in pipeline_runs)
    assert a == b


def test_unknown_config_key_rejected(tmp_path, capsys):
    with pytest.raises(ConfigError):
        load_config(None, ["N_q=3"])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["eval", "--config", str(cfg)]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"N_p": 32, "seed": 5}))
    rc = load_config(cfg, ["N_p=48", "stages=[[8,4]]"])
    assert (rc.N_p, rc.seed, rc.stage_config().stages) == (48, 5, ((8, 4),))
    assert json.loads(rc.to_json())["N_p"] == 48


def test_config_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["schema=config/v0"])
    with pytest.raises(ConfigError):
        load_config(None, ["stages=[[4,4],[8,2]]"])
    with pytest.raises(ConfigError):
        load_config(None, ["kinds=[\"highway\"]"])
    assert RunConfig().validate().N_p == 64


def test_missing_artifact_is_an_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "empty")]) == 2
    assert "not found" in capsys.readouterr().err


def test_full_scale_vocabulary_is_lazy():
    cfg = FactorizationConfig()
    rng = np.random.default_rng(0)
    tracemalloc.start()
    k = np.arange(1, cfg.S + 1) * cfg.ds
    h = rng.uniform(-0.4, 0.4, 1024)[:, None]
    vocab = TrajectoryVocabulary(
        PathVocabulary(np.stack([k * np.cos(h), k * np.sin(h)], -1), np.ones((1024, cfg.S), bool), cfg, 0),
        VelocityVocabulary(rng.uniform(0, 12, (256, cfg.horizon_T)), cfg, 0))
    assert vocab.size == 1024 * 256 == 262144
    res = plan(toy_scene(), vocab, init_params(ModelConfig(), cfg.S, cfg.horizon_T))
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert res.counters["fine_candidates"] == 400
    assert peak < 100 * 2**20

"""``factorplan`` command line: corpus, vocabulary, labels, training, evaluation, simulation."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DatasetConfig, flatten, generate_dataset, load_dataset, save_dataset
from .evaluate import ClosedLoopPlanner, evaluate, model_planner, recall_on
from .experiments import SCALING_COLUMNS, build_vocab, scaling_study
from .model import init_params, load_checkpoint, save_checkpoint
from .scene import generate
from .sim import run_episode
from .teacher import pdms_array, teach_arrays
from .train import LabelCache, build_training_set, train
from .vocabulary import coverage_error, load_vocab, save_vocab

EVAL_SCHEMA = "eval/v1"
SIM_SCHEMA = "simulate/v1"
SCALING_SCHEMA = "scaling/v1"
TEST_SEED_OFFSET = 1000


class MissingArtifact(RuntimeError):
    pass


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _path(cfg: RunConfig, explicit, default: str) -> Path:
    return Path(explicit) if explicit else Path(cfg.out) / default


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the producing command first")
    return path


def _dataset_cfg(cfg: RunConfig, count: int, seed: int) -> DatasetConfig:
    return DatasetConfig(count=count, seed=seed, kinds=tuple(cfg.kinds), snapshot_every=cfg.snapshot_every,
                         perturb_speed=cfg.perturb_speed)


def _train_samples(cfg):
    return flatten(load_dataset(_need(_path(cfg, cfg.dataset, "train.jsonl"), "training corpus")))


def _test_samples(cfg):
    return flatten(load_dataset(_need(_path(cfg, cfg.test_dataset, "test.jsonl"), "test corpus")))


def _vocab(cfg):
    return load_vocab(_need(_path(cfg, cfg.vocab, "vocab.json"), "vocabulary"))


def _params(cfg, vocab):
    if cfg.untrained:
        f = vocab.cfg
        return init_params(cfg.model(), f.S, f.horizon_T, cfg.seed)
    return load_checkpoint(_need(_path(cfg, cfg.checkpoint, "checkpoint"), "checkpoint"))


def cmd_gen_scenarios(cfg: RunConfig) -> dict:
    out = _out(cfg)
    fcfg = cfg.factorization()
    report = {}
    for name, count, seed in (("train", cfg.count, cfg.seed), ("test", cfg.test_count, cfg.seed + TEST_SEED_OFFSET)):
        records = generate_dataset(_dataset_cfg(cfg, count, seed), fcfg)
        save_dataset(records, out / f"{name}.jsonl")
        samples = flatten(records)
        # teacher self-check of the expert demonstrations, first snapshot of each scene
        first = [r.samples[0] for r in records if r.samples]
        ok = [pdms_array(teach_arrays(s.expert[None], s.script, s.t0, s.ego, s.dt, cfg.thresholds()))[0] >= 0.9
              for s in first]
        report[name] = {"scenes": len(records), "samples": len(samples), "expert_pdms_ge_0.9": float(np.mean(ok))}
    return report


def cmd_build_vocab(cfg: RunConfig) -> dict:
    samples = _train_samples(cfg)
    vocab = build_vocab(samples, cfg.N_p, cfg.N_v, cfg.factorization(), cfg.seed, cfg.kmeans_iters)
    save_vocab(vocab, _out(cfg) / "vocab.json")
    test_path = _path(cfg, cfg.test_dataset, "test.jsonl")
    held = flatten(load_dataset(test_path)) if test_path.exists() else samples
    cov = coverage_error(vocab, [s.expert_trajectory for s in held])
    return {"N_p": cfg.N_p, "N_v": cfg.N_v, "coverage": {"mean": cov["mean"], "p90": cov["p90"], "n": len(held)}}


def _labels(cfg: RunConfig) -> LabelCache:
    p = _path(cfg, cfg.labels, "labels.jsonl")
    return LabelCache.load(p) if p.exists() else LabelCache()


def cmd_teach_cache(cfg: RunConfig) -> dict:
    samples, vocab = _train_samples(cfg), _vocab(cfg)
    cache = _labels(cfg)
    build_training_set(samples, vocab, cfg.model(), cfg.candidates(), cfg.seed, cache, cfg.thresholds())
    cache.save(_out(cfg) / "labels.jsonl")
    return {"entries": len(cache.entries), "computed": cache.misses, "reused": cache.hits}


def cmd_train(cfg: RunConfig) -> dict:
    samples, vocab = _train_samples(cfg), _vocab(cfg)
    cache = _labels(cfg)
    ts = build_training_set(samples, vocab, cfg.model(), cfg.candidates(), cfg.seed, cache, cfg.thresholds())
    params, log = train(ts, vocab, cfg.model(), cfg.training())
    save_checkpoint(params, _out(cfg) / "checkpoint", log)
    return {"steps": len(log), "first_total": log[0][-1] if log else None, "final_total": log[-1][-1] if log else None,
            "label_cache_hits": cache.hits}


def cmd_eval(cfg: RunConfig) -> dict:
    samples, vocab = _test_samples(cfg), _vocab(cfg)
    params = _params(cfg, vocab)
    stage_cfg = cfg.stage_config()
    rep = evaluate(samples, model_planner(vocab, params, stage_cfg, cfg.beta), cfg.thresholds())
    rec = recall_on(samples, vocab, params, stage_cfg)
    doc = {"schema": EVAL_SCHEMA, **rep.summary(), "coarse_recall": rec["recall"],
           "pdms": rep.pdms.tolist(), "choices": rep.choices}
    name = "eval_untrained.json" if cfg.untrained else "eval.json"
    (_out(cfg) / name).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return {k: doc[k] for k in ("n", "mean_pdms", "mean_epdms", "coarse_recall")}


def simulation_scripts(cfg: RunConfig):
    rng = np.random.default_rng([cfg.seed, 99])
    out = []
    for kind in cfg.sim_kinds:
        for s in rng.integers(0, 2**31 - 1, size=cfg.sim_count):
            out.append(generate(kind, int(s)))
    return out


def cmd_simulate(cfg: RunConfig) -> dict:
    vocab = _vocab(cfg)
    params = _params(cfg, vocab)
    planner = ClosedLoopPlanner(vocab, params, cfg.stage_config(), cfg.beta)
    out = _out(cfg)
    episodes = []
    for script in simulation_scripts(cfg):
        rep = run_episode(script, planner, cfg.replan_hz, cfg.sim_dt)
        episodes.append(rep.to_dict())
        if cfg.write_traces:
            (out / "traces").mkdir(exist_ok=True)
            (out / "traces" / f"{script.id}.csv").write_text(rep.trace_csv())
    by_kind = {}
    for kind in cfg.sim_kinds:
        eps = [e for e in episodes if e["scenario_id"].startswith(kind + "-")]
        by_kind[kind] = {
            "episodes": len(eps),
            "collisions": int(sum(e["collision"] for e in eps)),
            "success_rate": float(np.mean([e["success"] for e in eps])),
            "completion_ge_0.8": int(sum(e["completion"] >= 0.8 for e in eps)),
            "completion_ge_0.9": int(sum(e["completion"] >= 0.9 for e in eps)),
        }
    doc = {"schema": SIM_SCHEMA, "success_rate": float(np.mean([e["success"] for e in episodes])),
           "by_kind": by_kind, "episodes": episodes}
    (out / "simulate.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    return {"success_rate": doc["success_rate"], "by_kind": by_kind}


def cmd_scaling_study(cfg: RunConfig) -> dict:
    train_s, test_s = _train_samples(cfg), _test_samples(cfg)
    pts = scaling_study(train_s, test_s, [tuple(p) for p in cfg.ladder], cfg.stage_config().stages, cfg.model(),
                        cfg.training(), tuple(cfg.scaling_seeds), cfg.candidates(), cfg.seed,
                        log=lambda p: print(json.dumps({"N_p": p.n_p, "N_v": p.n_v, "coverage": p.coverage,
                                                        "pdms": p.pdms}), file=sys.stderr, flush=True))
    path = _out(cfg) / "scaling.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCALING_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCALING_COLUMNS)
        for p in pts:
            w.writerow([repr(x) if isinstance(x, float) else x for x in p.row()])
    return {"rows": len(pts), "csv": str(path)}


COMMANDS = {
    "gen-scenarios": cmd_gen_scenarios,
    "build-vocab": cmd_build_vocab,
    "teach-cache": cmd_teach_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "scaling-study": cmd_scaling_study,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factorplan", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    try:
        cfg = load_config(args.config, overrides)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, MissingArtifact, ValueError, OSError, RuntimeError) as exc:
        print(f"factorplan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, indent=1))
    return 0


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


if __name__ == "__main__":
    sys.exit(main())

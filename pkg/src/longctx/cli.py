"""Command-line entry point tying the pipeline together.

One binary, subcommand style. Every command reads an optional JSON config
file (``--config``), applies flag overrides, and writes the fully resolved
configuration as ``<command>_config.json`` next to its outputs, so any run
can be reproduced byte-for-byte from its snapshot:

    longctx train --config run/train_config.json --out run2

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numerical abort.
The default seed comes from the LONGCTX_SEED environment variable (else 0);
a config file or --seed flag overrides it. Input paths are resolved
relative to the current directory; the output directory is not part of the
snapshot so reruns can land elsewhere.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .data import filter_docs, make_corpus, qa_examples_from_corpus, CorpusConfig, Document
from .model import ModelConfig, Transformer
from .needle import MultiNeedleConfig, OracleModel, RandomDigitModel, grid_eval
from .packing import Example, default_special_tokens, pack_stream
from .rope import REFERENCE_SCHEDULE, TOY_SCHEDULE
from .shards import read_shard, write_manifest, write_packed, write_shard
from .tasks import (cfg_frequency_sweep, default_needle_plans, reference_plans,
                    train_cfg_model, train_needle_model)
from .trainer import (GreedyGenerator, StagePlan, TrainAbort, fixed_clock,
                      load_checkpoint, validate_plans)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _default_seed() -> int:
    raw = os.environ.get("LONGCTX_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LONGCTX_SEED must be an integer, got {raw!r}")


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _resolve(command: str, defaults: dict, file_cfg: dict, overrides: dict) -> dict:
    if not isinstance(file_cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    got = file_cfg.get("command")
    if got not in (None, command):
        raise ConfigError(f"config file is for command {got!r}, not {command!r}")
    unknown = sorted(set(file_cfg) - set(defaults) - {"command", "schema_version"})
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = dict(defaults)
    cfg.update({k: v for k, v in file_cfg.items() if k in defaults})
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _snapshot(out_dir: str, slug: str, cfg: dict) -> str:
    path = os.path.join(out_dir, f"{slug}_config.json")
    _write_json(path, {"schema_version": SCHEMA_VERSION, "command": slug, **cfg})
    return path


def _docs_from_shard(path) -> list:
    return [Document(id=f"doc{i:05d}", tokens=list(ex.tokens))
            for i, ex in enumerate(read_shard(path))]


# --- command implementations --------------------------------------------


def _plans_from_config(cfg) -> tuple:
    """(plans, theta schedule) from either an explicit stage list or a preset."""
    if cfg["stages"] is not None:
        plans = []
        for d in cfg["stages"]:
            d = dict(d)
            if d.get("data_filter") is not None:
                d["data_filter"] = tuple(d["data_filter"])
            plans.append(StagePlan(**d))
    elif cfg["preset"] == "toy":
        plans = default_needle_plans(cfg["steps_scale"])
    elif cfg["preset"] == "reference":
        plans = reference_plans()
    else:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    schedule_name = cfg["theta_schedule"]
    if schedule_name is None:
        schedule_name = "reference" if cfg["preset"] == "reference" else "toy"
    if schedule_name not in ("toy", "reference"):
        raise ConfigError(f"unknown theta schedule {schedule_name!r}")
    schedule = REFERENCE_SCHEDULE if schedule_name == "reference" else TOY_SCHEDULE
    return plans, schedule


def cmd_stages_plan(cfg: dict, out_dir: str) -> int:
    plans, schedule = _plans_from_config(cfg)
    validate_plans(plans)
    thetas = [plan.resolve_theta(schedule) for plan in plans]
    for prev, cur in zip(thetas, thetas[1:]):
        if cur < prev:
            raise ConfigError(f"rotary base must not shrink across stages: {prev} -> {cur}")
    rows = []
    for plan, theta in zip(plans, thetas):
        rows.append({**plan.to_dict(), "rope_theta": theta, "steps": plan.steps})
    _write_json(os.path.join(out_dir, "stages.json"),
                {"schema_version": SCHEMA_VERSION, "stages": rows})
    header = f"{'stage':>8} {'seq_len':>9} {'rope_theta':>12} {'batch_tokens':>12} {'total_tokens':>13} {'steps':>6}"
    print(header)
    for r in rows:
        print(f"{r['name']:>8} {r['seq_len']:>9} {r['rope_theta']:>12.6g} "
              f"{r['tokens_per_batch']:>12} {r['total_tokens']:>13} {r['steps']:>6}")
    print(f"wrote {os.path.join(out_dir, 'stages.json')}")
    return EXIT_OK


def cmd_data_synth_corpus(cfg: dict, out_dir: str) -> int:
    corpus = make_corpus(CorpusConfig(
        num_docs=cfg["num_docs"], min_len=cfg["min_len"], max_len=cfg["max_len"],
        mean_fact_gap=cfg["mean_fact_gap"], seed=cfg["seed"],
    ))
    examples = [Example(context_tokens=tuple(doc.tokens), answer_tokens=())
                for doc in corpus]
    shard = os.path.join(out_dir, "corpus.shard")
    write_shard(shard, examples)
    write_manifest(os.path.join(out_dir, "corpus_manifest.jsonl"), examples)
    total = sum(len(ex) for ex in examples)
    print(f"wrote {shard}: {len(examples)} documents, {total} tokens")
    return EXIT_OK


def cmd_data_filter(cfg: dict, out_dir: str) -> int:
    docs = _docs_from_shard(cfg["in_shard"])
    kept = filter_docs(docs, cfg["min_len"], cfg["max_len"])
    examples = [Example(context_tokens=tuple(doc.tokens), answer_tokens=())
                for doc in kept]
    shard = os.path.join(out_dir, "filtered.shard")
    write_shard(shard, examples)
    write_manifest(os.path.join(out_dir, "filtered_manifest.jsonl"), examples)
    print(f"wrote {shard}: kept {len(kept)} of {len(docs)} documents "
          f"(bounds {cfg['min_len']}..{cfg['max_len']})")
    return EXIT_OK


def cmd_data_qa_gen(cfg: dict, out_dir: str) -> int:
    docs = _docs_from_shard(cfg["in_shard"])
    examples = qa_examples_from_corpus(
        docs, chunk_len=cfg["chunk_len"], target_len=cfg["target_len"],
        qa_pairs=cfg["qa_pairs"], seed=cfg["seed"], max_examples=cfg["max_examples"],
    )
    shard = os.path.join(out_dir, "qa.shard")
    write_shard(shard, examples)
    write_manifest(os.path.join(out_dir, "qa_manifest.jsonl"), examples)
    if examples:
        worst = max(ex.loss_token_count / len(ex) for ex in examples)
        print(f"wrote {shard}: {len(examples)} examples, "
              f"max loss-token fraction {worst:.6f}")
    else:
        print(f"wrote {shard}: 0 examples")
    return EXIT_OK


def cmd_data_pack(cfg: dict, out_dir: str) -> int:
    examples = read_shard(cfg["in_shard"])
    sp = default_special_tokens()
    sequences = pack_stream(examples, cfg["seq_len"], sp)
    path = os.path.join(out_dir, "packed.bin")
    write_packed(path, sequences)
    with open(os.path.join(out_dir, "packed_manifest.jsonl"), "w") as f:
        for i, seq in enumerate(sequences):
            rec = {
                "index": i, "length": len(seq), "examples": seq.example_count,
                "loss_tokens": int(seq.loss_mask.sum()),
                "weight_sum": float(seq.loss_weights.sum()),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {path}: {len(sequences)} sequences of {cfg['seq_len']} tokens "
          f"from {len(examples)} examples")
    return EXIT_OK


def _np_dtype(name: str):
    if name not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {name!r}")
    return np.float32 if name == "float32" else np.float64


def cmd_train(cfg: dict, out_dir: str) -> int:
    dtype = _np_dtype(cfg["dtype"])
    parallelism = cfg["parallelism"]
    if not isinstance(parallelism, int) or parallelism < 1:
        raise ConfigError(f"parallelism must be a positive integer, got {parallelism!r}")
    parallelism = "single" if parallelism == 1 else parallelism
    clock = fixed_clock() if cfg["clock"] == "fixed" else None
    if cfg["clock"] not in ("fixed", "wall"):
        raise ConfigError(f"clock must be 'fixed' or 'wall', got {cfg['clock']!r}")

    if cfg["task"] == "needle":
        plans = default_needle_plans(cfg["steps_scale"])
        validate_plans(plans)
        if cfg["dry_run"]:
            total = sum(p.steps for p in plans)
            print(f"dry run: {len(plans)} stages, {total} steps total; snapshot only")
            return EXIT_OK
        _, ckpts, metrics = train_needle_model(
            out_dir=out_dir, seed=cfg["seed"], plans=plans, dtype=dtype,
            multi_fraction=cfg["multi_fraction"], parallelism=parallelism,
            clock=clock,
        )
        for name in ckpts:
            last = metrics[name][-1].loss if metrics[name] else float("nan")
            print(f"stage {name}: {len(metrics[name])} steps, final loss {last:.6f}")
    elif cfg["task"] == "guidance":
        if cfg["dry_run"]:
            print(f"dry run: 1 stage, {cfg['steps']} steps; snapshot only")
            return EXIT_OK
        _, _, metrics = train_cfg_model(seed=cfg["seed"], steps=cfg["steps"],
                                        dtype=dtype, out_dir=out_dir,
                                        parallelism=parallelism, clock=clock)
        last = metrics[-1].loss if metrics else float("nan")
        print(f"stage guidance: {len(metrics)} steps, final loss {last:.6f}")
    else:
        raise ConfigError(f"unknown task {cfg['task']!r}")
    return EXIT_OK


def _eval_model(spec, theta_override=None):
    if spec == "oracle":
        return OracleModel()
    if spec == "random":
        return RandomDigitModel()
    ckpt = load_checkpoint(spec)
    model = Transformer(ModelConfig(**ckpt.config),
                        dtype=ckpt.params["embed"].dtype, seed=0)
    model.load_state(ckpt.params)
    theta = theta_override if theta_override is not None else ckpt.rope_theta
    return GreedyGenerator(model, theta=theta)


def _cell_eval(cfg: dict, out_dir: str, ncfg: MultiNeedleConfig, slug: str) -> int:
    model = _eval_model(cfg["model"], cfg["rope_theta"])
    rows = grid_eval(model, [cfg["depth"]], [cfg["length"]], cfg["trials"], ncfg,
                     cfg["seed"],
                     jsonl_path=os.path.join(out_dir, f"{slug}_records.jsonl"))
    row = rows[0]
    _write_json(os.path.join(out_dir, f"{slug}.json"), {
        "schema_version": SCHEMA_VERSION, "depth": row["depth"],
        "length": row["length"], "trials": row["trials"],
        "needles": ncfg.N, "requested": ncfg.R, "score": row["score"],
    })
    print(f"{slug}: depth {row['depth']} length {row['length']} "
          f"score {row['score']:.4f} over {row['trials']} trials")
    return EXIT_OK


def cmd_eval_needle(cfg: dict, out_dir: str) -> int:
    return _cell_eval(cfg, out_dir, MultiNeedleConfig(N=1, R=1), "eval_needle")


def cmd_eval_multi_needle(cfg: dict, out_dir: str) -> int:
    ncfg = MultiNeedleConfig(N=cfg["needles"], R=cfg["requested"])
    return _cell_eval(cfg, out_dir, ncfg, "eval_multi_needle")


def cmd_eval_grid(cfg: dict, out_dir: str) -> int:
    model = _eval_model(cfg["model"], cfg["rope_theta"])
    ncfg = MultiNeedleConfig(N=cfg["needles"], R=cfg["requested"])
    rows = grid_eval(model, cfg["depths"], cfg["lengths"], cfg["trials"], ncfg,
                     cfg["seed"], csv_path=os.path.join(out_dir, "grid.csv"),
                     jsonl_path=os.path.join(out_dir, "grid_records.jsonl"))
    scores = [r["score"] for r in rows]
    print(f"grid: {len(rows)} cells, min score {min(scores):.4f}, "
          f"mean {float(np.mean(scores)):.4f}")
    print(f"wrote {os.path.join(out_dir, 'grid.csv')}")
    return EXIT_OK


def cmd_guidance_sweep(cfg: dict, out_dir: str) -> int:
    spec = cfg["model"]
    if spec in ("oracle", "random"):
        raise ConfigError("guidance sweep needs a trained checkpoint")
    ckpt = load_checkpoint(spec)
    model = Transformer(ModelConfig(**ckpt.config),
                        dtype=ckpt.params["embed"].dtype, seed=0)
    model.load_state(ckpt.params)
    theta = cfg["rope_theta"] if cfg["rope_theta"] is not None else ckpt.rope_theta
    freqs = cfg_frequency_sweep(model, cfg["scales"], samples=cfg["samples"],
                                seed=cfg["seed"], theta=theta)
    _write_json(os.path.join(out_dir, "guidance_sweep.json"), {
        "schema_version": SCHEMA_VERSION,
        "frequencies": {str(s): f for s, f in freqs.items()},
    })
    for s in cfg["scales"]:
        print(f"scale {s}: conditional-class frequency {freqs[float(s)]:.4f}")
    return EXIT_OK


def cmd_report(cfg: dict, out_dir: str) -> int:
    with open(cfg["grid_csv"], newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["depth", "length", "score", "trials"]:
            raise ConfigError(f"{cfg['grid_csv']} is not a grid CSV (header {header})")
        rows = [row for row in reader if row]
    path = os.path.join(out_dir, "heatmap.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["depth", "length", "score"])
        for row in rows:
            w.writerow(row[:3])
    print(f"wrote {path}: {len(rows)} cells")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


_COMMANDS = {}


def _register(key, slug, defaults, runner):
    _COMMANDS[key] = (slug, defaults, runner)


_register("stages-plan", "stages_plan",
          {"preset": "toy", "steps_scale": 1.0, "stages": None, "theta_schedule": None},
          cmd_stages_plan)
_register("data/synth-corpus", "data_synth_corpus",
          {"num_docs": 64, "min_len": 64, "max_len": 8192, "mean_fact_gap": 48,
           "seed": None},
          cmd_data_synth_corpus)
_register("data/filter", "data_filter",
          {"in_shard": "corpus.shard", "min_len": 64, "max_len": None},
          cmd_data_filter)
_register("data/qa-gen", "data_qa_gen",
          {"in_shard": "corpus.shard", "chunk_len": 512, "target_len": 4096,
           "qa_pairs": 3, "max_examples": None, "seed": None},
          cmd_data_qa_gen)
_register("data/pack", "data_pack",
          {"in_shard": "qa.shard", "seq_len": 4096},
          cmd_data_pack)
_register("train", "train",
          {"task": "needle", "steps_scale": 1.0, "steps": 120, "dtype": "float32",
           "parallelism": 1, "clock": "fixed", "multi_fraction": 0.25,
           "dry_run": False, "seed": None},
          cmd_train)
_register("eval/needle", "eval_needle",
          {"model": "oracle", "depth": 0.5, "length": 512, "trials": 8,
           "rope_theta": None, "seed": None},
          cmd_eval_needle)
_register("eval/multi-needle", "eval_multi_needle",
          {"model": "oracle", "depth": 0.5, "length": 2048, "trials": 8,
           "needles": 4, "requested": 2, "rope_theta": None, "seed": None},
          cmd_eval_multi_needle)
_register("eval/grid", "eval_grid",
          {"model": "oracle", "depths": [0.0, 0.25, 0.5, 0.75, 1.0],
           "lengths": [256, 512, 1024, 2048], "trials": 8, "needles": 1,
           "requested": 1, "rope_theta": None, "seed": None},
          cmd_eval_grid)
_register("eval/guidance-sweep", "eval_guidance_sweep",
          {"model": "guidance.ckpt", "scales": [0.0, 1.0, 3.0], "samples": 20,
           "rope_theta": None, "seed": None},
          cmd_guidance_sweep)
_register("report", "report",
          {"grid_csv": "grid.csv"},
          cmd_report)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="JSON config file; flags override its values")
    common.add_argument("--out", metavar="DIR", default=".",
                        help="output directory (created if missing; default .)")

    parser = argparse.ArgumentParser(
        prog="longctx",
        description="Long-context training toolkit: stage planning, synthetic "
                    "data, packing, training, retrieval evaluation, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stages-plan", parents=[common],
                       help="validate and print a progressive stage table")
    p.add_argument("--preset", choices=["toy", "reference"])
    p.add_argument("--steps-scale", type=float, dest="steps_scale")
    p.add_argument("--theta-schedule", choices=["toy", "reference"],
                   dest="theta_schedule")

    data = sub.add_parser("data", help="corpus synthesis, filtering, QA "
                                       "assembly, packing")
    dsub = data.add_subparsers(dest="data_command", required=True)
    p = dsub.add_parser("synth-corpus", parents=[common],
                        help="generate the synthetic fact-planted corpus")
    p.add_argument("--num-docs", type=int, dest="num_docs")
    p.add_argument("--min-len", type=int, dest="min_len")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--mean-fact-gap", type=int, dest="mean_fact_gap")
    p.add_argument("--seed", type=int)
    p = dsub.add_parser("filter", parents=[common],
                        help="keep documents inside a length band")
    p.add_argument("--in-shard", dest="in_shard")
    p.add_argument("--min-len", type=int, dest="min_len")
    p.add_argument("--max-len", type=int, dest="max_len")
    p = dsub.add_parser("qa-gen", parents=[common],
                        help="assemble long examples with chat QA turns")
    p.add_argument("--in-shard", dest="in_shard")
    p.add_argument("--chunk-len", type=int, dest="chunk_len")
    p.add_argument("--target-len", type=int, dest="target_len")
    p.add_argument("--qa-pairs", type=int, dest="qa_pairs")
    p.add_argument("--max-examples", type=int, dest="max_examples")
    p.add_argument("--seed", type=int)
    p = dsub.add_parser("pack", parents=[common],
                        help="pack examples into fixed-length sequences")
    p.add_argument("--in-shard", dest="in_shard")
    p.add_argument("--seq-len", type=int, dest="seq_len")

    p = sub.add_parser("train", parents=[common],
                       help="run a training task (needle curriculum or "
                            "guidance toy)")
    p.add_argument("--task", choices=["needle", "guidance"])
    p.add_argument("--steps-scale", type=float, dest="steps_scale")
    p.add_argument("--steps", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--parallelism", type=int)
    p.add_argument("--clock", choices=["fixed", "wall"])
    p.add_argument("--multi-fraction", type=float, dest="multi_fraction")
    p.add_argument("--dry-run", action="store_const", const=True, default=None,
                   dest="dry_run")
    p.add_argument("--seed", type=int)

    ev = sub.add_parser("eval", help="retrieval and guidance evaluations")
    esub = ev.add_subparsers(dest="eval_command", required=True)
    for name, extra in (("needle", ()), ("multi-needle", ("needles", "requested"))):
        p = esub.add_parser(name, parents=[common],
                            help=f"score one {name} cell")
        p.add_argument("--model", help="oracle, random, or a checkpoint path")
        p.add_argument("--depth", type=float)
        p.add_argument("--length", type=int)
        p.add_argument("--trials", type=int)
        for field in extra:
            p.add_argument(f"--{field}", type=int)
        p.add_argument("--rope-theta", type=float, dest="rope_theta")
        p.add_argument("--seed", type=int)
    p = esub.add_parser("grid", parents=[common],
                        help="score the full depth x length grid")
    p.add_argument("--model", help="oracle, random, or a checkpoint path")
    p.add_argument("--depths", type=_floats)
    p.add_argument("--lengths", type=_ints)
    p.add_argument("--trials", type=int)
    p.add_argument("--needles", type=int)
    p.add_argument("--requested", type=int)
    p.add_argument("--rope-theta", type=float, dest="rope_theta")
    p.add_argument("--seed", type=int)
    p = esub.add_parser("guidance-sweep", parents=[common],
                        help="conditional-class frequency across guidance scales")
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--scales", type=_floats)
    p.add_argument("--samples", type=int)
    p.add_argument("--rope-theta", type=float, dest="rope_theta")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", parents=[common],
                       help="emit a plot-ready CSV from a grid evaluation")
    p.add_argument("--grid-csv", dest="grid_csv")

    return parser


def _command_key(args) -> str:
    if args.command == "data":
        return f"data/{args.data_command}"
    if args.command == "eval":
        return f"eval/{args.eval_command}"
    return args.command


def run(args) -> int:
    key = _command_key(args)
    slug, defaults, runner = _COMMANDS[key]
    file_cfg = {}
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
    overrides = {k: getattr(args, k) for k in defaults if hasattr(args, k)}
    cfg = _resolve(slug, defaults, file_cfg, overrides)
    if "seed" in cfg and cfg["seed"] is None:
        cfg["seed"] = _default_seed()
    os.makedirs(args.out, exist_ok=True)
    _snapshot(args.out, slug, cfg)
    return runner(cfg, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 1
        return EXIT_OK if code == 0 else EXIT_VALIDATION
    try:
        return run(args)
    except TrainAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: gen-data, train, predict, evaluate, ablate.

Configs are JSON files with a schema_version field; a handful of scalar
flags override file values (flag > file > default). Every command is
deterministic given its config and seed. Exit codes: 0 success, 2 for
configuration or data problems, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoints import (checkpoint_content_hash, load_adapter_bank,
                          load_model, save_adapter_bank, save_model)
from .data import (Splits, SynthConfig, gen_synthetic, level_prompts,
                   parse_dataset, write_dataset)
from .errors import ConfigError, DataError, HieroLoraError, NumericError
from .evaluation import (AblationSetup, ablate_joint_vs_separate, ablate_lambda,
                         ablate_rank, evaluate_predictions)
from .hierarchy import (AdapterBank, predict_hierarchical, prediction_record,
                        read_predictions, write_predictions)
from .lora import LoraConfig
from .model import ModelConfig, build_model
from .training import TrainConfig, train_all

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _from_dict(cls, payload: dict, where: str):
    fields = set(cls.__dataclass_fields__)
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version}")
    if "seed" not in cfg:
        raise ConfigError(f"{path}: a top-level seed is mandatory")
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "rank", None) is not None:
        cfg.setdefault("lora", {})["rank"] = args.rank
        cfg["lora"]["alpha"] = float(args.rank)
    if getattr(args, "lam", None) is not None:
        cfg.setdefault("train", {})["lam"] = args.lam
    if getattr(args, "max_steps", None) is not None:
        cfg.setdefault("train", {})["max_steps"] = args.max_steps
    if getattr(args, "lr", None) is not None:
        cfg.setdefault("train", {})["learning_rate"] = args.lr
    return cfg


def _typed_configs(cfg: dict):
    seed = int(cfg["seed"])
    model_cfg = _from_dict(ModelConfig, cfg.get("model", {}), "model")
    lora_payload = dict(cfg.get("lora", {}))
    lora_payload.setdefault("seed", seed)
    lora_cfg = _from_dict(LoraConfig, lora_payload, "lora")
    train_payload = dict(cfg.get("train", {}))
    train_payload.setdefault("seed", seed)
    train_cfg = _from_dict(TrainConfig, train_payload, "train")
    granularity = cfg.get("hierarchy", {}).get("granularity", "per-level")
    if "lam" in cfg.get("hierarchy", {}):
        train_cfg = replace(train_cfg, lam=float(cfg["hierarchy"]["lam"]))
    return seed, model_cfg, lora_cfg, train_cfg, granularity


def _synth_config(cfg: dict) -> SynthConfig:
    if "synth" not in cfg:
        raise ConfigError("config needs a 'synth' section")
    payload = dict(cfg["synth"])
    payload.setdefault("seed", int(cfg["seed"]))
    return _from_dict(SynthConfig, payload, "synth")


def _load_splits(cfg: dict) -> Splits:
    if "data" in cfg:
        paths = cfg["data"]
        for key in ("train", "dev"):
            if key not in paths:
                raise ConfigError(f"data section needs a {key!r} path")
            if not Path(paths[key]).exists():
                raise DataError(f"dataset path does not exist: {paths[key]}")
        test = paths.get("test")
        if test is not None and not Path(test).exists():
            raise DataError(f"dataset path does not exist: {test}")
        return Splits(parse_dataset(paths["train"]),
                      parse_dataset(paths["dev"]),
                      parse_dataset(test) if test else [])
    splits, _ = gen_synthetic(_synth_config(cfg))
    return splits


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir: Path, cfg: dict, extra: dict) -> None:
    manifest = {
        "tool_version": __version__,
        "config_hash": _config_hash(cfg),
        "seed": cfg["seed"],
        **extra,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    synth_cfg = _synth_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits, meta = gen_synthetic(synth_cfg)
    for name, instances in zip(("train", "dev", "test"), splits):
        write_dataset(instances, out / f"{name}.jsonl")
    manifest = {"config_hash": _config_hash(cfg), "seed": cfg["seed"],
                **meta.as_manifest()}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(splits.train)} train / {len(splits.dev)} dev / "
          f"{len(splits.test)} test instances to {out}")
    return 0


def cmd_train(args) -> int:
    from . import report

    cfg = _apply_overrides(load_config(args.config), args)
    seed, model_cfg, lora_cfg, train_cfg, granularity = _typed_configs(cfg)
    splits = _load_splits(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(model_cfg, seed=seed)
    bank = AdapterBank.build(model.layer_dims(), lora_cfg, granularity,
                             dtype=model_cfg.dtype)
    logs = train_all(model, bank, splits, train_cfg)

    save_model(model, out / "model.npz")
    save_adapter_bank(bank, lora_cfg, out / "adapters.npz", model)
    with open(out / "trainlog.jsonl", "w", encoding="utf-8") as fh:
        for level, log in sorted(logs.items()):
            for event in log.steps:
                fh.write(json.dumps({"kind": "step", "level": level, **event}) + "\n")
            for event in log.evals:
                fh.write(json.dumps({"kind": "eval", "level": level, **event}) + "\n")
            fh.write(json.dumps({
                "kind": "done", "level": level, "stop_reason": log.stop_reason,
                "best_step": log.best_step, "wall_seconds": log.wall_seconds}) + "\n")
    report.fig_training_curves(logs, out / "loss_curves.png")
    hashes = {"model": checkpoint_content_hash(out / "model.npz"),
              "adapters": checkpoint_content_hash(out / "adapters.npz")}
    _write_manifest(out, cfg, {
        "checkpoint_hashes": hashes,
        "stop_reasons": {lvl: log.stop_reason for lvl, log in logs.items()},
    })
    print(f"trained 3 levels; checkpoints and logs in {out}")
    print(f"model hash    {hashes['model']}")
    print(f"adapters hash {hashes['adapters']}")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_model(ckpt / "model.npz")
    bank, _ = load_adapter_bank(ckpt / "adapters.npz", model)
    instances = parse_dataset(args.infile, require_labels=False)
    records = []
    for inst in instances:
        prompts = level_prompts(inst, max_seq=model.cfg.max_seq)
        pred = predict_hierarchical(model, bank, prompts)
        records.append(prediction_record(inst.id, pred))
    write_predictions(records, args.out)
    print(f"wrote {len(records)} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from . import report

    records = read_predictions(args.pred)
    gold = parse_dataset(args.gold)
    metric_report = evaluate_predictions(records, gold)
    rows = metric_report.rows()
    if args.metric == "f1":
        rows = [{k: v for k, v in row.items() if not k.endswith("_icm")} for row in rows]
    elif args.metric == "icm":
        rows = [{k: v for k, v in row.items() if not k.endswith("_macro_f1")}
                for row in rows]
    print(report.format_table(rows), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.save_json({"per_language": metric_report.per_language,
                          "overall": metric_report.overall,
                          "config": metric_report.config}, out / "report.json")
        report.save_table(metric_report.rows(), out / "report.tsv")
        (out / "report.txt").write_text(report.format_table(metric_report.rows()),
                                        encoding="utf-8")
        report.fig_metric_report(metric_report.rows(), out / "report.png")
    return 0


def cmd_ablate(args) -> int:
    from . import report

    cfg = _apply_overrides(load_config(args.config), args)
    seed, model_cfg, lora_cfg, train_cfg, granularity = _typed_configs(cfg)
    ab = cfg.get("ablation", {})
    setup = AblationSetup(
        gen=_synth_config(cfg), model=model_cfg, lora=lora_cfg, train=train_cfg,
        levels=tuple(ab.get("levels", [1])), granularity=granularity)
    seeds = [int(s) for s in ab.get("seeds", [seed])]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "joint-vs-separate":
        result = ablate_joint_vs_separate(setup, seeds)
        rows = result["rows"]
        report.fig_joint_vs_separate(rows, out / "joint_vs_separate.png")
    elif args.mode == "rank":
        ranks = [int(r) for r in ab.get("ranks", [8, 16, 32, 64])]
        rows = ablate_rank(ranks, setup)
        result = {"rows": rows, "ranks": ranks}
        report.fig_rank_ablation(rows, out / "rank_ablation.png")
    elif args.mode == "lambda":
        lams = [float(x) for x in ab.get("lams", [0.0, 0.1])]
        result = ablate_lambda(lams, setup, seeds)
        rows = result["rows"]
        report.fig_lambda_ablation(rows, out / "lambda_ablation.png")
    else:  # unreachable behind argparse choices; kept for direct calls
        raise ConfigError(f"unknown ablation mode {args.mode!r}")

    report.save_table(rows, out / "table.tsv")
    (out / "table.txt").write_text(report.format_table(rows), encoding="utf-8")
    report.save_json(result, out / "report.json")
    _write_manifest(out, cfg, {"mode": args.mode, "seeds": seeds})
    print(report.format_table(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiero-lora",
        description="Hierarchical label-aware LoRA: data, training, prediction, "
                    "evaluation, ablations.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--rank", type=int, help="override adapter rank (alpha follows)")
        p.add_argument("--lam", type=float, help="override the hierarchy weight")
        p.add_argument("--max-steps", type=int, dest="max_steps")
        p.add_argument("--lr", type=float, help="override the learning rate")

    p = sub.add_parser("gen-data", help="generate the synthetic bilingual corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train all three per-subtask adapters")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="hierarchical prediction over a dataset")
    p.add_argument("--checkpoint", required=True,
                   help="directory containing model.npz and adapters.npz")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against gold labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--metric", choices=["icm", "f1", "all"], default="all")
    p.add_argument("--out", help="directory for report files and figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation harness")
    p.add_argument("--mode", choices=["joint-vs-separate", "rank", "lambda"],
                   required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except HieroLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

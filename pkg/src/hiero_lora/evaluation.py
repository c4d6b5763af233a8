"""Metrics (information-contrast score over the label hierarchy, macro F1),
the joint-vs-separate bilingual ablation, the rank ablation, the hierarchy
weight ablation, and the efficiency report.

The information-contrast score compares predicted and gold label sets via
their information content under corpus statistics:
    score(P, G) = a1*IC(P) + a2*IC(G) - b*IC(P | G),
with IC(S) = -log2 Pr(S) and defaults a1 = a2 = 2, b = 3, so a perfect
prediction scores exactly IC(G).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Instance, Splits, SynthConfig, format_prompt, gen_synthetic
from .errors import ConfigError, ContractError, DataError
from .hierarchy import (LEVEL2, LEVEL3, NOT_SEXIST, SEXIST, AdapterBank,
                        Taxonomy, predict_hierarchical, raw_child_probs, route)
from .lora import LoraConfig, count_trainable
from .model import ModelConfig, arch_listing, build_model
from .training import TrainConfig, train_all, train_subtask

_ALL_LABELS = set(Taxonomy.labels(1)) | set(Taxonomy.labels(2)) | set(Taxonomy.labels(3))


def worker_count() -> int:
    """Parallelism cap for ablation legs; default 1 keeps runs deterministic."""
    raw = os.environ.get("HIERO_LORA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HIERO_LORA_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# information-contrast measure
# ---------------------------------------------------------------------------

def close_label_set(labels) -> frozenset[str]:
    """Add the implied level-1 ancestor when child labels are present."""
    s = frozenset(labels)
    bad = s - _ALL_LABELS
    if bad:
        raise DataError(f"labels outside the taxonomy: {sorted(bad)}")
    if s & (set(LEVEL2) | set(LEVEL3)):
        s = s | {SEXIST}
    return s


class GoldStats:
    """Joint label-set occurrence probabilities from a gold corpus.

    Pr(S) = (#instances whose closed gold set contains S + s) / (N + 2s)
    with additive smoothing s, so probabilities stay inside (0, 1) and
    supersets can never be more probable than their subsets.
    """

    def __init__(self, closures: list[frozenset[str]], smoothing: float = 0.5):
        if not closures:
            raise DataError("gold statistics need at least one instance")
        if smoothing <= 0:
            raise ConfigError("smoothing must be positive")
        self.closures = closures
        self.smoothing = smoothing
        self._cache: dict[frozenset, float] = {}

    @classmethod
    def from_instances(cls, instances: list[Instance], smoothing: float = 0.5) -> "GoldStats":
        return cls([full_label_set(inst) for inst in instances], smoothing)

    def probability(self, labels) -> float:
        s = close_label_set(labels)
        hit = self._cache.get(s)
        if hit is None:
            count = sum(1 for c in self.closures if s <= c)
            hit = (count + self.smoothing) / (len(self.closures) + 2 * self.smoothing)
            self._cache[s] = hit
        return hit

    def information(self, labels) -> float:
        return -float(np.log2(self.probability(labels)))


def icm(pred_labels, gold_labels, stats: GoldStats,
        a1: float = 2.0, a2: float = 2.0, b: float = 3.0) -> float:
    """Information-contrast score of one prediction against its gold set."""
    gold = close_label_set(gold_labels)
    if not gold:
        raise DataError("gold label set must be nonempty")
    pred = close_label_set(pred_labels)
    return (a1 * stats.information(pred) + a2 * stats.information(gold)
            - b * stats.information(pred | gold))


def icm_dataset(preds, golds, stats: GoldStats, **kw) -> float:
    if len(preds) != len(golds) or not preds:
        raise ContractError("icm_dataset needs nonempty aligned lists")
    return float(np.mean([icm(p, g, stats, **kw) for p, g in zip(preds, golds)]))


# ---------------------------------------------------------------------------
# label-set views per subtask
# ---------------------------------------------------------------------------

def full_label_set(inst: Instance) -> frozenset[str]:
    """The instance's complete gold closure across all three levels."""
    if inst.gold_l1 == NOT_SEXIST:
        return frozenset({NOT_SEXIST})
    return frozenset({SEXIST, inst.gold_l2}) | inst.gold_l3


def gold_label_set(inst: Instance, subtask: int) -> frozenset[str]:
    if inst.gold_l1 == NOT_SEXIST:
        return frozenset({NOT_SEXIST})
    if subtask == 1:
        return frozenset({SEXIST})
    if subtask == 2:
        return frozenset({SEXIST, inst.gold_l2})
    return frozenset({SEXIST}) | inst.gold_l3


def pred_label_set(record: dict, subtask: int) -> frozenset[str]:
    l1 = record["label_task1"]
    if l1 == NOT_SEXIST:
        return frozenset({NOT_SEXIST})
    if subtask == 1:
        return frozenset({SEXIST})
    if subtask == 2:
        l2 = record["label_task2"]
        return frozenset({SEXIST}) if l2 == "-" else frozenset({SEXIST, l2})
    l3 = record["labels_task3"]
    return frozenset({SEXIST}) | (frozenset() if l3 == "-" else frozenset(l3))


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------

def f1_scores(preds, golds, level: int) -> dict:
    """Per-class and unweighted macro F1.

    Levels 1-2 take label strings (None = level absent); level 3 takes label
    sets scored per category. A class with neither predictions nor golds gets
    F1 = 0 and is counted in the `undefined` flag.
    """
    if not preds or not golds:
        raise ContractError("f1_scores needs nonempty prediction/gold lists")
    if len(preds) != len(golds):
        raise ContractError(f"length mismatch: {len(preds)} preds vs {len(golds)} golds")
    classes = Taxonomy.labels(level)
    per_class: dict[str, float] = {}
    undefined = 0
    for c in classes:
        if level == 3:
            hits = [(c in (p or ()), c in (g or ())) for p, g in zip(preds, golds)]
        else:
            hits = [(p == c, g == c) for p, g in zip(preds, golds)]
        tp = sum(1 for hp, hg in hits if hp and hg)
        fp = sum(1 for hp, hg in hits if hp and not hg)
        fn = sum(1 for hp, hg in hits if hg and not hp)
        if tp + fp + fn == 0:
            undefined += 1
            per_class[c] = 0.0
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_class[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    macro = float(np.mean([per_class[c] for c in classes]))
    return {"per_class": per_class, "macro": macro, "undefined": undefined}


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-language and pooled-overall scores, per subtask."""
    per_language: dict[str, dict[int, dict]]
    overall: dict[int, dict]
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for subtask in sorted(self.overall):
            row = {"subtask": subtask}
            for lang in sorted(self.per_language):
                cell = self.per_language[lang].get(subtask)
                if cell:
                    row[f"{lang}_icm"] = cell["icm"]
                    row[f"{lang}_macro_f1"] = cell["macro_f1"]
            row["overall_icm"] = self.overall[subtask]["icm"]
            row["overall_macro_f1"] = self.overall[subtask]["macro_f1"]
            out.append(row)
        return out


def _pred_level_view(record: dict, level: int):
    if level == 1:
        return record["label_task1"]
    if level == 2:
        return None if record["label_task2"] == "-" else record["label_task2"]
    l3 = record["labels_task3"]
    return frozenset() if l3 == "-" else frozenset(l3)


def _gold_level_view(inst: Instance, level: int):
    if level == 1:
        return inst.gold_l1
    if level == 2:
        return inst.gold_l2
    return inst.gold_l3


def _score_block(records: list[dict], instances: list[Instance],
                 stats: GoldStats, icm_params: dict) -> dict[int, dict]:
    out: dict[int, dict] = {}
    for subtask in (1, 2, 3):
        preds = [pred_label_set(r, subtask) for r in records]
        golds = [gold_label_set(i, subtask) for i in instances]
        f1 = f1_scores([_pred_level_view(r, subtask) for r in records],
                       [_gold_level_view(i, subtask) for i in instances], subtask)
        out[subtask] = {
            "icm": icm_dataset(preds, golds, stats, **icm_params),
            "macro_f1": f1["macro"],
            "per_class_f1": f1["per_class"],
            "undefined_classes": f1["undefined"],
            "n": len(records),
        }
    return out


def evaluate_predictions(records: list[dict], instances: list[Instance],
                         smoothing: float = 0.5, a1: float = 2.0, a2: float = 2.0,
                         b: float = 3.0) -> MetricReport:
    """Score a prediction file against gold instances, aligned by id.

    The overall block is recomputed over the pooled instances, never averaged
    across the language blocks.
    """
    by_id = {r["id"]: r for r in records}
    missing = [i.id for i in instances if i.id not in by_id]
    if missing:
        raise DataError(f"prediction file is missing ids; first divergence: {missing[0]}")
    extra = set(by_id) - {i.id for i in instances}
    if extra:
        raise DataError(f"prediction file has unknown ids; first divergence: {sorted(extra)[0]}")
    aligned = [by_id[i.id] for i in instances]
    stats = GoldStats.from_instances(instances, smoothing)
    icm_params = {"a1": a1, "a2": a2, "b": b}
    per_language: dict[str, dict[int, dict]] = {}
    for lang in sorted({i.lang for i in instances}):
        idx = [k for k, i in enumerate(instances) if i.lang == lang]
        per_language[lang] = _score_block([aligned[k] for k in idx],
                                          [instances[k] for k in idx], stats, icm_params)
    overall = _score_block(aligned, instances, stats, icm_params)
    return MetricReport(per_language, overall,
                        config={"smoothing": smoothing, "a1": a1, "a2": a2, "b": b})


# ---------------------------------------------------------------------------
# gold-routed per-level evaluation (shared by the harnesses)
# ---------------------------------------------------------------------------

def level_macro_f1(model, bank: AdapterBank, level: int,
                   instances: list[Instance]) -> float:
    """Macro F1 of one level's classifier under gold routing."""
    if level == 1:
        model.attach(route(bank, 1, None, "infer"), key=(1, "*"))
    pool = instances if level == 1 else [i for i in instances if i.gold_l1 == SEXIST]
    if not pool:
        raise DataError(f"no instances carry a level-{level} signal")
    preds, golds = [], []
    labels = Taxonomy.labels(level)
    for inst in pool:
        if level > 1:
            parent = inst.gold_l1 if level == 2 else inst.gold_l2
            model.attach(route(bank, level, parent, "infer"), key=(level, "*"))
        tokens, _ = format_prompt(inst, level, max_seq=model.cfg.max_seq)
        scores = model.class_logits(tokens, level).data
        if level == 3:
            p = 1.0 / (1.0 + np.exp(-scores))
            chosen = [c for c, pc in zip(labels, p) if pc > 0.5]
            preds.append(frozenset(chosen) if chosen
                         else frozenset({labels[int(np.argmax(p))]}))
            golds.append(inst.gold_l3)
        else:
            preds.append(labels[int(np.argmax(scores))])
            golds.append(inst.gold_l2 if level == 2 else inst.gold_l1)
    return f1_scores(preds, golds, level)["macro"]


def invalid_transition_rate(model, bank: AdapterBank, instances: list[Instance]) -> dict:
    """Fraction of root-NOT_SEXIST predictions whose raw (pre-short-circuit)
    child confidence exceeds 0.5 at level 2 or 3."""
    from .data import level_prompts
    n_root = 0
    bad2 = bad3 = bad_any = 0
    for inst in instances:
        prompts = level_prompts(inst, max_seq=model.cfg.max_seq)
        pred = predict_hierarchical(model, bank, prompts)
        if pred.y1 != NOT_SEXIST:
            continue
        n_root += 1
        p2, p3 = raw_child_probs(model, bank, prompts)
        v2, v3 = float(p2.max()) > 0.5, float(p3.max()) > 0.5
        bad2 += v2
        bad3 += v3
        bad_any += v2 or v3
    if n_root == 0:
        return {"n_root_not_sexist": 0, "rate": 0.0, "rate_l2": 0.0, "rate_l3": 0.0}
    return {"n_root_not_sexist": n_root, "rate": bad_any / n_root,
            "rate_l2": bad2 / n_root, "rate_l3": bad3 / n_root}


# ---------------------------------------------------------------------------
# joint-vs-separate bilingual ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationSetup:
    gen: SynthConfig
    model: ModelConfig
    lora: LoraConfig
    train: TrainConfig
    levels: tuple[int, ...] = (1,)
    granularity: str = "per-level"


def _subset(splits: Splits, lang: str) -> Splits:
    pick = lambda xs: [i for i in xs if i.lang == lang]
    return Splits(pick(splits.train), pick(splits.dev), pick(splits.test))


def _train_leg(setup: AblationSetup, seed: int, leg: str) -> dict:
    """One training leg: returns test macro F1 per (level, language)."""
    splits, _ = gen_synthetic(replace(setup.gen, seed=seed))
    leg_data = splits if leg == "joint" else _subset(splits, leg)
    model = build_model(setup.model, seed=seed)
    bank = AdapterBank.build(model.layer_dims(),
                             replace(setup.lora, seed=seed),
                             setup.granularity, dtype=setup.model.dtype)
    cfg = replace(setup.train, seed=seed)
    if setup.levels == (1,):
        train_subtask(model, bank, 1, leg_data, cfg)
    else:
        for level in sorted(setup.levels):
            train_subtask(model, bank, level, leg_data, cfg)
    scores: dict = {"seed": seed, "leg": leg}
    for level in setup.levels:
        for lang in ("en", "es"):
            test = [i for i in splits.test if i.lang == lang]
            scores[f"f1_l{level}_{lang}"] = level_macro_f1(model, bank, level, test)
    return scores


def ablate_joint_vs_separate(setup: AblationSetup, seeds: list[int]) -> dict:
    """Train en-only / es-only / joint per seed and compare per-language
    macro F1; legs run in parallel processes when HIERO_LORA_THREADS > 1."""
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(seed, leg) for seed in seeds for leg in ("en", "es", "joint")]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_leg_entry, [(setup, s, l) for s, l in jobs]))
    else:
        results = [_train_leg(setup, s, l) for s, l in jobs]
    by_key = {(r["seed"], r["leg"]): r for r in results}

    rows = []
    for level in setup.levels:
        sep_en = [by_key[(s, "en")][f"f1_l{level}_en"] for s in seeds]
        sep_es = [by_key[(s, "es")][f"f1_l{level}_es"] for s in seeds]
        joint_en = [by_key[(s, "joint")][f"f1_l{level}_en"] for s in seeds]
        joint_es = [by_key[(s, "joint")][f"f1_l{level}_es"] for s in seeds]
        row = {
            "level": level,
            "separate_en": float(np.mean(sep_en)),
            "separate_es": float(np.mean(sep_es)),
            "joint_en": float(np.mean(joint_en)),
            "joint_es": float(np.mean(joint_es)),
        }
        row["separate_avg"] = (row["separate_en"] + row["separate_es"]) / 2
        row["joint_avg"] = (row["joint_en"] + row["joint_es"]) / 2
        row["delta_en"] = row["joint_en"] - row["separate_en"]
        row["delta_es"] = row["joint_es"] - row["separate_es"]
        row["delta_avg"] = row["joint_avg"] - row["separate_avg"]
        row["delta_en_std"] = float(np.std(np.subtract(joint_en, sep_en)))
        row["delta_es_std"] = float(np.std(np.subtract(joint_es, sep_es)))
        rows.append(row)
    return {"rows": rows, "per_leg": results, "seeds": list(seeds),
            "shared_cue_fraction": setup.gen.shared_cue_fraction}


def _leg_entry(args):
    setup, seed, leg = args
    return _train_leg(setup, seed, leg)


# ---------------------------------------------------------------------------
# rank ablation
# ---------------------------------------------------------------------------

def ablate_rank(ranks: list[int], setup: AblationSetup) -> list[dict]:
    """Per rank (alpha pinned to the rank): trainable-parameter counts and
    level-1 validation macro F1 on the synthetic benchmark."""
    if any(r < 1 for r in ranks):
        raise ConfigError(f"ranks must be positive, got {ranks}")
    splits, _ = gen_synthetic(setup.gen)
    arch = arch_listing(setup.model)
    rows = []
    for rank in ranks:
        lora_cfg = replace(setup.lora, rank=rank, alpha=float(rank))
        counts = count_trainable(arch, lora_cfg)
        model = build_model(setup.model, seed=setup.train.seed)
        bank = AdapterBank.build(model.layer_dims(), lora_cfg,
                                 setup.granularity, dtype=setup.model.dtype)
        train_subtask(model, bank, 1, splits, setup.train)
        f1 = level_macro_f1(model, bank, 1, splits.dev)
        rows.append({
            "rank": rank,
            "alpha": float(rank),
            "lora_params": counts.lora_params,
            "saved_params": counts.saved_params,
            "trainable_params": counts.lora_params + counts.saved_params,
            "trainable_fraction": counts.trainable_fraction,
            "dev_macro_f1": f1,
        })
    return rows


# ---------------------------------------------------------------------------
# hierarchy-weight ablation
# ---------------------------------------------------------------------------

def ablate_lambda(lams: list[float], setup: AblationSetup, seeds: list[int]) -> dict:
    """Invalid-transition rates on dev for each hierarchy weight."""
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(lam, seed) for lam in lams for seed in seeds]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_lambda_entry, [(setup, lam, s) for lam, s in jobs]))
    else:
        results = [_lambda_leg(setup, lam, s) for lam, s in jobs]
    rows = []
    for lam in lams:
        legs = [r for r in results if r["lam"] == lam]
        rows.append({
            "lam": lam,
            "invalid_rate_mean": float(np.mean([r["rate"] for r in legs])),
            "invalid_rate_std": float(np.std([r["rate"] for r in legs])),
            "rate_l2_mean": float(np.mean([r["rate_l2"] for r in legs])),
            "rate_l3_mean": float(np.mean([r["rate_l3"] for r in legs])),
            "macro_f1_l1_mean": float(np.mean([r["f1_l1"] for r in legs])),
        })
    return {"rows": rows, "per_leg": results, "seeds": list(seeds)}


def _lambda_leg(setup: AblationSetup, lam: float, seed: int) -> dict:
    splits, _ = gen_synthetic(replace(setup.gen, seed=seed))
    model = build_model(setup.model, seed=seed)
    bank = AdapterBank.build(model.layer_dims(), replace(setup.lora, seed=seed),
                             setup.granularity, dtype=setup.model.dtype)
    cfg = replace(setup.train, seed=seed, lam=lam)
    train_all(model, bank, splits, cfg)
    rates = invalid_transition_rate(model, bank, splits.dev)
    return {"lam": lam, "seed": seed, **rates,
            "f1_l1": level_macro_f1(model, bank, 1, splits.dev)}


def _lambda_entry(args):
    setup, lam, seed = args
    return _lambda_leg(setup, lam, seed)


# ---------------------------------------------------------------------------
# efficiency
# ---------------------------------------------------------------------------

def efficiency_report(model, bank: AdapterBank | None, lora_cfg: LoraConfig,
                      modules_to_save: frozenset[str] = frozenset({"lm_head",
                                                                   "embed_tokens"})
                      ) -> dict:
    """Parameter totals plus on-disk footprint of adapters vs full model."""
    import tempfile
    from pathlib import Path

    from .checkpoints import save_adapter_bank, save_model

    counts = count_trainable(arch_listing(model.cfg), lora_cfg, modules_to_save)
    lora_params = counts.lora_params if bank is not None else 0
    out = {
        "total_params": counts.total_params,
        "lora_params": lora_params,
        "saved_params": counts.saved_params,
        "trainable_params": lora_params + counts.saved_params,
    }
    out["trainable_fraction"] = out["trainable_params"] / out["total_params"]
    with tempfile.TemporaryDirectory() as tmp:
        model_path = Path(tmp) / "model.npz"
        save_model(model, model_path)
        out["model_bytes"] = model_path.stat().st_size
        if bank is not None:
            bank_path = Path(tmp) / "adapters.npz"
            save_adapter_bank(bank, lora_cfg, bank_path, model)
            out["adapter_bytes"] = bank_path.stat().st_size
    return out

"""Three-level label taxonomy, adapter routing, task losses, and the
hierarchy-consistency penalty.

Routing is gold-conditioned while training and prediction-conditioned at
inference; level-2/3 work is skipped entirely (short-circuit) once the root
level predicts NOT_SEXIST.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DataError
from .lora import LoraConfig, LoraFactors, init_lora
from .numerics import Tensor

LEVEL1 = ("SEXIST", "NOT_SEXIST")
LEVEL2 = ("DIRECT", "REPORTED", "JUDGEMENTAL")
LEVEL3 = (
    "IDEOLOGICAL_AND_INEQUALITY",
    "STEREOTYPING_AND_DOMINANCE",
    "OBJECTIFICATION",
    "SEXUAL_VIOLENCE",
    "MISOGYNY_AND_NON_SEXUAL_VIOLENCE",
)

NOT_SEXIST = "NOT_SEXIST"
SEXIST = "SEXIST"

#: sentinel returned by route() when the parent label forbids descending
SHORT_CIRCUIT = object()


class Taxonomy:
    """The fixed label space and its valid parent->child transitions."""

    levels = {1: LEVEL1, 2: LEVEL2, 3: LEVEL3}

    @classmethod
    def labels(cls, level: int) -> tuple[str, ...]:
        if level not in cls.levels:
            raise ContractError(f"level must be 1, 2 or 3, got {level}")
        return cls.levels[level]

    @classmethod
    def index(cls, level: int, label: str) -> int:
        labels = cls.labels(level)
        try:
            return labels.index(label)
        except ValueError:
            raise DataError(f"label {label!r} is not a level-{level} label") from None

    @classmethod
    def is_valid_transition(cls, level: int, parent: str) -> bool:
        """Can a level-`level` label appear under this parent label?"""
        if level == 2:
            return parent == SEXIST
        if level == 3:
            return parent in LEVEL2
        raise ContractError(f"transitions are defined for levels 2 and 3, got {level}")


TAXONOMY = Taxonomy()


@dataclass
class HierPrediction:
    """Per-level probabilities and hard labels for one instance.

    Probability slots may hold graph-attached Tensors (training pass) or
    plain arrays (inference); a None slot means the level was not evaluated.
    Level 3 hard labels are a set; the short-circuit rule keeps children
    empty whenever the root says NOT_SEXIST.
    """

    y1: str
    p1: object = None
    y2: str | None = None
    p2: object = None
    y3: frozenset[str] = frozenset()
    p3: object = None

    def __post_init__(self):
        if self.y1 == NOT_SEXIST and (self.y2 is not None or self.y3):
            raise ContractError("short-circuit violated: NOT_SEXIST root with child labels")


@dataclass
class BankEntry:
    """One routable adapter: LoRA factors per target module, plus this
    adapter's own trained copies of the modules-to-save (token embeddings
    and lm_head base), captured at its best validation step.

    Separate per-subtask training means each adapter owns its saved
    modules; attaching an entry activates both its factors and, when
    present, its saved-module values.
    """

    factors: dict[str, LoraFactors]
    saved: dict[str, np.ndarray] | None = None


@dataclass
class AdapterBank:
    """Bank entries keyed by (level, parent label).

    In "per-level" mode every parent at a level shares one entry, keyed
    (level, "*"); "per-parent" keys level 2 under SEXIST and level 3 under
    each intention label.
    """

    entries: dict[tuple[int, str], BankEntry] = field(default_factory=dict)
    granularity: str = "per-level"

    def __post_init__(self):
        if self.granularity not in ("per-level", "per-parent"):
            raise ConfigError(f"unknown routing granularity {self.granularity!r}")

    @staticmethod
    def routing_keys(granularity: str) -> list[tuple[int, str]]:
        if granularity == "per-level":
            return [(1, "*"), (2, "*"), (3, "*")]
        return [(1, "*"), (2, SEXIST)] + [(3, parent) for parent in LEVEL2]

    @classmethod
    def build(cls, layer_dims: dict[str, tuple[int, int]], cfg: LoraConfig,
              granularity: str = "per-level", dtype: str = "float64") -> "AdapterBank":
        """Create zero-effect factors for every routing key.

        layer_dims maps target-module name -> (d_out, d_in); each entry gets
        its own seeded init stream so banks are reproducible.
        """
        bank = cls(granularity=granularity)
        for i, key in enumerate(cls.routing_keys(granularity)):
            rng = np.random.default_rng((cfg.seed, i))
            bank.entries[key] = BankEntry(factors={
                name: init_lora(d_out, d_in, cfg, rng=rng, dtype=dtype)
                for name, (d_out, d_in) in sorted(layer_dims.items())
            })
        return bank

    def entry_params(self, key: tuple[int, str]) -> list[tuple[str, Tensor]]:
        """Named trainable tensors of one entry, in a stable order."""
        factors = self.entries[key].factors
        out: list[tuple[str, Tensor]] = []
        for name in sorted(factors):
            out.append((f"adapter[{key[0]},{key[1]}].{name}.A", factors[name].a))
            out.append((f"adapter[{key[0]},{key[1]}].{name}.B", factors[name].b))
        return out


def route(bank: AdapterBank, level: int, parent_label: str | None, mode: str,
          gold_parent: str | None = None):
    """Pick the adapter entry for a level, or SHORT_CIRCUIT.

    Training routes on the gold parent; inference routes on the predicted
    parent. Level 1 is unconditional.
    """
    if level not in (1, 2, 3):
        raise ContractError(f"level must be 1, 2 or 3, got {level}")
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if level == 1:
        return _entry(bank, (1, "*"))
    parent = gold_parent if mode == "train" else parent_label
    if parent is None:
        raise ContractError(f"level-{level} routing in {mode} mode needs a parent label")
    if parent == NOT_SEXIST:
        return SHORT_CIRCUIT
    if bank.granularity == "per-level":
        return _entry(bank, (level, "*"))
    return _entry(bank, (level, parent))


def _entry(bank: AdapterBank, key: tuple[int, str]) -> BankEntry:
    try:
        return bank.entries[key]
    except KeyError:
        raise ConfigError(f"adapter bank has no entry for routing key {key}") from None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def task_loss(level: int, scores: Tensor, gold) -> Tensor:
    """Cross-entropy over softmaxed scores for levels 1-2, mean binary
    cross-entropy over the five sigmoid scores for level 3."""
    labels = Taxonomy.labels(level)
    if scores.ndim != 1 or scores.shape[0] != len(labels):
        raise ContractError(
            f"level-{level} scores must have shape ({len(labels)},), got {scores.shape}")
    if level in (1, 2):
        idx = Taxonomy.index(level, gold)
        picked = nx.gather(nx.log_softmax(scores, axis=0), [idx])
        return nx.neg(nx.tsum(picked))
    gold_set = set(gold)
    bad = gold_set - set(labels)
    if bad:
        raise DataError(f"labels {sorted(bad)} are not level-3 labels")
    if not gold_set:
        raise DataError("level-3 gold label set must be nonempty")
    targets = np.array([1.0 if c in gold_set else 0.0 for c in labels])
    return nx.tmean(nx.bce_with_logits(scores, targets))


def hierarchy_loss(batch_preds: list[HierPrediction], lam: float) -> Tensor:
    """lam * sum over instances and child levels of
    1[root prediction = NOT_SEXIST] * max child probability.

    Child probability slots must be graph-attached tensors for the gradient
    to reach them; None slots (level not evaluated) contribute zero.
    """
    if lam < 0:
        raise ConfigError(f"hierarchy weight must be nonnegative, got {lam}")
    if lam == 0.0:
        return Tensor(0.0)
    total: Tensor | None = None
    for pred in batch_preds:
        if pred.y1 != NOT_SEXIST:
            continue
        for probs in (pred.p2, pred.p3):
            if probs is None:
                continue
            term = nx.reduce_max(probs if isinstance(probs, Tensor) else Tensor(probs))
            total = term if total is None else nx.add(total, term)
    if total is None:
        return Tensor(0.0)
    return nx.scale(total, lam)


def total_loss(task_losses: dict[int, Tensor], hier: Tensor) -> Tensor:
    """Sum of per-level task losses plus the hierarchy penalty."""
    if 1 not in task_losses:
        raise ContractError("total_loss needs at least the level-1 task loss")
    out: Tensor | None = None
    for level in sorted(task_losses):
        t = task_losses[level]
        out = t if out is None else nx.add(out, t)
    return nx.add(out, hier if isinstance(hier, Tensor) else Tensor(hier))


# ---------------------------------------------------------------------------
# hierarchical inference
# ---------------------------------------------------------------------------

def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _sigmoid_np(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-logits))


def _prompt_for(prompts, level: int):
    if isinstance(prompts, dict):
        try:
            return prompts[level]
        except KeyError:
            raise ContractError(f"no prompt supplied for level {level}") from None
    return prompts


def predict_hierarchical(model, bank: AdapterBank, prompts) -> HierPrediction:
    """Sequential top-down prediction with routed adapters.

    `prompts` is either one token sequence reused at every level or a mapping
    level -> token sequence (each ending at its answer position). Levels 2-3
    are never evaluated when level 1 predicts NOT_SEXIST.
    """
    model.attach(route(bank, 1, None, "infer"))
    p1 = _softmax_np(model.class_logits(_prompt_for(prompts, 1), 1).data)
    y1 = LEVEL1[int(np.argmax(p1))]
    if y1 == NOT_SEXIST:
        return HierPrediction(y1=y1, p1=p1)

    routed2 = route(bank, 2, y1, "infer")
    model.attach(routed2)
    p2 = _softmax_np(model.class_logits(_prompt_for(prompts, 2), 2).data)
    y2 = LEVEL2[int(np.argmax(p2))]

    routed3 = route(bank, 3, y2, "infer")
    model.attach(routed3)
    p3 = _sigmoid_np(model.class_logits(_prompt_for(prompts, 3), 3).data)
    y3 = frozenset(c for c, p in zip(LEVEL3, p3) if p > 0.5)
    if not y3:
        # the taxonomy requires at least one category for sexist items
        y3 = frozenset({LEVEL3[int(np.argmax(p3))]})
    return HierPrediction(y1=y1, p1=p1, y2=y2, p2=p2, y3=y3, p3=p3)


def raw_child_probs(model, bank: AdapterBank, prompts) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced level-2/3 probabilities, ignoring the short-circuit.

    Used to measure invalid-transition confidence: how strongly the child
    levels would fire even when the root says NOT_SEXIST.
    """
    if bank.granularity == "per-level":
        model.attach(_entry(bank, (2, "*")))
    else:
        model.attach(_entry(bank, (2, SEXIST)))
    p2 = _softmax_np(model.class_logits(_prompt_for(prompts, 2), 2).data)
    y2 = LEVEL2[int(np.argmax(p2))]
    if bank.granularity == "per-level":
        model.attach(_entry(bank, (3, "*")))
    else:
        model.attach(_entry(bank, (3, y2)))
    p3 = _sigmoid_np(model.class_logits(_prompt_for(prompts, 3), 3).data)
    return p2, p3


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------

def prediction_record(instance_id: str, pred: HierPrediction) -> dict:
    return {
        "id": instance_id,
        "label_task1": pred.y1,
        "label_task2": pred.y2 if pred.y2 is not None else "-",
        "labels_task3": sorted(pred.y3) if pred.y3 else "-",
    }


def write_predictions(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_predictions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        for key in ("id", "label_task1", "label_task2", "labels_task3"):
            if key not in rec:
                raise DataError(f"{path}:{lineno}: missing field {key!r}")
        records.append(rec)
    return records

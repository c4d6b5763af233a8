"""Optimization loop: AdamW over the trainable set, constant learning rate
with linear warmup, micro-batching with gradient accumulation, gold-routed
per-subtask adapter training, and validation-plateau early stopping.

Loss convention: the loss of one accumulation window is the mean over the
instances that contributed to it, which makes "k micro-batches of size b"
equal to "one batch of size k*b" up to floating-point summation order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import Instance, Splits, format_prompt
from .errors import ConfigError, DataError, NumericError
from .hierarchy import (NOT_SEXIST, SEXIST, AdapterBank, HierPrediction,
                        hierarchy_loss, route, task_loss)
from .numerics import Graph, Tensor

LEVEL1_LABELS = ("SEXIST", "NOT_SEXIST")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    warmup_fraction: float = 0.10
    batch_size: int = 8
    grad_accum_steps: int = 2
    max_steps: int = 500
    patience: int = 3
    eval_interval: int = 25
    lam: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    plateau_threshold: float = 1e-6

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("learning_rate, batch_size, grad_accum_steps must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0,1), got {self.warmup_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_steps < 1 or self.eval_interval < 1:
            raise ConfigError("max_steps and eval_interval must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")


@dataclass
class TrainLog:
    level: int
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    stop_reason: str = "max_steps"
    wall_seconds: float = 0.0
    best_step: int = -1
    best_val_loss: float = float("inf")

    def record_step(self, step: int, loss: float, task: float, hier: float, lr: float):
        self.steps.append({"step": step, "loss": loss, "task": task,
                           "hier": hier, "lr": lr})

    def record_eval(self, step: int, val_loss: float, macro_f1: float):
        self.evals.append({"step": step, "val_loss": val_loss, "macro_f1": macro_f1})


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over the warmup steps, then constant.

    Convention: rate = lr * min(1, (step+1)/W) with W = ceil(frac * total).
    """
    if step < 0:
        raise ConfigError(f"step must be nonnegative, got {step}")
    warmup = int(np.ceil(cfg.warmup_fraction * total_steps))
    if warmup <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, (step + 1) / warmup)


def adamw_step(params: list[tuple[str, Tensor]], grads: list[np.ndarray | None],
               state: dict[str, dict[str, np.ndarray]], cfg: TrainConfig,
               step: int, rate: float | None = None) -> None:
    """One AdamW update with bias correction; mutates params and state.

    A None gradient counts as zero (the tensor was unreachable this window).
    """
    if rate is None:
        rate = cfg.learning_rate
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for (name, p), g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for tensor {name!r}")
        st = state.setdefault(name, {"m": np.zeros_like(p.data),
                                     "v": np.zeros_like(p.data)})
        st["m"] = cfg.beta1 * st["m"] + (1.0 - cfg.beta1) * g
        st["v"] = cfg.beta2 * st["v"] + (1.0 - cfg.beta2) * (g * g)
        m_hat = st["m"] / bc1
        v_hat = st["v"] / bc2
        p.data -= rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay:
            p.data -= rate * cfg.weight_decay * p.data


# ---------------------------------------------------------------------------
# per-instance losses
# ---------------------------------------------------------------------------

def _gold_for(inst: Instance, level: int):
    if level == 1:
        return inst.gold_l1
    if level == 2:
        return inst.gold_l2
    return inst.gold_l3


class _ModulesGuard:
    """Save and restore the in-training modules-to-save around passes that
    attach a different bank entry (which may carry its own saved copies)."""

    def __init__(self, model):
        self.model = model
        self.embed = model.embed.data.copy()
        self.head = model.lm_head.base.data.copy()

    def restore(self):
        self.model.embed.data[...] = self.embed
        self.model.lm_head.base.data[...] = self.head


def _root_label(model, bank: AdapterBank, inst: Instance) -> str:
    """Hard level-1 prediction with the current level-1 adapter (no grad)."""
    guard = _ModulesGuard(model)
    model.attach(route(bank, 1, None, "infer"), key=(1, "*"))
    tokens, _ = format_prompt(inst, 1, max_seq=model.cfg.max_seq)
    scores = model.class_logits(tokens, 1).data
    guard.restore()
    return LEVEL1_LABELS[int(np.argmax(scores))]


def _penalty_entry(model, bank: AdapterBank, level: int, inst: Instance):
    """Adapter entry for a teacher-forced penalty-only pass."""
    if bank.granularity == "per-level":
        return bank.entries[(level, "*")]
    if level == 2:
        return bank.entries[(2, SEXIST)]
    # level 3 under per-parent routing: follow the predicted intention
    guard = _ModulesGuard(model)
    model.attach(bank.entries[(2, SEXIST)], key=(2, SEXIST))
    tokens, _ = format_prompt(inst, 2, max_seq=model.cfg.max_seq)
    y2 = _level_labels(2)[int(np.argmax(model.class_logits(tokens, 2).data))]
    guard.restore()
    return bank.entries[(3, y2)]


def _instance_loss(model, bank: AdapterBank, level: int, inst: Instance,
                   cfg: TrainConfig, train_mode: bool, rng,
                   root: str | None = None) -> tuple[Tensor, float]:
    """(loss tensor, penalty value) for one contributing instance.

    Level 1: plain task loss. Levels 2-3: gold-routed task loss for SEXIST
    instances; when the current root prediction is NOT_SEXIST the hierarchy
    penalty applies to the same level's probabilities (teacher-forced for
    gold-NOT_SEXIST instances, which carry no task term).
    """
    if level == 1:
        model.attach(route(bank, 1, None, "train", gold_parent=None), key=(1, "*"))
        tokens, _ = format_prompt(inst, 1, max_seq=model.cfg.max_seq)
        scores = model.class_logits(tokens, 1, train_mode=train_mode, rng=rng)
        return task_loss(1, scores, inst.gold_l1), 0.0

    penalized = cfg.lam > 0 and root == NOT_SEXIST
    if inst.gold_l1 == SEXIST:
        gold_parent = inst.gold_l1 if level == 2 else inst.gold_l2
        entry = route(bank, level, None, "train", gold_parent=gold_parent)
    else:
        if not penalized:
            raise AssertionError("penalty-only instance without penalty")
        entry = _penalty_entry(model, bank, level, inst)
    model.attach(entry, key=(level, "*"))
    tokens, _ = format_prompt(inst, level, max_seq=model.cfg.max_seq)
    scores = model.class_logits(tokens, level, train_mode=train_mode, rng=rng)

    parts: list[Tensor] = []
    if inst.gold_l1 == SEXIST:
        parts.append(task_loss(level, scores, _gold_for(inst, level)))
    hier_value = 0.0
    if penalized:
        probs = nx.softmax(scores, axis=0) if level == 2 else nx.sigmoid(scores)
        pred = HierPrediction(y1=NOT_SEXIST,
                              p2=probs if level == 2 else None,
                              p3=probs if level == 3 else None)
        hier = hierarchy_loss([pred], cfg.lam)
        hier_value = hier.item()
        parts.append(hier)
    loss = parts[0]
    for extra in parts[1:]:
        loss = nx.add(loss, extra)
    return loss, hier_value


def _contributes(inst: Instance, level: int, cfg: TrainConfig, root: str | None) -> bool:
    if level == 1 or inst.gold_l1 == SEXIST:
        return True
    return cfg.lam > 0 and root == NOT_SEXIST


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _eval_level(model, bank: AdapterBank, level: int, dev: list[Instance],
                cfg: TrainConfig) -> tuple[float, float]:
    """(validation loss, macro F1) in evaluation mode (no dropout)."""
    from .evaluation import f1_scores  # late import: evaluation drives training

    losses: list[float] = []
    preds, golds = [], []
    for inst in dev:
        root = _root_label(model, bank, inst) if (level > 1 and cfg.lam > 0) else None
        if not _contributes(inst, level, cfg, root):
            continue
        loss, _ = _instance_loss(model, bank, level, inst, cfg,
                                 train_mode=False, rng=None, root=root)
        losses.append(loss.item())
        if inst.gold_l1 != SEXIST and level > 1:
            continue  # penalty-only instance: no task prediction to score
        tokens, _ = format_prompt(inst, level, max_seq=model.cfg.max_seq)
        scores = model.class_logits(tokens, level).data
        if level == 3:
            p = 1.0 / (1.0 + np.exp(-scores))
            labels = [c for c, pc in zip(_level_labels(3), p) if pc > 0.5]
            if not labels:
                labels = [_level_labels(3)[int(np.argmax(p))]]
            preds.append(frozenset(labels))
            golds.append(inst.gold_l3)
        else:
            preds.append(_level_labels(level)[int(np.argmax(scores))])
            golds.append(_gold_for(inst, level))
    if not losses:
        raise DataError(f"level-{level} validation set is empty after filtering")
    f1 = f1_scores(preds, golds, level)["macro"] if preds else 0.0
    return float(np.mean(losses)), f1


def _level_labels(level: int):
    from .hierarchy import Taxonomy
    return Taxonomy.labels(level)


# ---------------------------------------------------------------------------
# subtask training
# ---------------------------------------------------------------------------

def run_window(model, bank: AdapterBank, level: int, contributing: list[Instance],
               roots: dict[str, str | None], cfg: TrainConfig, rng
               ) -> tuple[float, float]:
    """Forward/backward one accumulation window, leaving gradients in .grad.

    The window loss is the mean over contributing instances, taken per
    micro-batch as sum/n, so duplicated micro-batches match one doubled
    batch up to floating-point summation order.
    """
    n = len(contributing)
    loss_total, hier_total = 0.0, 0.0
    for lo in range(0, n, cfg.batch_size):
        batch = contributing[lo: lo + cfg.batch_size]
        with Graph() as g:
            batch_loss: Tensor | None = None
            for inst in batch:
                li, hv = _instance_loss(model, bank, level, inst, cfg,
                                        train_mode=True, rng=rng,
                                        root=roots.get(inst.id))
                hier_total += hv / n
                batch_loss = li if batch_loss is None else nx.add(batch_loss, li)
            scaled = nx.scale(batch_loss, 1.0 / n)
            g.backward(scaled)
            loss_total += scaled.item()
    return loss_total, hier_total


def _snapshot(params: list[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params}


def _restore(params: list[tuple[str, Tensor]], snap: dict[str, np.ndarray]) -> None:
    for name, p in params:
        p.data[...] = snap[name]


def train_subtask(model, bank: AdapterBank, level: int, data: Splits,
                  cfg: TrainConfig) -> TrainLog:
    """Train one level's adapter entry (plus the modules-to-save) with
    gold-routed forwards; stop at max_steps or when validation plateaus."""
    t0 = time.time()
    task_insts = [i for i in data.train if level == 1 or i.gold_l1 == SEXIST]
    if not task_insts:
        raise DataError(f"no training instances carry a level-{level} task signal")

    if bank.granularity == "per-level" or level == 1:
        entry_keys = [(level, "*")]
    else:
        entry_keys = [k for k in bank.entries if k[0] == level]
    params = [("embed_tokens", model.embed), ("lm_head.base", model.lm_head.base)]
    for key in entry_keys:
        params.extend(bank.entry_params(key))
    tensors = [p for _, p in params]

    rng = np.random.default_rng((cfg.seed, level))
    log = TrainLog(level=level)
    state: dict[str, dict[str, np.ndarray]] = {}
    best_snap = _snapshot(params)
    bad_evals = 0
    window = cfg.batch_size * cfg.grad_accum_steps

    stream: list[Instance] = []
    step = 0
    stopped = False
    while step < cfg.max_steps and not stopped:
        if len(stream) < window:
            epoch = list(data.train)
            rng.shuffle(epoch)
            stream.extend(epoch)
        insts = [stream.pop(0) for _ in range(min(window, len(stream)))]

        roots = {i.id: (_root_label(model, bank, i) if (level > 1 and cfg.lam > 0) else None)
                 for i in insts}
        contributing = [i for i in insts if _contributes(i, level, cfg, roots[i.id])]
        if not contributing:
            continue
        n = len(contributing)

        nx.zero_grad(tensors)
        loss_total, hier_total = run_window(model, bank, level, contributing,
                                            roots, cfg, rng)
        rate = lr_at(step, cfg.max_steps, cfg)
        adamw_step(params, [p.grad for p in tensors], state, cfg, step, rate=rate)
        log.record_step(step, loss_total, loss_total - hier_total, hier_total, rate)
        step += 1

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            val_loss, macro_f1 = _eval_level(model, bank, level, data.dev, cfg)
            log.record_eval(step, val_loss, macro_f1)
            if log.best_val_loss - val_loss > cfg.plateau_threshold:
                log.best_val_loss = val_loss
                log.best_step = step
                best_snap = _snapshot(params)
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    log.stop_reason = "early_stop"
                    stopped = True

    if log.best_step >= 0:
        _restore(params, best_snap)
    else:
        log.best_step = step
    if not stopped:
        log.stop_reason = "max_steps"
    log.wall_seconds = time.time() - t0
    return log


def train_all(model, bank: AdapterBank, data: Splits,
              cfg: TrainConfig) -> dict[int, TrainLog]:
    """Train levels 1 -> 2 -> 3 in order; the hierarchy penalty at levels
    2-3 uses root predictions from the just-trained level-1 adapter."""
    if not data.train:
        raise DataError("empty training set")
    return {level: train_subtask(model, bank, level, data, cfg) for level in (1, 2, 3)}

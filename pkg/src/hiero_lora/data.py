"""Corpus ingestion, byte-level tokenization, prompt assembly, and the
seeded synthetic bilingual generator.

Tokenization is raw UTF-8 bytes (ids 0-255): no lowercasing, no stripping,
hashtags/mentions/emoji preserved verbatim. The vocabulary extends the byte
range with four structural tokens and one verbalizer token per taxonomy
label.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError
from .hierarchy import LEVEL1, LEVEL2, LEVEL3, NOT_SEXIST, SEXIST, Taxonomy

# ---------------------------------------------------------------------------
# vocabulary layout
# ---------------------------------------------------------------------------

N_BYTES = 256
SYS_ID = 256
USER_ID = 257
ASST_ID = 258
EOT_ID = 259
_VERB_BASE = 260

VERBALIZER_IDS: dict[tuple[int, str], int] = {}
for _lvl, _labels in ((1, LEVEL1), (2, LEVEL2), (3, LEVEL3)):
    for _j, _lab in enumerate(_labels):
        VERBALIZER_IDS[(_lvl, _lab)] = _VERB_BASE + {1: 0, 2: 2, 3: 5}[_lvl] + _j

MIN_VOCAB_SIZE = _VERB_BASE + 10  # bytes + specials + 10 verbalizers


def verbalizer_ids(level: int) -> list[int]:
    return [VERBALIZER_IDS[(level, lab)] for lab in Taxonomy.labels(level)]


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes as token ids; lossless for any valid text."""
    return list(text.encode("utf-8"))


def detokenize(ids) -> str:
    ids = list(ids)
    if any(i < 0 or i >= N_BYTES for i in ids):
        raise DataError("detokenize accepts byte ids 0-255 only")
    return bytes(ids).decode("utf-8")


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    """One text sample with its gold labels; children are absent exactly
    when level 1 is NOT_SEXIST."""

    id: str
    lang: str
    text: str
    gold_l1: str
    gold_l2: str | None = None
    gold_l3: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.lang not in ("en", "es"):
            raise DataError(f"{self.id}: lang must be 'en' or 'es', got {self.lang!r}")
        if self.gold_l1 not in LEVEL1:
            raise DataError(f"{self.id}: bad level-1 label {self.gold_l1!r}")
        if self.gold_l1 == NOT_SEXIST:
            if self.gold_l2 is not None or self.gold_l3:
                raise DataError(f"{self.id}: NOT_SEXIST instance must have no child labels")
        else:
            if self.gold_l2 not in LEVEL2:
                raise DataError(f"{self.id}: SEXIST instance needs a level-2 label")
            if not self.gold_l3:
                raise DataError(f"{self.id}: SEXIST instance needs >= 1 level-3 label")
            bad = set(self.gold_l3) - set(LEVEL3)
            if bad:
                raise DataError(f"{self.id}: bad level-3 labels {sorted(bad)}")


class Splits(NamedTuple):
    train: list[Instance]
    dev: list[Instance]
    test: list[Instance]


def parse_dataset(path, require_labels: bool = True) -> list[Instance]:
    """Read one-JSON-object-per-line files; '-' encodes an absent label.

    With require_labels=False (prediction inputs) missing label fields are
    tolerated and default to NOT_SEXIST placeholders.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    instances: list[Instance] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        for key in ("id", "lang", "text"):
            if key not in rec:
                raise DataError(f"{path}:{lineno}: missing field {key!r}")
        if require_labels:
            for key in ("label_task1", "label_task2", "labels_task3"):
                if key not in rec:
                    raise DataError(f"{path}:{lineno}: missing field {key!r}")
        l1 = rec.get("label_task1", NOT_SEXIST)
        l2 = rec.get("label_task2", "-")
        l3 = rec.get("labels_task3", "-")
        try:
            instances.append(Instance(
                id=str(rec["id"]),
                lang=rec["lang"],
                text=rec["text"],
                gold_l1=l1,
                gold_l2=None if l2 == "-" else l2,
                gold_l3=frozenset() if l3 == "-" else frozenset(l3),
            ))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return instances


def write_dataset(instances: list[Instance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {
                "id": inst.id,
                "lang": inst.lang,
                "text": inst.text,
                "label_task1": inst.gold_l1,
                "label_task2": inst.gold_l2 if inst.gold_l2 is not None else "-",
                "labels_task3": sorted(inst.gold_l3) if inst.gold_l3 else "-",
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# prompt assembly
# ---------------------------------------------------------------------------

SYSTEM_PROMPTS = {
    1: "Task: decide if the tweet is sexist.",
    2: "Task: identify the source intention.",
    3: "Task: pick all sexism categories.",
}


def format_prompt(item, level: int, answer: str | None = None,
                  max_seq: int = 128) -> tuple[list[int], int]:
    """Assemble [SYS] system bytes [EOT] [USER] text bytes [EOT] [ASST]
    (+ answer verbalizer when training). Returns (tokens, answer_position);
    the answer position is the index immediately after the assistant marker.

    Over-long inputs are handled by truncating text bytes only; if even the
    bare skeleton exceeds max_seq that is a data error.
    """
    if level not in (1, 2, 3):
        raise DataError(f"level must be 1, 2 or 3, got {level}")
    text = item.text if isinstance(item, Instance) else item
    sys_bytes = tokenize(SYSTEM_PROMPTS[level])
    text_bytes = tokenize(text)
    overhead = len(sys_bytes) + 5 + (1 if answer is not None else 0)
    if overhead > max_seq:
        raise DataError(f"prompt skeleton ({overhead} tokens) exceeds max_seq={max_seq}")
    budget = max_seq - overhead
    if len(text_bytes) > budget:
        # never split a UTF-8 code point mid-sequence
        cut = budget
        while cut > 0 and (text_bytes[cut] & 0xC0) == 0x80:
            cut -= 1
        text_bytes = text_bytes[:cut]
    tokens = [SYS_ID] + sys_bytes + [EOT_ID] + [USER_ID] + text_bytes + [EOT_ID] + [ASST_ID]
    answer_pos = len(tokens)
    if answer is not None:
        tokens.append(VERBALIZER_IDS[(level, answer)])
    return tokens, answer_pos


def level_prompts(item, max_seq: int = 128) -> dict[int, list[int]]:
    """Inference-time prompts (no answer token) for all three levels."""
    return {lvl: format_prompt(item, lvl, max_seq=max_seq)[0] for lvl in (1, 2, 3)}


# ---------------------------------------------------------------------------
# synthetic bilingual corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_per_lang: int = 400
    cue_strength: float = 0.9
    shared_cue_fraction: float = 0.5
    p_sexist: float = 0.5
    seed: int = 0
    cue_slots: int = 2            # independent chances to plant each gold label's cue
    words_per_label: int = 4
    dev_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self):
        if self.n_per_lang < 1:
            raise ConfigError("n_per_lang must be >= 1")
        for name in ("cue_strength", "shared_cue_fraction", "p_sexist"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.cue_slots < 1 or self.words_per_label < 1:
            raise ConfigError("cue_slots and words_per_label must be >= 1")


_ALL_LABELS = [(1, lab) for lab in LEVEL1] + [(2, lab) for lab in LEVEL2] \
    + [(3, lab) for lab in LEVEL3]

# signature letters: shared cues use a lowercase consonant unique to the
# label; language-specific cues use an uppercase letter unique to the
# (label, language) pair, so disjoint cue vocabularies share no bytes.
_SHARED_SIG = "bcdfghjklm"
_EN_SIG = "BCDFGHJKLM"
_ES_SIG = "NPQRSTVWXZ"
_VOWELS = "aeiou"

_FILLER_CONS = {"en": "rstwy", "es": "npqvxz"}
_EMOJI = ["\U0001F600", "\U0001F4AA", "\U0001F525", "❤️"]


def _cue_word(sig: str, k: int) -> str:
    v = _VOWELS[k % len(_VOWELS)]
    return f"{sig}{v}{sig}{v}" if k >= len(_VOWELS) else f"{sig}{v}{sig}"


@dataclass(frozen=True)
class SynthMeta:
    """Generator introspection: cue word -> (level, label) per language."""
    cue_tables: dict[str, dict[str, tuple[int, str]]]
    shared_words: dict[tuple[int, str], tuple[str, ...]]
    config: SynthConfig

    def as_manifest(self) -> dict:
        cfg = {k: getattr(self.config, k) for k in self.config.__dataclass_fields__}
        return {
            "config": cfg,
            "cues": {
                lang: {w: list(key) for w, key in sorted(table.items())}
                for lang, table in self.cue_tables.items()
            },
        }


def _build_cue_tables(cfg: SynthConfig):
    n_shared = round(cfg.shared_cue_fraction * cfg.words_per_label)
    tables: dict[str, dict[str, tuple[int, str]]] = {"en": {}, "es": {}}
    per_label: dict[tuple[str, int, str], list[str]] = {}
    shared: dict[tuple[int, str], tuple[str, ...]] = {}
    for i, (level, label) in enumerate(_ALL_LABELS):
        shared_words = [_cue_word(_SHARED_SIG[i], k) for k in range(n_shared)]
        shared[(level, label)] = tuple(shared_words)
        for lang, sigs in (("en", _EN_SIG), ("es", _ES_SIG)):
            own = [_cue_word(sigs[i], k) for k in range(cfg.words_per_label - n_shared)]
            words = shared_words + own
            per_label[(lang, level, label)] = words
            for w in words:
                tables[lang][w] = (level, label)
    return tables, per_label, shared


def _sample_labels(cfg: SynthConfig, rng: np.random.Generator):
    if rng.random() < cfg.p_sexist:
        l2 = LEVEL2[rng.integers(len(LEVEL2))]
        k = 1 if rng.random() < 0.7 else 2
        idx = rng.choice(len(LEVEL3), size=k, replace=False)
        return SEXIST, l2, frozenset(LEVEL3[int(j)] for j in idx)
    return NOT_SEXIST, None, frozenset()


def _filler_word(lang: str, rng: np.random.Generator) -> str:
    cons = _FILLER_CONS[lang]
    n = int(rng.integers(2, 4))
    parts = []
    for _ in range(n):
        parts.append(cons[rng.integers(len(cons))])
        parts.append(_VOWELS[rng.integers(len(_VOWELS))])
    return "".join(parts)


def _make_text(lang: str, gold_labels, per_label, cfg: SynthConfig,
               rng: np.random.Generator) -> str:
    words = [_filler_word(lang, rng) for _ in range(int(rng.integers(3, 7)))]
    for level, label in gold_labels:
        pool = per_label[(lang, level, label)]
        for _ in range(cfg.cue_slots):
            if rng.random() < cfg.cue_strength:
                words.append(pool[rng.integers(len(pool))])
    rng.shuffle(words)
    if rng.random() < 0.2:
        j = int(rng.integers(len(words)))
        words[j] = "#" + words[j]
    text = " ".join(words)
    if rng.random() < 0.15:
        text += " " + _EMOJI[rng.integers(len(_EMOJI))]
    return text


def gen_synthetic(cfg: SynthConfig) -> tuple[Splits, SynthMeta]:
    """Deterministic bilingual corpus with hierarchical lexical cues.

    Each gold label plants its cue words with probability cue_strength per
    slot; shared_cue_fraction of every label's cue vocabulary is identical
    across the two languages so joint bilingual training has a transferable
    signal, while filler vocabulary stays language-disjoint.
    """
    tables, per_label, shared = _build_cue_tables(cfg)
    rng = np.random.default_rng(cfg.seed)
    sizes = {
        "train": cfg.n_per_lang,
        "dev": max(1, math.ceil(cfg.n_per_lang * cfg.dev_frac)),
        "test": max(1, math.ceil(cfg.n_per_lang * cfg.test_frac)),
    }
    splits: dict[str, list[Instance]] = {name: [] for name in sizes}
    for split_name, size in sizes.items():
        for lang in ("en", "es"):
            for i in range(size):
                l1, l2, l3 = _sample_labels(cfg, rng)
                gold = [(1, l1)]
                if l1 == SEXIST:
                    gold.append((2, l2))
                    gold.extend((3, c) for c in sorted(l3))
                text = _make_text(lang, gold, per_label, cfg, rng)
                splits[split_name].append(Instance(
                    id=f"{lang}-{split_name}-{i:05d}",
                    lang=lang, text=text,
                    gold_l1=l1, gold_l2=l2, gold_l3=l3,
                ))
    meta = SynthMeta(cue_tables=tables, shared_words=shared, config=cfg)
    return Splits(splits["train"], splits["dev"], splits["test"]), meta


def cue_rule_predict(text: str, lang: str, meta: SynthMeta):
    """Lookup-rule oracle: labels read directly off planted cue words.

    Only exact at cue_strength=1; used to certify the perfect-information
    corpus and as a sanity baseline.
    """
    table = meta.cue_tables[lang]
    found: dict[int, set[str]] = {1: set(), 2: set(), 3: set()}
    for word in text.split():
        w = word.lstrip("#")
        if w in table:
            level, label = table[w]
            found[level].add(label)
    l1 = SEXIST if SEXIST in found[1] else (NOT_SEXIST if NOT_SEXIST in found[1] else None)
    l2 = next(iter(found[2])) if len(found[2]) == 1 else None
    return l1, l2, frozenset(found[3])

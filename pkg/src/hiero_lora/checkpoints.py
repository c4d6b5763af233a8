"""Model and adapter-bank checkpoints (.npz containers).

Every file embeds a JSON metadata block and the content hash of the base
weights it belongs to; loading adapters against a model with a different
base hash is a hard error. `checkpoint_content_hash` digests the container
canonically (sorted array names + metadata) so two runs that produced the
same numbers hash identically regardless of archive timestamps.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .hierarchy import AdapterBank
from .lora import (AdaptedLinear, LoraConfig, LoraFactors, QuantizedMatrix,
                   base_content_hash)
from .model import Block, Model, ModelConfig
from .numerics import Tensor

_FORMAT_VERSION = 1


def model_base_hash(model: Model) -> str:
    return base_content_hash(model.adapted_layers())


def _write_npz(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    payload = {"__meta__": np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def _read_npz(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as zf:
        arrays = {k: zf[k] for k in zf.files}
    raw = arrays.pop("__meta__", None)
    if raw is None:
        raise DataError(f"{path}: not a recognized checkpoint (missing metadata)")
    return json.loads(raw.tobytes().decode()), arrays


def checkpoint_content_hash(path) -> str:
    """Digest of metadata plus every array, independent of archive bytes."""
    meta, arrays = _read_npz(path)
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(arrays):
        arr = arrays[name]
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.int64(arr.shape).tobytes())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

def save_model(model: Model, path) -> None:
    cfg = model.cfg
    meta = {
        "format_version": _FORMAT_VERSION,
        "kind": "model",
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "base_hash": model_base_hash(model),
    }
    arrays: dict[str, np.ndarray] = {
        "embed_tokens": model.embed.data,
        "pos_embeddings": model.pos.data,
        "final_gain": model.final_gain.data,
    }
    for i, block in enumerate(model.blocks):
        arrays[f"blocks.{i}.attn_gain"] = block.attn_gain.data
        arrays[f"blocks.{i}.ffn_gain"] = block.ffn_gain.data
    for name, layer in model.adapted_layers().items():
        if isinstance(layer.base, QuantizedMatrix):
            q = layer.base
            arrays[f"{name}.q4.codes"] = q.codes
            arrays[f"{name}.q4.scales"] = q.scales
            arrays[f"{name}.q4.shape"] = np.int64([q.shape[0], q.shape[1], q.block_size])
        else:
            arrays[f"{name}.base"] = layer.base.data
    _write_npz(path, meta, arrays)


def load_model(path) -> Model:
    meta, arrays = _read_npz(path)
    if meta.get("kind") != "model":
        raise DataError(f"{path}: not a model checkpoint")
    cfg = ModelConfig(**meta["config"])

    def load_linear(name: str, trainable: bool = False) -> AdaptedLinear:
        tag = name.rsplit(".", 1)[-1]
        if f"{name}.base" in arrays:
            return AdaptedLinear(tag, Tensor(arrays[f"{name}.base"]),
                                 trainable_base=trainable)
        shape = arrays[f"{name}.q4.shape"]
        q = QuantizedMatrix((int(shape[0]), int(shape[1])), int(shape[2]),
                            arrays[f"{name}.q4.scales"], arrays[f"{name}.q4.codes"])
        return AdaptedLinear(tag, q)

    blocks = []
    for i in range(cfg.n_layers):
        layers = {name: load_linear(f"blocks.{i}.{name}")
                  for name in ("q_proj", "k_proj", "v_proj", "o_proj",
                               "gate_proj", "up_proj", "down_proj")}
        blocks.append(Block(layers,
                            attn_gain=Tensor(arrays[f"blocks.{i}.attn_gain"]),
                            ffn_gain=Tensor(arrays[f"blocks.{i}.ffn_gain"])))
    model = Model(cfg,
                  embed=Tensor(arrays["embed_tokens"], requires_grad=True),
                  pos=Tensor(arrays["pos_embeddings"]),
                  blocks=blocks,
                  final_gain=Tensor(arrays["final_gain"]),
                  lm_head=load_linear("lm_head", trainable=True))
    got = model_base_hash(model)
    if got != meta["base_hash"]:
        raise DataError(f"{path}: stored base hash does not match reloaded weights")
    return model


# ---------------------------------------------------------------------------
# adapter-bank checkpoints
# ---------------------------------------------------------------------------

def _key_str(key: tuple[int, str]) -> str:
    return f"{key[0]}|{key[1]}"


def save_adapter_bank(bank: AdapterBank, cfg: LoraConfig, path, model: Model) -> None:
    meta = {
        "format_version": _FORMAT_VERSION,
        "kind": "adapters",
        "granularity": bank.granularity,
        "lora_config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "base_hash": model_base_hash(model),
        "entries": [_key_str(k) for k in sorted(bank.entries)],
    }
    arrays: dict[str, np.ndarray] = {}
    for key, entry in bank.entries.items():
        for name, factors in entry.items():
            arrays[f"{_key_str(key)}/{name}/A"] = factors.a.data
            arrays[f"{_key_str(key)}/{name}/B"] = factors.b.data
    _write_npz(path, meta, arrays)


def load_adapter_bank(path, model: Model) -> tuple[AdapterBank, LoraConfig]:
    """Rebuild a bank; refuses to load against a mismatched base."""
    meta, arrays = _read_npz(path)
    if meta.get("kind") != "adapters":
        raise DataError(f"{path}: not an adapter checkpoint")
    if meta["base_hash"] != model_base_hash(model):
        raise DataError(
            f"{path}: adapter checkpoint was trained against a different base "
            "(content hash mismatch)")
    cfg = LoraConfig(**meta["lora_config"])
    bank = AdapterBank(granularity=meta["granularity"])
    for key_str in meta["entries"]:
        level_s, parent = key_str.split("|", 1)
        key = (int(level_s), parent)
        entry: dict[str, LoraFactors] = {}
        names = {k.split("/")[1] for k in arrays if k.startswith(f"{key_str}/")}
        for name in sorted(names):
            a = Tensor(arrays[f"{key_str}/{name}/A"], requires_grad=True)
            b = Tensor(arrays[f"{key_str}/{name}/B"], requires_grad=True)
            entry[name] = LoraFactors(b, a, cfg.scaling, cfg.dropout)
        bank.entries[key] = entry
    return bank, cfg

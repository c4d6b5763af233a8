"""Checkpoint round-trips, base-hash verification, content hashing."""

import numpy as np
import pytest

from hiero_lora.checkpoints import (checkpoint_content_hash, load_adapter_bank,
                                    load_model, model_base_hash,
                                    save_adapter_bank, save_model)
from hiero_lora.errors import DataError
from hiero_lora.hierarchy import AdapterBank
from hiero_lora.lora import LoraConfig
from hiero_lora.model import ModelConfig, build_model

TINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq=64)
QTINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq=64,
                    quantize_base=True, quant_block=32)


@pytest.mark.parametrize("cfg", [TINY, QTINY])
def test_model_roundtrip_preserves_forward(cfg, tmp_path):
    model = build_model(cfg, seed=4)
    path = tmp_path / "model.npz"
    save_model(model, path)
    back = load_model(path)
    tokens = [1, 2, 3, 250]
    assert np.array_equal(model.forward(tokens).data, back.forward(tokens).data)
    assert model_base_hash(model) == model_base_hash(back)


def test_adapter_bank_roundtrip(tmp_path):
    model = build_model(TINY, seed=1)
    cfg = LoraConfig(rank=2, alpha=2.0, seed=1)
    bank = AdapterBank.build(model.layer_dims(), cfg)
    rng = np.random.default_rng(0)
    for entry in bank.entries.values():
        for f in entry.values():
            f.a.data[...] = rng.normal(size=f.a.shape)
    path = tmp_path / "adapters.npz"
    save_adapter_bank(bank, cfg, path, model)
    back, back_cfg = load_adapter_bank(path, model)
    assert back.granularity == bank.granularity
    assert back_cfg == cfg
    assert set(back.entries) == set(bank.entries)
    for key, entry in bank.entries.items():
        for name, f in entry.items():
            assert np.array_equal(back.entries[key][name].a.data, f.a.data)
            assert np.array_equal(back.entries[key][name].b.data, f.b.data)


def test_adapter_load_rejects_mismatched_base(tmp_path):
    model = build_model(TINY, seed=1)
    cfg = LoraConfig(rank=2, alpha=2.0)
    bank = AdapterBank.build(model.layer_dims(), cfg)
    path = tmp_path / "adapters.npz"
    save_adapter_bank(bank, cfg, path, model)
    other = build_model(TINY, seed=2)
    with pytest.raises(DataError, match="hash"):
        load_adapter_bank(path, other)


def test_content_hash_tracks_values_not_archive_bytes(tmp_path):
    model = build_model(TINY, seed=9)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_model(model, p1)
    save_model(model, p2)
    assert checkpoint_content_hash(p1) == checkpoint_content_hash(p2)
    model.embed.data[0, 0] += 1.0
    p3 = tmp_path / "c.npz"
    save_model(model, p3)
    assert checkpoint_content_hash(p3) != checkpoint_content_hash(p1)


def test_load_missing_checkpoint():
    with pytest.raises(DataError):
        load_model("does-not-exist.npz")

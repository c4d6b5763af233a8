"""Transformer construction, causality, adapter attachment, classification."""

import numpy as np
import pytest

from hiero_lora import numerics as nx
from hiero_lora.data import ASST_ID, EOT_ID, SYS_ID, USER_ID, VERBALIZER_IDS
from hiero_lora.errors import ConfigError, ContractError, DataError
from hiero_lora.hierarchy import AdapterBank
from hiero_lora.lora import LoraConfig, init_lora, merge
from hiero_lora.model import ModelConfig, arch_listing, attach, build_model
from hiero_lora.numerics import Graph, Tensor, grad_check

TINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_seq=32)


def tiny_model(seed=0, cfg=TINY):
    return build_model(cfg, seed=seed)


def tiny_bank(model, rank=2, dropout=0.0, seed=0):
    cfg = LoraConfig(rank=rank, alpha=float(rank), dropout=dropout, seed=seed)
    return AdapterBank.build(model.layer_dims(), cfg)


def test_build_is_deterministic():
    m1, m2 = tiny_model(3), tiny_model(3)
    assert np.array_equal(m1.embed.data, m2.embed.data)
    assert np.array_equal(m1.pos.data, m2.pos.data)
    for (n1, l1), (n2, l2) in zip(sorted(m1.adapted_layers().items()),
                                  sorted(m2.adapted_layers().items())):
        assert n1 == n2
        assert np.array_equal(l1.base_matrix(), l2.base_matrix())
    m3 = tiny_model(4)
    assert not np.array_equal(m1.embed.data, m3.embed.data)


def test_forward_shapes_and_finiteness():
    m = tiny_model()
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, TINY.vocab_size, size=12).tolist()
    logits = m.forward(tokens)
    assert logits.shape == (12, TINY.vocab_size)
    assert not logits.has_nonfinite()
    single = m.forward([5])
    assert single.shape == (1, TINY.vocab_size)


def test_parameter_total_matches_hand_count():
    cfg = TINY
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_block = 4 * d * d + 2 * f * d + d * f + 2 * d
    expect = v * d + cfg.max_seq * d + cfg.n_layers * per_block + d + v * d
    m = tiny_model()
    assert m.n_params() == expect
    assert sum(e.n_params for e in arch_listing(cfg)) == expect


def test_forward_rejects_bad_tokens():
    m = tiny_model()
    with pytest.raises(DataError):
        m.forward([TINY.vocab_size])
    with pytest.raises(DataError):
        m.forward(list(range(TINY.max_seq + 1)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=100)


# ---------------------------------------------------------------------------
# attach / detach
# ---------------------------------------------------------------------------

def test_attach_detach_restores_forward_exactly():
    m = tiny_model()
    tokens = [1, 2, 3, 4]
    before = m.forward(tokens).data
    bank = tiny_bank(m)
    attach(m, bank.entries[(1, "*")])
    mid = m.forward(tokens).data
    attach(m, None)
    after = m.forward(tokens).data
    assert np.array_equal(before, mid)  # fresh factors: exact no-op
    assert np.array_equal(before, after)


def test_attach_replaces_previous_set():
    m = tiny_model()
    bank = tiny_bank(m)
    attach(m, bank.entries[(1, "*")], key=(1, "*"))
    attach(m, bank.entries[(2, "*")], key=(2, "*"))
    assert m.active_key == (2, "*")
    assert m.lm_head.active is bank.entries[(2, "*")]["lm_head"]


def test_attach_rejects_bad_dims_and_unknown_tags():
    m = tiny_model()
    bad = {"q_proj": init_lora(8, 8, LoraConfig(rank=2, alpha=2.0))}
    with pytest.raises(ConfigError):
        attach(m, bad)
    nonsense = {"zz_proj": init_lora(16, 16, LoraConfig(rank=2, alpha=2.0))}
    with pytest.raises(ConfigError):
        attach(m, nonsense)


def test_bank_difference_matches_merged_weight_difference():
    m = tiny_model()
    bank = tiny_bank(m)
    rng = np.random.default_rng(9)
    for key in ((1, "*"), (2, "*")):
        for factors in bank.entries[key].values():
            factors.a.data[...] = 0.05 * rng.normal(size=factors.a.shape)
            factors.b.data[...] = 0.05 * rng.normal(size=factors.b.shape)
    tokens = [7, 8, 9]

    outs, merged_outs = [], []
    for key in ((1, "*"), (2, "*")):
        attach(m, bank.entries[key])
        outs.append(m.forward(tokens).data)
        merged = {name: merge(layer) for name, layer in m.adapted_layers().items()}
        m2 = tiny_model()
        for name, layer in m2.adapted_layers().items():
            layer._base_tensor.data[...] = merged[name]
            layer.base.data[...] = merged[name]
        merged_outs.append(m2.forward(tokens).data)
    diff = outs[0] - outs[1]
    merged_diff = merged_outs[0] - merged_outs[1]
    assert np.max(np.abs(diff - merged_diff)) <= 1e-10


# ---------------------------------------------------------------------------
# causality
# ---------------------------------------------------------------------------

def test_future_tokens_cannot_influence_past_logits():
    m = tiny_model()
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 255, size=10).tolist()
    base = m.forward(tokens).data
    for t in (0, 4, 8):
        fut = tokens.copy()
        perm = rng.permutation(np.arange(t + 1, 10)).tolist()
        fut[t + 1:] = [tokens[j] for j in perm]
        fut_logits = m.forward(fut).data
        assert np.allclose(base[: t + 1], fut_logits[: t + 1], atol=1e-12)


# ---------------------------------------------------------------------------
# class logits
# ---------------------------------------------------------------------------

def _answer_prompt():
    return [SYS_ID, 65, EOT_ID, USER_ID, 66, 67, EOT_ID, ASST_ID]


@pytest.mark.parametrize("level,n", [(1, 2), (2, 3), (3, 5)])
def test_class_logits_cardinality(level, n):
    m = tiny_model()
    assert m.class_logits(_answer_prompt(), level).shape == (n,)


def test_class_logits_rejects_bad_level():
    m = tiny_model()
    with pytest.raises(ContractError):
        m.class_logits(_answer_prompt(), 4)


def test_class_logits_consistent_with_full_forward():
    m = tiny_model()
    tokens = _answer_prompt()
    full = m.forward(tokens).data[-1]
    for level, labels in ((1, 2), (2, 3), (3, 5)):
        scores = m.class_logits(tokens, level).data
        from hiero_lora.data import verbalizer_ids
        assert np.max(np.abs(scores - full[verbalizer_ids(level)])) <= 1e-12


def test_equal_label_logits_with_zeroed_lm_head_rows():
    m = tiny_model()
    for vid in VERBALIZER_IDS.values():
        m.lm_head.base.data[vid, :] = 0.0
    scores = m.class_logits(_answer_prompt(), 3).data
    assert np.all(scores == scores[0])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_adapter_locality_frozen_bases_get_no_gradient():
    m = tiny_model()
    bank = tiny_bank(m)
    rng = np.random.default_rng(2)
    entry = bank.entries[(1, "*")]
    for factors in entry.values():
        factors.a.data[...] = 0.1 * rng.normal(size=factors.a.shape)
    attach(m, entry)
    with Graph() as g:
        scores = m.class_logits(_answer_prompt(), 1)
        g.backward(nx.tsum(scores))
    for name, layer in m.adapted_layers().items():
        if name != "lm_head":
            assert layer.base.grad is None, name
        assert layer.active.a.grad is not None, name
    assert m.lm_head.base.grad is not None      # modules-to-save
    assert m.embed.grad is not None
    assert m.pos.grad is None                   # positions stay frozen


def test_end_to_end_gradcheck_tiny_model():
    m = tiny_model(seed=6)
    bank = tiny_bank(m, rank=2, seed=6)
    entry = bank.entries[(1, "*")]
    rng = np.random.default_rng(10)
    for factors in entry.values():
        factors.a.data[...] = 0.05 * rng.normal(size=factors.a.shape)
        factors.b.data[...] = 0.05 * rng.normal(size=factors.b.shape)
    attach(m, entry)
    tokens = _answer_prompt()
    gold = 0

    def loss():
        scores = m.class_logits(tokens, 1)
        return nx.neg(nx.tsum(nx.gather(nx.log_softmax(scores, axis=0), [gold])))

    params = {}
    for name, factors in entry.items():
        params[f"{name}.A"] = factors.a
        params[f"{name}.B"] = factors.b
    report = grad_check(loss, params, step=1e-5, tol=1e-4)
    assert report.passed, report.per_param

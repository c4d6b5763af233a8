"""The small causal transformer whose linear maps all host adapters.

Architecture per block: rms-norm -> multi-head causal attention
(q/k/v/o projections) -> residual, rms-norm -> gated FFN
(silu(gate) * up -> down) -> residual; then a final rms-norm and lm_head.
Classification is generative: per-class scores are the lm_head logits of the
reserved verbalizer tokens, read at the answer position of the prompt.

Trainable set: attached adapter factors, the token embedding table, and the
lm_head base. Position embeddings, norm gains, and every other base matrix
stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import MIN_VOCAB_SIZE, verbalizer_ids
from .errors import ConfigError, ContractError, DataError
from .lora import AdaptedLinear, LayerDim, LoraFactors, quantize
from .numerics import Tensor

ATTN_MODULES = ("q_proj", "k_proj", "v_proj", "o_proj")
FFN_MODULES = ("gate_proj", "up_proj", "down_proj")

_NORM_EPS = 1e-6
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 288
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq: int = 128
    dtype: str = "float64"
    quantize_base: bool = False
    quant_block: int = 64

    def __post_init__(self):
        dims = (self.vocab_size, self.d_model, self.n_heads, self.n_layers,
                self.d_ff, self.max_seq)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all model dimensions must be positive: {dims}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ConfigError(
                f"vocab_size must cover bytes+specials+verbalizers (>= {MIN_VOCAB_SIZE})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Block:
    def __init__(self, layers: dict[str, AdaptedLinear], attn_gain: Tensor, ffn_gain: Tensor):
        self.layers = layers
        self.attn_gain = attn_gain
        self.ffn_gain = ffn_gain


class Model:
    def __init__(self, cfg: ModelConfig, embed: Tensor, pos: Tensor,
                 blocks: list[Block], final_gain: Tensor, lm_head: AdaptedLinear):
        self.cfg = cfg
        self.embed = embed          # trainable (modules-to-save)
        self.pos = pos              # frozen learned-position table
        self.blocks = blocks
        self.final_gain = final_gain
        self.lm_head = lm_head      # adapter target with a trainable base
        self.active_key = None      # routing key of the attached adapter set

    # -- layer bookkeeping ------------------------------------------------
    def adapted_layers(self) -> dict[str, AdaptedLinear]:
        out: dict[str, AdaptedLinear] = {}
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers.items():
                out[f"blocks.{i}.{name}"] = layer
        out["lm_head"] = self.lm_head
        return out

    def layer_dims(self) -> dict[str, tuple[int, int]]:
        """Target-module tag -> (d_out, d_in) for building adapter banks."""
        dims = {name: (self.cfg.d_model, self.cfg.d_model) for name in ATTN_MODULES}
        dims["gate_proj"] = (self.cfg.d_ff, self.cfg.d_model)
        dims["up_proj"] = (self.cfg.d_ff, self.cfg.d_model)
        dims["down_proj"] = (self.cfg.d_model, self.cfg.d_ff)
        dims["lm_head"] = (self.cfg.vocab_size, self.cfg.d_model)
        return dims

    def attach(self, entry: dict[str, LoraFactors] | None, key=None) -> None:
        attach(self, entry, key)

    def trainables(self) -> list[tuple[str, Tensor]]:
        """Named trainable tensors: adapter factors + embeddings + lm_head base."""
        params: list[tuple[str, Tensor]] = [("embed_tokens", self.embed),
                                            ("lm_head.base", self.lm_head.base)]
        for name, layer in sorted(self.adapted_layers().items()):
            if layer.active is not None:
                params.append((f"{name}.lora.A", layer.active.a))
                params.append((f"{name}.lora.B", layer.active.b))
        return params

    def frozen_bases(self) -> dict[str, np.ndarray]:
        out = {"pos": self.pos.data}
        for i, block in enumerate(self.blocks):
            for name, layer in block.layers.items():
                out[f"blocks.{i}.{name}"] = layer.base_matrix()
            out[f"blocks.{i}.attn_gain"] = block.attn_gain.data
            out[f"blocks.{i}.ffn_gain"] = block.ffn_gain.data
        out["final_gain"] = self.final_gain.data
        return out

    def n_params(self) -> int:
        return sum(e.n_params for e in arch_listing(self.cfg))

    # -- forward ------------------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("token sequence must be a nonempty flat list")
        if ids.size > self.cfg.max_seq:
            raise DataError(f"sequence length {ids.size} exceeds max_seq={self.cfg.max_seq}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise DataError(
                f"token id out of range [0,{self.cfg.vocab_size}): {int(ids.max())}")
        return ids

    def _attention(self, xn: Tensor, block: Block, train_mode: bool, rng) -> Tensor:
        cfg = self.cfg
        n = xn.shape[0]
        q = block.layers["q_proj"].forward(xn, train_mode, rng)
        k = block.layers["k_proj"].forward(xn, train_mode, rng)
        v = block.layers["v_proj"].forward(xn, train_mode, rng)
        mask = np.triu(np.full((n, n), -np.inf, dtype=xn.dtype), k=1)
        heads = []
        inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
        for h in range(cfg.n_heads):
            lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
            qh = nx.slice_cols(q, lo, hi)
            kh = nx.slice_cols(k, lo, hi)
            vh = nx.slice_cols(v, lo, hi)
            scores = nx.add(nx.scale(nx.matmul_t(qh, kh), inv_sqrt), mask)
            att = nx.softmax(scores, axis=1)
            heads.append(nx.matmul(att, vh))
        ctx = heads[0] if len(heads) == 1 else nx.concat_cols(heads)
        return block.layers["o_proj"].forward(ctx, train_mode, rng)

    def hidden(self, tokens, train_mode: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Final-norm hidden states (seq, d_model), before the lm_head."""
        ids = self._check_tokens(tokens)
        x = nx.add(nx.take_rows(self.embed, ids), self.pos.data[: ids.size])
        for block in self.blocks:
            attn = self._attention(nx.rms_norm(x, block.attn_gain, _NORM_EPS),
                                   block, train_mode, rng)
            x = nx.add(x, attn)
            xn = nx.rms_norm(x, block.ffn_gain, _NORM_EPS)
            gate = nx.silu(block.layers["gate_proj"].forward(xn, train_mode, rng))
            up = block.layers["up_proj"].forward(xn, train_mode, rng)
            ffn = block.layers["down_proj"].forward(nx.mul(gate, up), train_mode, rng)
            x = nx.add(x, ffn)
        return nx.rms_norm(x, self.final_gain, _NORM_EPS)

    def forward(self, tokens, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits (seq, vocab) under causal self-attention."""
        return self.lm_head.forward(self.hidden(tokens, train_mode, rng),
                                    train_mode, rng)

    def class_logits(self, tokens, level: int, train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """lm_head logits restricted to the verbalizer tokens of a level,
        read at the last position (the caller supplies a prompt that ends at
        the answer slot)."""
        if level not in (1, 2, 3):
            raise ContractError(f"level must be 1, 2 or 3, got {level}")
        h = self.hidden(tokens, train_mode, rng)
        last = nx.take_rows(h, [h.shape[0] - 1])
        logits = self.lm_head.forward(last, train_mode, rng)
        row = nx.reshape(logits, (logits.shape[1],))
        return nx.gather(row, verbalizer_ids(level))


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic initialization from the seed; no adapters attached."""
    rng = np.random.default_rng(seed)
    dt = np.float32 if cfg.dtype == "float32" else np.float64

    def normal(shape):
        return rng.normal(0.0, _INIT_STD, size=shape).astype(dt)

    def linear(name, d_out, d_in, trainable=False):
        w = normal((d_out, d_in))
        if cfg.quantize_base and not trainable:
            return AdaptedLinear(name, quantize(w, cfg.quant_block))
        return AdaptedLinear(name, Tensor(w), trainable_base=trainable)

    embed = Tensor(normal((cfg.vocab_size, cfg.d_model)), requires_grad=True)
    pos = Tensor(normal((cfg.max_seq, cfg.d_model)))
    blocks = []
    for _ in range(cfg.n_layers):
        layers = {name: linear(name, cfg.d_model, cfg.d_model) for name in ATTN_MODULES}
        layers["gate_proj"] = linear("gate_proj", cfg.d_ff, cfg.d_model)
        layers["up_proj"] = linear("up_proj", cfg.d_ff, cfg.d_model)
        layers["down_proj"] = linear("down_proj", cfg.d_model, cfg.d_ff)
        blocks.append(Block(layers,
                            attn_gain=Tensor(np.ones(cfg.d_model, dtype=dt)),
                            ffn_gain=Tensor(np.ones(cfg.d_model, dtype=dt))))
    final_gain = Tensor(np.ones(cfg.d_model, dtype=dt))
    lm_head = linear("lm_head", cfg.vocab_size, cfg.d_model, trainable=True)
    return Model(cfg, embed, pos, blocks, final_gain, lm_head)


def attach(model: Model, entry, key=None) -> None:
    """Attach one adapter entry (replacing any previous one), or detach all.

    An entry is a mapping target-module tag -> LoraFactors, or a bank entry
    object with `.factors` and optional `.saved` module values; saved values
    (token embeddings, lm_head base) are copied into the model, realizing
    per-adapter modules-to-save.
    """
    saved = None
    if entry is not None and hasattr(entry, "factors"):
        saved = entry.saved
        entry = entry.factors
    layers = model.adapted_layers()
    if entry is not None:
        dims = model.layer_dims()
        for name, factors in entry.items():
            if name not in dims:
                raise ConfigError(f"unknown target module {name!r}")
            d_out, d_in = dims[name]
            if factors.d_out != d_out or factors.d_in != d_in:
                raise ConfigError(
                    f"{name}: adapter dims {factors.d_out}x{factors.d_in} "
                    f"do not match layer {d_out}x{d_in}")
    for qualified, layer in layers.items():
        tag = qualified.rsplit(".", 1)[-1] if "." in qualified else qualified
        layer.attach(None if entry is None else entry.get(tag))
    if saved is not None:
        model.embed.data[...] = saved["embed_tokens"]
        model.lm_head.base.data[...] = saved["lm_head"]
    model.active_key = key if entry is not None else None


def arch_listing(cfg: ModelConfig) -> list[LayerDim]:
    """Every base parameter block, for the trainable-parameter accountant."""
    entries = [
        LayerDim("embed_tokens", "embed_tokens", cfg.vocab_size, cfg.d_model),
        LayerDim("pos_embeddings", "pos_embeddings", cfg.max_seq, cfg.d_model),
    ]
    for i in range(cfg.n_layers):
        for name in ATTN_MODULES:
            entries.append(LayerDim(f"blocks.{i}.{name}", name,
                                    cfg.d_model, cfg.d_model, adapted=True))
        entries.append(LayerDim(f"blocks.{i}.gate_proj", "gate_proj",
                                cfg.d_ff, cfg.d_model, adapted=True))
        entries.append(LayerDim(f"blocks.{i}.up_proj", "up_proj",
                                cfg.d_ff, cfg.d_model, adapted=True))
        entries.append(LayerDim(f"blocks.{i}.down_proj", "down_proj",
                                cfg.d_model, cfg.d_ff, adapted=True))
        entries.append(LayerDim(f"blocks.{i}.attn_gain", "norm_gain", cfg.d_model, 1))
        entries.append(LayerDim(f"blocks.{i}.ffn_gain", "norm_gain", cfg.d_model, 1))
    entries.append(LayerDim("final_gain", "norm_gain", cfg.d_model, 1))
    entries.append(LayerDim("lm_head", "lm_head", cfg.vocab_size, cfg.d_model, adapted=True))
    return entries

"""Low-rank adapter factors, frozen (optionally 4-bit) base matrices, and
trainable-parameter accounting.

Weight convention throughout: a linear map stores W as (d_out, d_in) and is
applied as y = x @ W^T. An adapter adds scaling * (x @ A^T) @ B^T with
B (d_out, r) and A (r, d_in); A starts at zero so a fresh adapter is an
exact no-op.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

TARGET_MODULES = (
    "q_proj", "k_proj", "v_proj", "o_proj",
    "gate_proj", "up_proj", "down_proj", "lm_head",
)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.1
    init_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.init_sigma <= 0:
            raise ConfigError(f"init_sigma must be positive, got {self.init_sigma}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraFactors:
    """One trainable (B, A) pair plus its scaling and dropout rate."""

    __slots__ = ("b", "a", "scaling", "dropout")

    def __init__(self, b: Tensor, a: Tensor, scaling: float, dropout: float):
        self.b = b
        self.a = a
        self.scaling = float(scaling)
        self.dropout = float(dropout)

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def n_params(self) -> int:
        return self.b.size + self.a.size

    def delta(self) -> np.ndarray:
        """The materialized low-rank update scaling * B @ A."""
        return self.scaling * (self.b.data @ self.a.data)


def init_lora(d_out: int, d_in: int, cfg: LoraConfig,
              rng: np.random.Generator | None = None,
              dtype: str = "float64") -> LoraFactors:
    """B ~ N(0, sigma^2), A = 0, so B @ A = 0 at creation."""
    if d_out < 1 or d_in < 1:
        raise ConfigError(f"dimensions must be positive, got {d_out}x{d_in}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    dt = np.float32 if dtype == "float32" else np.float64
    b = Tensor(rng.normal(0.0, cfg.init_sigma, size=(d_out, cfg.rank)).astype(dt),
               requires_grad=True)
    a = Tensor(np.zeros((cfg.rank, d_in), dtype=dt), requires_grad=True)
    return LoraFactors(b, a, cfg.scaling, cfg.dropout)


# ---------------------------------------------------------------------------
# blockwise 4-bit quantization
# ---------------------------------------------------------------------------

# codes 0..15 map to 16 symmetric levels (+-1/15, +-3/15, ..., +-15/15) of the
# block absmax; the worst-case round-trip error is absmax/15, comfortably
# inside the absmax/7 bound the rest of the package relies on.
_LEVELS = (np.arange(16, dtype=np.float64) - 7.5) / 7.5


class QuantizedMatrix:
    """Frozen weight matrix stored as per-block absmax scales + 4-bit codes."""

    __slots__ = ("shape", "block_size", "scales", "codes")

    def __init__(self, shape: tuple[int, int], block_size: int,
                 scales: np.ndarray, codes: np.ndarray):
        self.shape = shape
        self.block_size = block_size
        self.scales = scales
        self.codes = codes

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    def payload_bytes(self) -> int:
        # 4 bits per code plus one float64 scale per block
        return (self.codes.size + 1) // 2 + self.scales.size * 8

    def dequantize(self) -> np.ndarray:
        flat = np.repeat(self.scales, self.block_size)[: self.n_elements]
        return (flat * _LEVELS[self.codes]).reshape(self.shape)


def quantize(w: np.ndarray, block_size: int = 64) -> QuantizedMatrix:
    """Blockwise absmax quantization to the 16 symmetric levels."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ContractError("cannot quantize an empty matrix")
    if w.ndim != 2:
        raise DimensionError(f"quantize needs a 2-D matrix, got shape {w.shape}")
    if block_size < 1:
        raise ContractError(f"block_size must be >= 1, got {block_size}")
    flat = w.reshape(-1)
    n_blocks = -(-flat.size // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.rint(blocks / safe[:, None] * 7.5 + 7.5).astype(np.int64)
    codes = np.clip(codes, 0, 15).astype(np.uint8).reshape(-1)[: flat.size]
    return QuantizedMatrix(w.shape, block_size, scales, codes)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.dequantize()


# ---------------------------------------------------------------------------
# adapted linear layers
# ---------------------------------------------------------------------------

class AdaptedLinear:
    """A frozen base linear map with an optional attached adapter.

    The base is a plain Tensor (trainable only for lm_head) or a
    QuantizedMatrix; the quantized payload is dequantized once and cached,
    and the optimizer never touches it.
    """

    def __init__(self, name: str, base, trainable_base: bool = False):
        if name not in TARGET_MODULES:
            raise ConfigError(f"unknown target module {name!r}")
        self.name = name
        if isinstance(base, QuantizedMatrix):
            if trainable_base:
                raise ConfigError("a quantized base cannot be trainable")
            self.base = base
            self._base_tensor = Tensor(base.dequantize())
        else:
            self.base = base if isinstance(base, Tensor) else Tensor(np.asarray(base))
            self.base.requires_grad = trainable_base
            self._base_tensor = self.base
        self.active: LoraFactors | None = None

    @property
    def d_out(self) -> int:
        return self._base_tensor.shape[0]

    @property
    def d_in(self) -> int:
        return self._base_tensor.shape[1]

    @property
    def trainable_base(self) -> bool:
        return isinstance(self.base, Tensor) and self.base.requires_grad

    def base_matrix(self) -> np.ndarray:
        """Materialized base weights (dequantized if stored 4-bit)."""
        return self._base_tensor.data

    def attach(self, factors: LoraFactors | None) -> None:
        if factors is not None and (factors.d_out != self.d_out or factors.d_in != self.d_in):
            raise ConfigError(
                f"{self.name}: adapter dims {factors.d_out}x{factors.d_in} do not match "
                f"layer {self.d_out}x{self.d_in}")
        self.active = factors

    def forward(self, x: Tensor, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(
                f"{self.name}: input shape {x.shape} does not match d_in={self.d_in}")
        y = nx.matmul_t(x, self._base_tensor)
        f = self.active
        if f is None:
            return y
        xin = x
        if train_mode and f.dropout > 0.0:
            xin = nx.dropout(x, f.dropout, rng)
        delta = nx.matmul_t(nx.matmul_t(xin, f.a), f.b)
        return nx.add(y, nx.scale(delta, f.scaling))


def forward_adapted(x: Tensor, layer: AdaptedLinear, train_mode: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    return layer.forward(x, train_mode=train_mode, rng=rng)


def merge(layer: AdaptedLinear) -> np.ndarray:
    """Export-form weights: dequantized base + scaling * B @ A."""
    if layer.active is None:
        raise ContractError(f"{layer.name}: merge needs attached adapter factors")
    return layer.base_matrix() + layer.active.delta()


def base_content_hash(layers: dict[str, AdaptedLinear]) -> str:
    """Deterministic digest of every base matrix, in name order."""
    h = hashlib.sha256()
    for name in sorted(layers):
        layer = layers[name]
        h.update(name.encode())
        if isinstance(layer.base, QuantizedMatrix):
            q = layer.base
            h.update(b"q4")
            h.update(np.int64([q.shape[0], q.shape[1], q.block_size]).tobytes())
            h.update(q.scales.tobytes())
            h.update(q.codes.tobytes())
        else:
            h.update(b"fp")
            h.update(np.int64(layer.base.shape).tobytes())
            h.update(layer.base.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerDim:
    """One base parameter block of the model, as seen by the accountant."""
    name: str         # qualified, e.g. "blocks.0.q_proj"
    tag: str          # module tag used for adapter targeting / modules_to_save
    d_out: int
    d_in: int
    adapted: bool = False

    @property
    def n_params(self) -> int:
        return self.d_out * self.d_in


@dataclass(frozen=True)
class TrainableCount:
    lora_params: int
    saved_params: int
    total_params: int
    trainable_fraction: float = field(init=False)

    def __post_init__(self):
        frac = (self.lora_params + self.saved_params) / self.total_params
        object.__setattr__(self, "trainable_fraction", frac)


def count_trainable(arch: list[LayerDim], cfg: LoraConfig,
                    modules_to_save: set[str] = frozenset({"lm_head", "embed_tokens"})
                    ) -> TrainableCount:
    """lora = sum over adapted layers of r*(d_in+d_out); saved = full size of
    modules_to_save; total = all base parameters (adapters excluded)."""
    if not arch:
        raise ConfigError("empty architecture listing")
    tags = {entry.tag for entry in arch}
    unknown = set(modules_to_save) - tags
    if unknown:
        raise ConfigError(f"modules_to_save names not in architecture: {sorted(unknown)}")
    lora = sum(cfg.rank * (e.d_in + e.d_out) for e in arch if e.adapted)
    saved = sum(e.n_params for e in arch if e.tag in modules_to_save)
    total = sum(e.n_params for e in arch)
    return TrainableCount(lora, saved, total)

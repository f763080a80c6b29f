"""Toy Mamba-style and hybrid SSM/attention causal language models.

Models are random-initialised, never trained. Heterogeneous quantization
sensitivity comes from :class:`OutlierSpec`, which inflates a subset of input
channels in chosen projection subtypes.

Block layouts (pre-norm, residual):

* ``SSM``  -- ``in_proj -> conv1d -> silu -> x_proj -> (dt_proj, B, C) ->
  selective scan -> gate -> out_proj``.
* ``ATTN`` -- single-head causal attention (``qkv_proj``, ``o_proj``)
  followed by an MLP (``up_proj``, silu, ``down_proj``).

Random streams: every tensor draws from its own ``numpy.random.PCG64``
generator seeded by ``SeedSequence(seed, spawn_key=(block, slot, purpose))``.
A tensor's values therefore depend only on the model seed and its own
position, never on how many other tensors were drawn before it.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx

__all__ = [
    "Subtype",
    "LayerDescriptor",
    "OutlierSpec",
    "ModelConfig",
    "Model",
    "ConfigError",
    "DescriptorError",
    "build_model",
    "default_hybrid_config",
    "forward",
    "forward_batch",
    "forward_from",
    "trace_batch",
    "list_quantizable_layers",
    "save_model",
    "load_model",
]

MAGIC = b"SSMSENS\x00"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DescriptorError(KeyError):
    pass


class Subtype(str, enum.Enum):
    """Weight-tensor subtypes. Declaration order is the in-block enumeration order."""

    MAMBA_IN_PROJ = "mamba.in_proj"
    MAMBA_CONV1D = "mamba.conv1d"
    MAMBA_X_PROJ = "mamba.x_proj"
    MAMBA_DT_PROJ = "mamba.dt_proj"
    MAMBA_OUT_PROJ = "mamba.out_proj"
    ATTN_QKV_PROJ = "attn.qkv_proj"
    ATTN_O_PROJ = "attn.o_proj"
    MLP_UP_PROJ = "mlp.up_proj"
    MLP_DOWN_PROJ = "mlp.down_proj"
    EMBEDDING = "embedding"
    LM_HEAD = "lm_head"

    @property
    def order(self) -> int:
        return _SUBTYPE_ORDER[self]

    def __str__(self) -> str:
        return self.value


_SUBTYPE_ORDER = {s: i for i, s in enumerate(Subtype)}

SSM_SUBTYPES = (
    Subtype.MAMBA_IN_PROJ,
    Subtype.MAMBA_CONV1D,
    Subtype.MAMBA_X_PROJ,
    Subtype.MAMBA_DT_PROJ,
    Subtype.MAMBA_OUT_PROJ,
)
ATTN_SUBTYPES = (
    Subtype.ATTN_QKV_PROJ,
    Subtype.ATTN_O_PROJ,
    Subtype.MLP_UP_PROJ,
    Subtype.MLP_DOWN_PROJ,
)
BLOCK_KINDS = ("SSM", "ATTN")


@dataclass(frozen=True)
class LayerDescriptor:
    """One weight tensor: ``(block_index, subtype)``.

    ``embedding`` sits at block 0 and ``lm_head`` at ``num_blocks`` (one past
    the last block).
    """

    block_index: int
    subtype: Subtype

    def __post_init__(self):
        object.__setattr__(self, "subtype", Subtype(self.subtype))
        if self.block_index < 0:
            raise DescriptorError(f"negative block index {self.block_index}")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.block_index, self.subtype.order)

    @property
    def is_block_layer(self) -> bool:
        return self.subtype not in (Subtype.EMBEDDING, Subtype.LM_HEAD)

    def __str__(self) -> str:
        return f"{self.block_index}:{self.subtype.value}"


@dataclass(frozen=True)
class OutlierSpec:
    """Scale a seeded subset of input channels (weight columns) by ``magnitude_multiplier``.

    Column outliers are what hurts per-output-channel quantization: one large
    column sets the scale of every row it crosses.
    """

    fraction_of_channels: float = 0.0
    magnitude_multiplier: float = 1.0
    target_subtypes: tuple[Subtype, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "target_subtypes", tuple(sorted({Subtype(s) for s in self.target_subtypes}, key=lambda s: s.order))
        )
        if not 0.0 <= self.fraction_of_channels <= 1.0:
            raise ConfigError("outlier fraction_of_channels must be in [0, 1]")
        if not self.magnitude_multiplier >= 1.0:
            raise ConfigError("outlier magnitude_multiplier must be >= 1")
        if Subtype.EMBEDDING in self.target_subtypes:
            raise ConfigError("embedding cannot be an outlier target")

    def channels_for(self, n_in: int) -> int:
        if self.fraction_of_channels == 0.0:
            return 0
        return max(1, int(round(self.fraction_of_channels * n_in)))


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int
    block_pattern: tuple[str, ...]
    d_model: int = 32
    d_state: int = 8
    d_conv: int = 4
    mlp_ratio: int = 2
    vocab_size: int = 256
    seed: int = 0
    outlier_spec: OutlierSpec = field(default_factory=OutlierSpec)
    expand: int = 2
    max_seq_len: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "block_pattern", tuple(str(b).upper() for b in self.block_pattern))
        if isinstance(self.outlier_spec, Mapping):
            object.__setattr__(self, "outlier_spec", OutlierSpec(**self.outlier_spec))
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1 or self.num_blocks != len(self.block_pattern):
            raise ConfigError(
                f"num_blocks={self.num_blocks} must be >= 1 and equal len(block_pattern)={len(self.block_pattern)}"
            )
        bad = [b for b in self.block_pattern if b not in BLOCK_KINDS]
        if bad:
            raise ConfigError(f"unknown block kinds {bad}; expected {BLOCK_KINDS}")
        for name in ("d_model", "d_state", "d_conv", "mlp_ratio", "expand", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_pattern"] = list(self.block_pattern)
        d["outlier_spec"]["target_subtypes"] = [s.value for s in self.outlier_spec.target_subtypes]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["block_pattern"] = tuple(d["block_pattern"])
        d["outlier_spec"] = OutlierSpec(**d.get("outlier_spec", {}))
        return cls(**d)


def default_hybrid_config(seed: int = 0) -> ModelConfig:
    """Eight-block alternating SSM/ATTN toy with 8x outliers in ``mamba.x_proj``."""
    return ModelConfig(
        num_blocks=8,
        block_pattern=("SSM", "ATTN") * 4,
        d_model=32,
        d_state=8,
        d_conv=4,
        mlp_ratio=2,
        vocab_size=256,
        seed=seed,
        outlier_spec=OutlierSpec(0.125, 8.0, (Subtype.MAMBA_X_PROJ,)),
    )


def weight_shapes(config: ModelConfig) -> dict[LayerDescriptor, tuple[int, int]]:
    """Every weight tensor in canonical order: embedding, blocks, lm_head."""
    c = config
    shapes = {LayerDescriptor(0, Subtype.EMBEDDING): (c.vocab_size, c.d_model)}
    for i, kind in enumerate(c.block_pattern):
        if kind == "SSM":
            block = {
                Subtype.MAMBA_IN_PROJ: (2 * c.d_inner, c.d_model),
                Subtype.MAMBA_CONV1D: (c.d_inner, c.d_conv),
                Subtype.MAMBA_X_PROJ: (c.dt_rank + 2 * c.d_state, c.d_inner),
                Subtype.MAMBA_DT_PROJ: (c.d_inner, c.dt_rank),
                Subtype.MAMBA_OUT_PROJ: (c.d_model, c.d_inner),
            }
        else:
            hidden = c.mlp_ratio * c.d_model
            block = {
                Subtype.ATTN_QKV_PROJ: (3 * c.d_model, c.d_model),
                Subtype.ATTN_O_PROJ: (c.d_model, c.d_model),
                Subtype.MLP_UP_PROJ: (hidden, c.d_model),
                Subtype.MLP_DOWN_PROJ: (c.d_model, hidden),
            }
        for sub, shape in block.items():
            shapes[LayerDescriptor(i, sub)] = shape
    shapes[LayerDescriptor(c.num_blocks, Subtype.LM_HEAD)] = (c.vocab_size, c.d_model)
    return shapes


def aux_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Non-quantizable parameters (norm gains, biases, SSM state params), canonical order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {}
    for i, kind in enumerate(c.block_pattern):
        shapes[f"blocks.{i}.norm"] = (c.d_model,)
        if kind == "SSM":
            shapes[f"blocks.{i}.conv_bias"] = (c.d_inner,)
            shapes[f"blocks.{i}.dt_bias"] = (c.d_inner,)
            shapes[f"blocks.{i}.A_log"] = (c.d_inner, c.d_state)
            shapes[f"blocks.{i}.D"] = (c.d_inner,)
        else:
            shapes[f"blocks.{i}.norm2"] = (c.d_model,)
    shapes["final_norm"] = (c.d_model,)
    return shapes


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable weights plus config. Arrays are flagged read-only.

    Students produced by the quantizer share every untouched array with
    their teacher.
    """

    config: ModelConfig
    weights: Mapping[LayerDescriptor, np.ndarray]
    aux: Mapping[str, np.ndarray]

    def __post_init__(self):
        for arr in list(self.weights.values()) + list(self.aux.values()):
            arr.setflags(write=False)

    def weight(self, layer: LayerDescriptor) -> np.ndarray:
        try:
            return self.weights[layer]
        except KeyError:
            raise DescriptorError(f"model has no layer {layer}") from None

    def with_weights(self, replacements: Mapping[LayerDescriptor, np.ndarray]) -> "Model":
        unknown = [d for d in replacements if d not in self.weights]
        if unknown:
            raise DescriptorError(f"unknown layers {', '.join(map(str, unknown))}")
        weights = dict(self.weights)
        for d, w in replacements.items():
            w = nx.as_tensor(w)
            if w.shape != self.weights[d].shape:
                raise ValueError(f"shape mismatch for {d}: {w.shape} != {self.weights[d].shape}")
            weights[d] = w
        return Model(self.config, weights, self.aux)

    def param_counts(self) -> dict[LayerDescriptor, int]:
        return {d: int(w.size) for d, w in self.weights.items()}

    @property
    def aux_param_count(self) -> int:
        return int(sum(a.size for a in self.aux.values()))

    @property
    def total_params(self) -> int:
        return sum(self.param_counts().values()) + self.aux_param_count


def _stream(seed: int, block: int, slot: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block, slot, purpose))))


_W_PURPOSE, _OUTLIER_PURPOSE, _AUX_PURPOSE = 0, 1, 2


def build_model(config: ModelConfig) -> Model:
    """Seeded Gaussian init (std ``1/sqrt(fan_in)``; unit std for the embedding).

    Outlier columns are picked from a stream separate from the weight draw,
    so ``magnitude_multiplier=1`` reproduces the plain build bit-for-bit.
    ``softplus(dt_bias)`` is log-uniform in ``[1e-3, 1e-1]``.
    """
    config.validate()
    seed = config.seed
    spec = config.outlier_spec
    weights: dict[LayerDescriptor, np.ndarray] = {}
    for d, (n_out, n_in) in weight_shapes(config).items():
        std = 1.0 if d.subtype is Subtype.EMBEDDING else 1.0 / math.sqrt(n_in)
        w = _stream(seed, d.block_index, d.subtype.order, _W_PURPOSE).standard_normal((n_out, n_in)) * std
        if d.subtype in spec.target_subtypes:
            k = spec.channels_for(n_in)
            cols = np.sort(_stream(seed, d.block_index, d.subtype.order, _OUTLIER_PURPOSE).choice(n_in, k, replace=False))
            w[:, cols] *= spec.magnitude_multiplier
        weights[d] = w

    c = config
    aux: dict[str, np.ndarray] = {}
    for name, shape in aux_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm", "norm2", "final_norm", "D"):
            aux[name] = np.ones(shape)
        elif leaf == "conv_bias":
            aux[name] = np.zeros(shape)
        elif leaf == "A_log":
            aux[name] = np.log(np.tile(np.arange(1, c.d_state + 1, dtype=np.float64), (c.d_inner, 1)))
        elif leaf == "dt_bias":
            block = int(name.split(".")[1])
            u = _stream(seed, block, len(Subtype), _AUX_PURPOSE).random(shape)
            dt = np.exp(u * (math.log(1e-1) - math.log(1e-3)) + math.log(1e-3))
            aux[name] = dt + np.log(-np.expm1(-dt))
        else:  # pragma: no cover
            raise AssertionError(name)
    return Model(config, weights, aux)


def list_quantizable_layers(model: Model | ModelConfig, include_conv: bool = False) -> list[LayerDescriptor]:
    """Block-major list of quantizable weights; never the embedding, always ``lm_head``.

    ``mamba.conv1d`` is left out unless ``include_conv`` is set.
    """
    config = model.config if isinstance(model, Model) else model
    out = []
    for d in weight_shapes(config):
        if d.subtype is Subtype.EMBEDDING:
            continue
        if d.subtype is Subtype.MAMBA_CONV1D and not include_conv:
            continue
        out.append(d)
    return sorted(out, key=lambda d: d.sort_key)


def _check_tokens(model: Model, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise ValueError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {model.config.vocab_size})")
    if tokens.shape[-1] > model.config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}")
    return tokens.astype(np.int64)


def _ssm_block(model: Model, i: int, h: np.ndarray) -> np.ndarray:
    c = model.config
    W = lambda s: model.weights[LayerDescriptor(i, s)]  # noqa: E731
    u = nx.rmsnorm(h, model.aux[f"blocks.{i}.norm"])
    xz = nx.linear(u, W(Subtype.MAMBA_IN_PROJ))
    x, z = xz[..., : c.d_inner], xz[..., c.d_inner :]
    x = nx.silu(nx.causal_conv1d(x, W(Subtype.MAMBA_CONV1D), model.aux[f"blocks.{i}.conv_bias"]))
    dbc = nx.linear(x, W(Subtype.MAMBA_X_PROJ))
    r, n = c.dt_rank, c.d_state
    dt_low, Bm, Cm = dbc[..., :r], dbc[..., r : r + n], dbc[..., r + n :]
    dt = nx.softplus(nx.linear(dt_low, W(Subtype.MAMBA_DT_PROJ), model.aux[f"blocks.{i}.dt_bias"]))
    A = -np.exp(model.aux[f"blocks.{i}.A_log"])
    y = nx.selective_scan(x, A, Bm, Cm, dt) + x * model.aux[f"blocks.{i}.D"]
    y = y * nx.silu(z)
    return h + nx.linear(y, W(Subtype.MAMBA_OUT_PROJ))


def _attn_block(model: Model, i: int, h: np.ndarray) -> np.ndarray:
    d = model.config.d_model
    W = lambda s: model.weights[LayerDescriptor(i, s)]  # noqa: E731
    u = nx.rmsnorm(h, model.aux[f"blocks.{i}.norm"])
    qkv = nx.linear(u, W(Subtype.ATTN_QKV_PROJ))
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    scores = nx.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    t = scores.shape[-1]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    h = h + nx.linear(nx.matmul(nx.softmax(scores), v), W(Subtype.ATTN_O_PROJ))
    u = nx.rmsnorm(h, model.aux[f"blocks.{i}.norm2"])
    return h + nx.linear(nx.silu(nx.linear(u, W(Subtype.MLP_UP_PROJ))), W(Subtype.MLP_DOWN_PROJ))


def _embed(model: Model, tokens) -> np.ndarray:
    tokens = _check_tokens(model, tokens)
    if tokens.ndim != 2:
        raise ValueError("expected a [B, T] token array")
    return model.weights[LayerDescriptor(0, Subtype.EMBEDDING)][tokens]


def _run_blocks(model: Model, h: np.ndarray, start: int) -> np.ndarray:
    for i in range(start, model.config.num_blocks):
        h = _run_blocks_one(model, h, i)
    return h


def _head(model: Model, h: np.ndarray) -> np.ndarray:
    h = nx.rmsnorm(h, model.aux["final_norm"])
    return nx.linear(h, model.weights[LayerDescriptor(model.config.num_blocks, Subtype.LM_HEAD)])


def forward_batch(model: Model, tokens) -> np.ndarray:
    """Logits ``[B, T, V]`` for a ``[B, T]`` batch of equal-length sequences."""
    return _head(model, _run_blocks(model, _embed(model, tokens), 0))


def trace_batch(model: Model, tokens) -> list[np.ndarray]:
    """Residual stream entering each block, plus the final pre-norm state.

    Element ``i`` is the input of block ``i``; element ``num_blocks`` feeds the
    head. Pass the list to :func:`forward_from` to re-run a suffix.
    """
    h = _embed(model, tokens)
    states = [h]
    for i in range(model.config.num_blocks):
        h = _run_blocks_one(model, h, i)
        states.append(h)
    return states


def _run_blocks_one(model: Model, h: np.ndarray, i: int) -> np.ndarray:
    return _ssm_block(model, i, h) if model.config.block_pattern[i] == "SSM" else _attn_block(model, i, h)


def forward_from(model: Model, states: Sequence[np.ndarray], start_block: int) -> np.ndarray:
    """Logits from block ``start_block`` onward, reusing a :func:`trace_batch` prefix.

    Bit-identical to :func:`forward_batch` whenever ``model`` agrees with the
    traced model on every block before ``start_block`` and on the embedding.
    """
    if not 0 <= start_block <= model.config.num_blocks:
        raise ValueError(f"start_block {start_block} out of range")
    return _head(model, _run_blocks(model, states[start_block], start_block))


def forward(model: Model, tokens: Sequence[int]) -> np.ndarray:
    """Causal next-token logits ``[T, V]`` for one token sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("forward expects a 1-D token sequence")
    return forward_batch(model, tokens[None, :])[0]


def save_model(model: Model, path: str | Path) -> None:
    """Write the flat binary format.

    Layout: ``MAGIC`` (8 bytes), ``uint32`` version, ``uint32`` config length,
    UTF-8 JSON config, then every weight in :func:`weight_shapes` order and
    every aux tensor in :func:`aux_shapes` order as little-endian float64.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        f.write(cfg)
        for arr in _ordered_arrays(model):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _ordered_arrays(model: Model) -> Iterable[np.ndarray]:
    for d in weight_shapes(model.config):
        yield model.weights[d]
    for name in aux_shapes(model.config):
        yield model.aux[name]


def load_model(path: str | Path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 16 + n
    config = ModelConfig.from_dict(json.loads(buf[16:off]))

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        return arr

    weights = {d: take(s) for d, s in weight_shapes(config).items()}
    aux = {k: take(s) for k, s in aux_shapes(config).items()}
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Model(config, weights, aux)


def rebuild(config: ModelConfig, **changes) -> Model:
    """``build_model(replace(config, **changes))``."""
    return build_model(replace(config, **changes))

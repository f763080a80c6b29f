"""Symmetric per-output-channel fake quantization (weights only)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .model_zoo import DescriptorError, LayerDescriptor, Model, Subtype, list_quantizable_layers

__all__ = [
    "QuantSpec",
    "Precision",
    "PlanError",
    "INT4",
    "INT8",
    "channel_scales",
    "fake_quantize",
    "quantize_layer",
    "apply_assignment",
    "apply_plan",
]


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Symmetric, per-output-channel integer grid ``{-qmax..qmax} * scale``."""

    bits: int

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bits}; expected 4 or 8")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def name(self) -> str:
        return f"INT{self.bits}"


INT4 = QuantSpec(4)
INT8 = QuantSpec(8)


class Precision(str, enum.Enum):
    KEEP = "KEEP"
    INT8 = "INT8"
    INT4 = "INT4"

    @property
    def spec(self) -> QuantSpec | None:
        return {Precision.INT8: INT8, Precision.INT4: INT4}.get(self)

    @classmethod
    def for_bits(cls, bits: int) -> "Precision":
        return cls(f"INT{bits}")

    def __str__(self) -> str:
        return self.value


def _rows(w: np.ndarray) -> np.ndarray:
    # conv kernels and other >2-D weights flatten per output channel
    return w.reshape(w.shape[0], -1) if w.ndim != 2 else w


def channel_scales(w, spec: QuantSpec) -> np.ndarray:
    """Per-row ``max|w| / qmax``; all-zero rows get scale 1."""
    rows = _rows(np.asarray(w, dtype=np.float64))
    amax = np.max(np.abs(rows), axis=1) if rows.shape[1] else np.zeros(rows.shape[0])
    scale = amax / spec.qmax
    return np.where(amax == 0.0, 1.0, scale)


def fake_quantize(w, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize ``w[out, ...]`` row by row with round-half-to-even.

    The result is idempotent under a second application: the row maximum maps
    to ``qmax * scale`` and ``(qmax * scale) / qmax == scale`` for both
    supported widths.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("fake_quantize requires finite weights")
    rows = _rows(w)
    scale = channel_scales(rows, spec)[:, None]
    codes = np.clip(np.rint(rows / scale), -spec.qmax, spec.qmax)
    return (codes * scale).reshape(w.shape)


def quantize_layer(model: Model, layer: LayerDescriptor, spec: QuantSpec, include_conv: bool = True) -> Model:
    """Student with only ``layer`` fake-quantized; the teacher is left untouched.

    Raises:
        DescriptorError: for the embedding or a layer the model lacks.
    """
    _check_quantizable(model, [layer], include_conv)
    return model.with_weights({layer: fake_quantize(model.weight(layer), spec)})


def apply_assignment(
    model: Model, assignment: Mapping[LayerDescriptor, Precision], include_conv: bool = True
) -> Model:
    """Fake-quantize each layer at its assigned width; ``KEEP`` layers pass through."""
    try:
        _check_quantizable(model, assignment, include_conv)
    except DescriptorError as e:
        raise PlanError(str(e.args[0])) from None
    replacements = {}
    for layer, precision in assignment.items():
        precision = Precision(precision)
        if precision.spec is not None:
            replacements[layer] = fake_quantize(model.weight(layer), precision.spec)
    return model.with_weights(replacements) if replacements else model


def apply_plan(model: Model, plan, include_conv: bool = True) -> Model:
    """Apply a :class:`~ssmsens.planner.MixedPrecisionPlan` (anything with ``.assignment``)."""
    return apply_assignment(model, plan.assignment, include_conv)


def _check_quantizable(model: Model, layers: Iterable[LayerDescriptor], include_conv: bool) -> None:
    allowed = set(list_quantizable_layers(model, include_conv=include_conv))
    for layer in layers:
        if layer.subtype is Subtype.EMBEDDING:
            raise DescriptorError("embedding is not quantizable")
        if layer not in allowed:
            raise DescriptorError(f"{layer} is not a quantizable layer of this model")

"""Forward-only quantization sensitivity analysis for toy SSM and hybrid language models."""

from .corpus import TokenStream, load_text, synth_stream
from .metrics import EvalMode, KLDirection
from .model_zoo import LayerDescriptor, Model, ModelConfig, OutlierSpec, Subtype, build_model, default_hybrid_config
from .planner import MixedPrecisionPlan, make_merged_two_pass_plans, make_threshold_plans
from .quantizer import INT4, INT8, Precision, QuantSpec, fake_quantize
from .sensitivity import SensitivityRecord, correlate_all, kendall_tau, per_layer_sweep

__all__ = [
    "TokenStream", "load_text", "synth_stream",
    "EvalMode", "KLDirection",
    "LayerDescriptor", "Model", "ModelConfig", "OutlierSpec", "Subtype", "build_model", "default_hybrid_config",
    "MixedPrecisionPlan", "make_merged_two_pass_plans", "make_threshold_plans",
    "INT4", "INT8", "Precision", "QuantSpec", "fake_quantize",
    "SensitivityRecord", "correlate_all", "kendall_tau", "per_layer_sweep",
]

__version__ = "0.1.0"

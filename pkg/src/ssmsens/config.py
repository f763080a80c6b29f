"""Run configuration: a versioned TOML document, validated before any compute.

Schema (version 1); every key is optional and unknown keys are errors::

    version = 1

    [model]            # ModelConfig fields
    num_blocks = 8
    block_pattern = ["SSM", "ATTN", ...]
    d_model = 32
    d_state = 8
    d_conv = 4
    mlp_ratio = 2
    vocab_size = 256
    seed = 0
    expand = 2
    max_seq_len = 4096

    [model.outlier]
    fraction_of_channels = 0.125
    magnitude_multiplier = 8.0
    target_subtypes = ["mamba.x_proj"]

    [dataset]
    path = ""            # byte-level text file; empty -> synthetic stream
    synth_seed = 0
    synth_length = 2048
    chunk_len = 128

    [quant]
    bits = [8, 4]        # sweep widths; the first is the primary table
    exclude_conv = true

    [sweep]
    mode = "dataset_targets"      # or "teacher_analytic"
    metrics = ["sqnr_db", "kl_teacher_to_student", "kl_student_to_teacher", "delta_ce"]
    threads = 1
    ablation_bits = 4

    [plan]
    num_points = 10
    score_metric = "kl_student_to_teacher"
    width = 4
    family = "threshold"          # "threshold", "merged" or "both"

    [output]
    dir = "out"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .corpus import DEFAULT_CHUNK_LEN, TokenStream, load_text, synth_stream
from .metrics import EvalMode
from .model_zoo import ConfigError, ModelConfig, OutlierSpec, default_hybrid_config
from .sensitivity import METRIC_DIRECTIONS, PROXY_METRICS

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["RunConfig", "DatasetSection", "QuantSection", "SweepSection", "PlanSection", "load_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetSection:
    path: str = ""
    synth_seed: int = 0
    synth_length: int = 2048
    chunk_len: int = DEFAULT_CHUNK_LEN

    def load(self, vocab_size: int) -> TokenStream:
        if self.path:
            stream = load_text(self.path)
            if stream.vocab_size > vocab_size:
                raise ConfigError(f"byte-level dataset needs vocab_size >= 256, model has {vocab_size}")
            return stream
        return synth_stream(self.synth_seed, self.synth_length, vocab_size)


@dataclass(frozen=True)
class QuantSection:
    bits: tuple[int, ...] = (8, 4)
    exclude_conv: bool = True


@dataclass(frozen=True)
class SweepSection:
    mode: EvalMode = EvalMode.DATASET_TARGETS
    metrics: tuple[str, ...] = PROXY_METRICS
    threads: int = 1
    ablation_bits: int = 4


@dataclass(frozen=True)
class PlanSection:
    num_points: int = 10
    score_metric: str = "kl_student_to_teacher"
    width: int = 4
    family: str = "threshold"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=default_hybrid_config)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    quant: QuantSection = field(default_factory=QuantSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    plan: PlanSection = field(default_factory=PlanSection)
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.model.validate()
        q, s, p, d = self.quant, self.sweep, self.plan, self.dataset
        if not q.bits or any(b not in (4, 8) for b in q.bits) or len(set(q.bits)) != len(q.bits):
            raise ConfigError(f"quant.bits must be distinct values from {{4, 8}}, got {list(q.bits)}")
        if s.threads < 1:
            raise ConfigError("sweep.threads must be >= 1")
        unknown = [m for m in s.metrics if m not in PROXY_METRICS]
        if unknown or not s.metrics:
            raise ConfigError(f"sweep.metrics must be a non-empty subset of {list(PROXY_METRICS)}")
        if s.ablation_bits not in q.bits:
            raise ConfigError("sweep.ablation_bits must be one of quant.bits")
        if p.num_points < 1:
            raise ConfigError("plan.num_points must be >= 1")
        if p.score_metric not in METRIC_DIRECTIONS:
            raise ConfigError(f"plan.score_metric must be one of {sorted(METRIC_DIRECTIONS)}")
        if p.family not in ("threshold", "merged", "both"):
            raise ConfigError("plan.family must be 'threshold', 'merged' or 'both'")
        if p.family in ("threshold", "both") and p.width not in q.bits:
            raise ConfigError("plan.width must be one of quant.bits")
        if p.family in ("merged", "both") and set(q.bits) != {4, 8}:
            raise ConfigError("merged plans need quant.bits to contain both 4 and 8")
        if d.synth_length < 2 or d.chunk_len < 1:
            raise ConfigError("dataset.synth_length must be >= 2 and dataset.chunk_len >= 1")

    @property
    def primary_bits(self) -> int:
        return self.quant.bits[0]

    def with_overrides(self, *, out: str | None = None, threads: int | None = None, seed: int | None = None) -> "RunConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output_dir=out)
        if threads is not None:
            cfg = replace(cfg, sweep=replace(cfg.sweep, threads=threads))
        if seed is not None:
            cfg = replace(cfg, model=replace(cfg.model, seed=seed))
        return cfg

    def fingerprint(self) -> dict[str, Any]:
        """Everything that determines sweep results (not threads, not output dir)."""
        return {
            "model": self.model.to_dict(),
            "dataset": {"path": self.dataset.path, "synth_seed": self.dataset.synth_seed,
                        "synth_length": self.dataset.synth_length, "chunk_len": self.dataset.chunk_len},
            "quant": {"bits": list(self.quant.bits), "exclude_conv": self.quant.exclude_conv},
            "mode": self.sweep.mode.value,
        }


def _strict(section: str, table: Mapping[str, Any], allowed: set[str]) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


def _section(cls, name: str, table: Mapping[str, Any], convert: Mapping[str, Any] = {}):
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    _strict(name, table, {f.name for f in fields(cls)})
    kwargs = {k: convert.get(k, lambda v: v)(v) for k, v in table.items()}
    return cls(**kwargs)


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    _strict("root", doc, {"version", "model", "dataset", "quant", "sweep", "plan", "output"})
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}; expected {SCHEMA_VERSION}")

    base = default_hybrid_config()
    model_tbl = dict(doc.get("model", {}))
    outlier_tbl = model_tbl.pop("outlier", None)
    _strict("model", model_tbl, {f.name for f in fields(ModelConfig)} - {"outlier_spec"})
    if "block_pattern" in model_tbl:
        model_tbl["block_pattern"] = tuple(model_tbl["block_pattern"])
        model_tbl.setdefault("num_blocks", len(model_tbl["block_pattern"]))
    elif "num_blocks" in model_tbl:
        n = model_tbl["num_blocks"]
        model_tbl["block_pattern"] = tuple(("SSM", "ATTN")[i % 2] for i in range(n))
    if outlier_tbl is not None:
        outlier = _section(OutlierSpec, "model.outlier", outlier_tbl, {"target_subtypes": tuple})
    else:
        outlier = base.outlier_spec
    try:
        model = replace(base, outlier_spec=outlier, **model_tbl)
    except TypeError as e:
        raise ConfigError(str(e)) from None

    return RunConfig(
        model=model,
        dataset=_section(DatasetSection, "dataset", doc.get("dataset", {})),
        quant=_section(QuantSection, "quant", doc.get("quant", {}), {"bits": tuple}),
        sweep=_section(SweepSection, "sweep", doc.get("sweep", {}), {"mode": EvalMode, "metrics": tuple}),
        plan=_section(PlanSection, "plan", doc.get("plan", {})),
        output_dir=_output_dir(doc.get("output", {})),
    )


def _output_dir(table: Mapping[str, Any]) -> str:
    _strict("output", table, {"dir"})
    return str(table.get("dir", "out"))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as f:
        try:
            doc = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return parse_config(doc)

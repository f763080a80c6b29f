"""Mixed-precision plans from per-layer sensitivity scores.

Two plan families:

* threshold family ``p01..pN`` -- one width; plan ``k`` quantizes the
  ``ceil(k * L / N)`` least-sensitive layers and keeps the rest.
* merged two-pass family ``m01..mN`` -- INT4 and INT8 scores of every
  layer go into one ascending list (two entries per layer); cut ``k`` selects
  the first ``ceil(k * 2L / N)`` entries and, when both entries of a layer are
  selected, the later one wins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .metrics import perplexity
from .model_zoo import LayerDescriptor, Model, Subtype, list_quantizable_layers
from .quantizer import PlanError, Precision, apply_plan
from .sensitivity import METRIC_DIRECTIONS, Evaluator, SensitivityRecord

__all__ = [
    "MixedPrecisionPlan",
    "SizeReport",
    "PlanEvaluation",
    "MergedEntry",
    "DEFAULT_SCORE",
    "make_threshold_plans",
    "threshold_plan",
    "merged_entries",
    "merged_plan_at_cut",
    "make_merged_two_pass_plans",
    "uniform_plan",
    "baseline_plan",
    "estimate_size",
    "evaluate_plan",
    "plan_to_json",
    "plan_from_json",
]

DEFAULT_SCORE = "kl_student_to_teacher"
BYTES_PER_PARAM = {Precision.KEEP: 2.0, Precision.INT8: 1.0, Precision.INT4: 0.5}


@dataclass(frozen=True)
class MixedPrecisionPlan:
    name: str
    assignment: Mapping[LayerDescriptor, Precision]
    threshold: float | None = None
    family: str = "threshold"

    def __post_init__(self):
        for layer in self.assignment:
            if layer.subtype is Subtype.EMBEDDING:
                raise PlanError("embedding cannot appear in a plan")
        object.__setattr__(self, "assignment", {k: Precision(v) for k, v in self.assignment.items()})

    def quantized(self) -> dict[LayerDescriptor, Precision]:
        return {k: v for k, v in self.assignment.items() if v is not Precision.KEEP}


@dataclass(frozen=True)
class SizeReport:
    total_bytes: int
    per_layer_bytes: Mapping[LayerDescriptor, int]
    aux_bytes: int
    by_precision: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class PlanEvaluation:
    plan: MixedPrecisionPlan
    ppl: float
    size: SizeReport


def _point_name(prefix: str, k: int, n: int) -> str:
    return f"{prefix}{k:0{max(2, len(str(n)))}d}"


def _scores(records: Sequence[SensitivityRecord], metric: str) -> list[float]:
    if metric not in METRIC_DIRECTIONS:
        raise KeyError(f"unknown score metric {metric!r}")
    return [r.metric(metric) for r in records]


def _least_sensitive_first(records: Sequence[SensitivityRecord], metric: str) -> list[int]:
    scores = _scores(records, metric)
    sign = 1.0 if METRIC_DIRECTIONS[metric] else -1.0
    return sorted(range(len(scores)), key=lambda i: sign * scores[i])


def _cut(k: int, total: int, num_points: int) -> int:
    return -(-k * total // num_points)


def make_threshold_plans(
    records: Sequence[SensitivityRecord],
    num_points: int = 10,
    width: Precision = Precision.INT4,
    metric: str = DEFAULT_SCORE,
) -> list[MixedPrecisionPlan]:
    """Nested quantile plans ``p01..pN``.

    ``threshold`` holds the score of the least-sensitive layer that stays at
    full precision (``inf`` once every layer is quantized). Ties in score are
    broken by layer enumeration order, so plan ``k`` always quantizes exactly
    ``ceil(k * L / N)`` layers.
    """
    if not records:
        raise ValueError("make_threshold_plans needs at least one record")
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    width = Precision(width)
    if width is Precision.KEEP:
        raise ValueError("plan width must be INT4 or INT8")
    order = _least_sensitive_first(records, metric)
    scores = _scores(records, metric)
    n = len(records)
    plans = []
    for k in range(1, num_points + 1):
        m = _cut(k, n, num_points)
        chosen = set(order[:m])
        assignment = {r.layer: (width if i in chosen else Precision.KEEP) for i, r in enumerate(records)}
        kappa = scores[order[m]] if m < n else math.inf
        plans.append(MixedPrecisionPlan(_point_name("p", k, num_points), assignment, kappa, "threshold"))
    return plans


def threshold_plan(
    records: Sequence[SensitivityRecord],
    kappa: float,
    width: Precision = Precision.INT4,
    metric: str = DEFAULT_SCORE,
    name: str = "threshold",
) -> MixedPrecisionPlan:
    """Literal threshold rule: keep a layer when its score is at least as sensitive as ``kappa``.

    For descending metrics (the KLs) that is ``s >= kappa``; for SQNR it is
    ``s <= kappa``. ``kappa = -inf`` keeps everything for KL scores and
    ``kappa = +inf`` quantizes everything.
    """
    width = Precision(width)
    scores = _scores(records, metric)
    descending = METRIC_DIRECTIONS[metric]
    assignment = {}
    for r, s in zip(records, scores):
        keep = s >= kappa if descending else s <= kappa
        assignment[r.layer] = Precision.KEEP if keep else width
    return MixedPrecisionPlan(name, assignment, kappa, "threshold")


@dataclass(frozen=True)
class MergedEntry:
    layer: LayerDescriptor
    width: Precision
    score: float


def merged_entries(
    records_int4: Sequence[SensitivityRecord],
    records_int8: Sequence[SensitivityRecord],
    metric: str = DEFAULT_SCORE,
) -> list[MergedEntry]:
    """Both widths' entries, least sensitive first.

    The list is built as all INT4 entries then all INT8 entries and sorted
    stably, so an exact score tie leaves the INT8 entry later.

    Raises:
        PlanError: if the two record lists cover different layers.
    """
    l4 = [r.layer for r in records_int4]
    l8 = [r.layer for r in records_int8]
    if sorted(l4, key=lambda d: d.sort_key) != sorted(l8, key=lambda d: d.sort_key) or len(set(l4)) != len(l4):
        raise PlanError("INT4 and INT8 records must cover the same layers")
    sign = 1.0 if METRIC_DIRECTIONS[metric] else -1.0
    entries = [MergedEntry(r.layer, Precision.INT4, r.metric(metric)) for r in records_int4]
    entries += [MergedEntry(r.layer, Precision.INT8, r.metric(metric)) for r in records_int8]
    return sorted(entries, key=lambda e: sign * e.score)


def merged_plan_at_cut(
    entries: Sequence[MergedEntry], cut: int, name: str = "merged", layers: Sequence[LayerDescriptor] | None = None
) -> MixedPrecisionPlan:
    """Select ``entries[:cut]``; later entries overwrite earlier ones for the same layer."""
    if not 0 <= cut <= len(entries):
        raise ValueError(f"cut {cut} outside [0, {len(entries)}]")
    if layers is None:
        layers = sorted({e.layer for e in entries}, key=lambda d: d.sort_key)
    assignment = {layer: Precision.KEEP for layer in layers}
    for e in entries[:cut]:
        assignment[e.layer] = e.width
    return MixedPrecisionPlan(name, assignment, None, "merged")


def make_merged_two_pass_plans(
    records_int4: Sequence[SensitivityRecord],
    records_int8: Sequence[SensitivityRecord],
    num_points: int = 10,
    metric: str = DEFAULT_SCORE,
) -> list[MixedPrecisionPlan]:
    """``m01..mN`` cut at ``ceil(k * 2L / N)`` entries of the merged list."""
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    entries = merged_entries(records_int4, records_int8, metric)
    layers = [r.layer for r in records_int4]
    return [
        merged_plan_at_cut(entries, _cut(k, len(entries), num_points), _point_name("m", k, num_points), layers)
        for k in range(1, num_points + 1)
    ]


def uniform_plan(model: Model, width: Precision, include_conv: bool = False) -> MixedPrecisionPlan:
    width = Precision(width)
    layers = list_quantizable_layers(model, include_conv=include_conv)
    return MixedPrecisionPlan(f"uniform_{width.value.lower()}", {d: width for d in layers}, None, "uniform")


def baseline_plan(model: Model, include_conv: bool = False) -> MixedPrecisionPlan:
    layers = list_quantizable_layers(model, include_conv=include_conv)
    return MixedPrecisionPlan("fp_baseline", {d: Precision.KEEP for d in layers}, None, "baseline")


def _nbytes(count: int, precision: Precision) -> int:
    if precision is Precision.INT4:
        return (count + 1) // 2
    return int(count * BYTES_PER_PARAM[precision])


def estimate_size(model: Model, plan: MixedPrecisionPlan) -> SizeReport:
    """Analytic storage size: FP16-equivalent 2 bytes/param unless quantized.

    The embedding and all non-weight parameters always count at 2 bytes.
    """
    per_layer = {}
    by_precision = {"FP16": 0, "INT8": 0, "INT4": 0}
    for layer, count in model.param_counts().items():
        p = plan.assignment.get(layer, Precision.KEEP)
        b = _nbytes(count, p)
        per_layer[layer] = b
        by_precision["FP16" if p is Precision.KEEP else p.value] += b
    aux = _nbytes(model.aux_param_count, Precision.KEEP)
    by_precision["FP16"] += aux
    return SizeReport(sum(per_layer.values()) + aux, per_layer, aux, by_precision)


def evaluate_plan(model: Model, plan: MixedPrecisionPlan, dataset=None, evaluator: Evaluator | None = None) -> PlanEvaluation:
    """Dataset-target perplexity of the plan's student, paired with its size.

    Pass a shared ``evaluator`` to reuse the teacher's cached pass across plans.
    """
    if evaluator is None:
        if dataset is None:
            raise ValueError("evaluate_plan needs a dataset or an evaluator")
        evaluator = Evaluator(model, dataset)
    elif evaluator.teacher is not model:
        raise ValueError("evaluator was built for a different teacher")
    student = apply_plan(model, plan)
    quantized = plan.quantized()
    start = min((d.block_index for d in quantized), default=model.config.num_blocks)
    logits = evaluator.logits(student, start)
    return PlanEvaluation(plan, perplexity(evaluator.student_ce(logits)), estimate_size(model, plan))


def _encode_threshold(t: float | None):
    if t is None or math.isfinite(t):
        return t
    return "inf" if t > 0 else "-inf"


def _decode_threshold(t):
    if t is None or isinstance(t, (int, float)):
        return None if t is None else float(t)
    return float(t)


def plan_to_json(plan: MixedPrecisionPlan) -> str:
    """``{name, family, threshold, assignments: [{block, subtype, width}]}``.

    Non-finite thresholds are written as the strings ``"inf"``/``"-inf"``.
    """
    doc = {
        "name": plan.name,
        "family": plan.family,
        "threshold": _encode_threshold(plan.threshold),
        "assignments": [
            {"block": d.block_index, "subtype": d.subtype.value, "width": p.value}
            for d, p in sorted(plan.assignment.items(), key=lambda kv: kv[0].sort_key)
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def plan_from_json(text: str) -> MixedPrecisionPlan:
    doc = json.loads(text)
    assignment = {
        LayerDescriptor(int(a["block"]), Subtype(a["subtype"])): Precision(a["width"]) for a in doc["assignments"]
    }
    return MixedPrecisionPlan(doc["name"], assignment, _decode_threshold(doc.get("threshold")), doc.get("family", "threshold"))


def write_plan(plan: MixedPrecisionPlan, path: str | Path) -> None:
    Path(path).write_text(plan_to_json(plan))

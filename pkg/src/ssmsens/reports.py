"""CSV writers/readers for sweep, correlation, ablation and Pareto tables.

Column orders are fixed. Floats are written with ``repr`` so they parse back
to the identical double (``inf`` included).
"""

from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

from .model_zoo import LayerDescriptor, Subtype
from .planner import PlanEvaluation
from .quantizer import QuantSpec
from .sensitivity import BlockSensitivity, RankCorrelation, SensitivityRecord

RECORD_COLUMNS = (
    "block", "subtype", "bits", "teacher_ppl", "student_ppl", "delta_ppl",
    "sqnr_db", "kl_teacher_to_student", "kl_student_to_teacher", "delta_ce",
)
CORRELATION_COLUMNS = ("metric", "tau", "p_value", "n")
SUBTYPE_COLUMNS = ("subtype", "mean_delta_ppl", "count")
LAYER_COLUMNS = ("block", "sum_delta_ppl", "fraction")
PARETO_COLUMNS = ("name", "threshold", "ppl", "size_bytes")


def _f(x: float) -> str:
    return repr(float(x))


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def records_csv(records: Sequence[SensitivityRecord]) -> str:
    return _csv(RECORD_COLUMNS, (
        (r.layer.block_index, r.layer.subtype.value, r.spec.bits, _f(r.teacher_ppl), _f(r.student_ppl),
         _f(r.delta_ppl), _f(r.sqnr_db), _f(r.kl_teacher_to_student), _f(r.kl_student_to_teacher), _f(r.delta_ce))
        for r in records
    ))


def parse_records_csv(text: str) -> list[SensitivityRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
        raise ValueError(f"unexpected records.csv header {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(SensitivityRecord(
            layer=LayerDescriptor(int(row["block"]), Subtype(row["subtype"])),
            spec=QuantSpec(int(row["bits"])),
            **{k: float(row[k]) for k in RECORD_COLUMNS[3:]},
        ))
    return out


def correlations_csv(correlations: Sequence[RankCorrelation]) -> str:
    return _csv(CORRELATION_COLUMNS, ((c.metric, _f(c.tau), _f(c.p_value), c.n) for c in correlations))


def subtype_avg_csv(averages: dict[Subtype, float], records: Sequence[SensitivityRecord]) -> str:
    counts = {s: sum(1 for r in records if r.layer.subtype is s) for s in averages}
    return _csv(SUBTYPE_COLUMNS, ((s.value, _f(v), counts[s]) for s, v in averages.items()))


def layer_cumulative_csv(blocks: Sequence[BlockSensitivity]) -> str:
    return _csv(LAYER_COLUMNS, ((b.block_index, _f(b.total_delta_ppl), _f(b.fraction)) for b in blocks))


def pareto_csv(evaluations: Sequence[PlanEvaluation]) -> str:
    rows = []
    for e in evaluations:
        t = e.plan.threshold
        rows.append((e.plan.name, "" if t is None else _f(t), _f(e.ppl), e.size.total_bytes))
    return _csv(PARETO_COLUMNS, rows)

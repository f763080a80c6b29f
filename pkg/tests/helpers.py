"""Record fixtures shared by the sensitivity and planner tests."""

from ssmsens.model_zoo import LayerDescriptor, Subtype
from ssmsens.quantizer import INT4, QuantSpec
from ssmsens.sensitivity import SensitivityRecord

SUBTYPE_CYCLE = (Subtype.MAMBA_IN_PROJ, Subtype.MAMBA_X_PROJ, Subtype.MAMBA_DT_PROJ, Subtype.MAMBA_OUT_PROJ)


def make_record(layer, delta_ppl=0.0, sqnr=30.0, kl_ts=0.0, kl_st=0.0, dce=0.0, spec: QuantSpec = INT4,
                teacher_ppl=10.0):
    return SensitivityRecord(
        layer=layer, teacher_ppl=teacher_ppl, student_ppl=teacher_ppl + delta_ppl, delta_ppl=delta_ppl,
        sqnr_db=sqnr, kl_teacher_to_student=kl_ts, kl_student_to_teacher=kl_st, delta_ce=dce, spec=spec,
    )


def layers(n: int) -> list[LayerDescriptor]:
    return [LayerDescriptor(i // 4, SUBTYPE_CYCLE[i % 4]) for i in range(n)]


def score_records(scores, metric="kl_student_to_teacher", spec: QuantSpec = INT4):
    key = {"kl_student_to_teacher": "kl_st", "kl_teacher_to_student": "kl_ts", "sqnr_db": "sqnr",
           "delta_ce": "dce", "delta_ppl": "delta_ppl"}[metric]
    return [make_record(d, spec=spec, **{key: s}) for d, s in zip(layers(len(scores)), scores)]

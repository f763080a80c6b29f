"""Per-layer quantization sweep, metric rankings and Kendall rank correlation.

A sweep quantizes one layer at a time, always starting from the pristine
teacher, evaluates the student over a token stream and records the
perplexity change next to four forward-only proxy metrics. Rankings put the
most sensitive layer first for every metric so the proxies can be compared
to the ground-truth delta-PPL ranking with Kendall's tau.
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import metrics as M
from .corpus import DEFAULT_CHUNK_LEN, TokenStream, iter_chunks
from .metrics import EvalMode, KLDirection
from .model_zoo import LayerDescriptor, Model, Subtype, forward_from, list_quantizable_layers, trace_batch
from .quantizer import QuantSpec, quantize_layer

__all__ = [
    "SensitivityRecord",
    "RankCorrelation",
    "BlockSensitivity",
    "Evaluator",
    "per_layer_sweep",
    "evaluate_layer",
    "rank_by_metric",
    "ranks_from_order",
    "kendall_tau",
    "correlate_all",
    "subtype_average",
    "layer_cumulative",
    "paired_tau_test",
    "METRIC_DIRECTIONS",
    "PROXY_METRICS",
]

# True = sort descending. Position 0 of every ranking is the most sensitive layer.
METRIC_DIRECTIONS: dict[str, bool] = {
    "student_ppl": True,
    "delta_ppl": True,
    "sqnr_db": False,
    "kl_teacher_to_student": True,
    "kl_student_to_teacher": True,
    "delta_ce": True,
}
GROUND_TRUTH = "delta_ppl"
PROXY_METRICS = ("sqnr_db", "kl_teacher_to_student", "kl_student_to_teacher", "delta_ce")


@dataclass(frozen=True)
class SensitivityRecord:
    layer: LayerDescriptor
    teacher_ppl: float
    student_ppl: float
    delta_ppl: float
    sqnr_db: float
    kl_teacher_to_student: float
    kl_student_to_teacher: float
    delta_ce: float
    spec: QuantSpec

    def metric(self, name: str) -> float:
        if name == "perplexity":
            name = "student_ppl"
        if name not in METRIC_DIRECTIONS:
            raise KeyError(f"unknown metric {name!r}; expected one of {sorted(METRIC_DIRECTIONS)}")
        return getattr(self, name)


@dataclass(frozen=True)
class RankCorrelation:
    tau: float
    p_value: float
    n: int
    metric: str = ""


@dataclass(frozen=True)
class BlockSensitivity:
    block_index: int
    total_delta_ppl: float
    fraction: float


class Evaluator:
    """Token stream split into chunk batches, plus the cached teacher pass.

    Equal-length chunks are evaluated as one batch; the (possibly shorter)
    final chunk forms its own batch. Logits come back concatenated in stream
    order, so token-weighted CE over chunks equals CE over the whole stream.
    """

    def __init__(self, teacher: Model, stream: TokenStream, mode: EvalMode = EvalMode.DATASET_TARGETS,
                 chunk_len: int = DEFAULT_CHUNK_LEN):
        if stream.vocab_size > teacher.config.vocab_size:
            raise ValueError(f"stream vocab {stream.vocab_size} exceeds model vocab {teacher.config.vocab_size}")
        self.teacher = teacher
        self.mode = EvalMode(mode)
        chunks = list(iter_chunks(stream, chunk_len))
        groups: list[list] = []
        for ch in chunks:
            if groups and len(groups[-1][0].inputs) == len(ch.inputs):
                groups[-1].append(ch)
            else:
                groups.append([ch])
        self.batches = [np.stack([c.inputs for c in g]) for g in groups]
        self.targets = np.concatenate([c.targets for c in chunks])
        self.traces = [trace_batch(teacher, b) for b in self.batches]
        self.teacher_logits = self._collect(teacher, 0)
        if self.mode is EvalMode.DATASET_TARGETS:
            self.teacher_ce = M.cross_entropy(self.teacher_logits, self.targets)
        else:
            self.teacher_ce = M.mean_entropy(self.teacher_logits)

    @property
    def num_tokens(self) -> int:
        return int(self.targets.size)

    def _collect(self, model: Model, start_block: int) -> np.ndarray:
        parts = [forward_from(model, tr, start_block) for tr in self.traces]
        v = parts[0].shape[-1]
        return np.concatenate([p.reshape(-1, v) for p in parts])

    def logits(self, model: Model, start_block: int = 0) -> np.ndarray:
        """Logits ``[N, V]`` for ``model``; blocks before ``start_block`` must match the teacher."""
        return self._collect(model, start_block)

    def student_ce(self, student_logits: np.ndarray) -> float:
        if self.mode is EvalMode.DATASET_TARGETS:
            return M.cross_entropy(student_logits, self.targets)
        return M.analytic_cross_entropy(self.teacher_logits, student_logits)

    def evaluate(self, model: Model) -> M.EvalResult:
        return M.EvalResult(self.student_ce(self.logits(model)), self.num_tokens, self.mode)

    def record(self, layer: LayerDescriptor, student_logits: np.ndarray, spec: QuantSpec) -> SensitivityRecord:
        t_ce = self.teacher_ce
        s_ce = self.student_ce(student_logits)
        t_ppl, s_ppl = M.perplexity(t_ce), M.perplexity(s_ce)
        tl = self.teacher_logits
        return SensitivityRecord(
            layer=layer,
            teacher_ppl=t_ppl,
            student_ppl=s_ppl,
            delta_ppl=s_ppl - t_ppl,
            sqnr_db=M.sqnr_db(tl, student_logits),
            kl_teacher_to_student=M.kl_divergence(tl, student_logits, KLDirection.TEACHER_TO_STUDENT),
            kl_student_to_teacher=M.kl_divergence(tl, student_logits, KLDirection.STUDENT_TO_TEACHER),
            delta_ce=M.delta_ce(t_ce, s_ce),
            spec=spec,
        )


def _start_block(layer: LayerDescriptor) -> int:
    # lm_head carries block_index == num_blocks, i.e. "resume at the head"
    return layer.block_index


def evaluate_layer(evaluator: Evaluator, layer: LayerDescriptor, spec: QuantSpec) -> SensitivityRecord:
    student = quantize_layer(evaluator.teacher, layer, spec)
    return evaluator.record(layer, evaluator.logits(student, _start_block(layer)), spec)


def per_layer_sweep(
    model: Model,
    dataset: TokenStream,
    spec: QuantSpec,
    mode: EvalMode = EvalMode.DATASET_TARGETS,
    *,
    threads: int = 1,
    include_conv: bool = False,
    chunk_len: int = DEFAULT_CHUNK_LEN,
    layers: Sequence[LayerDescriptor] | None = None,
) -> list[SensitivityRecord]:
    """Quantize each layer alone and score the resulting student.

    Records come back in :func:`list_quantizable_layers` order regardless of
    ``threads``; every worker reads the same immutable teacher.

    Raises:
        ValueError: if ``dataset`` is empty or has fewer than 2 tokens.
    """
    if dataset is None or len(dataset) < 2:
        raise ValueError("sweep needs a dataset of at least 2 tokens")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    evaluator = Evaluator(model, dataset, mode, chunk_len)
    if layers is None:
        layers = list_quantizable_layers(model, include_conv=include_conv)
    if threads == 1:
        return [evaluate_layer(evaluator, layer, spec) for layer in layers]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda layer: evaluate_layer(evaluator, layer, spec), layers))


def rank_by_metric(records: Sequence[SensitivityRecord], metric: str) -> list[int]:
    """Record indices ordered most-sensitive first; ties keep enumeration order.

    ``perplexity``/``delta_ppl``, both KLs and ``delta_ce`` sort descending,
    ``sqnr_db`` ascending.
    """
    if len(records) < 2:
        raise ValueError("ranking needs at least 2 records")
    if metric == "perplexity":
        metric = "student_ppl"
    if metric not in METRIC_DIRECTIONS:
        raise KeyError(f"unknown metric {metric!r}")
    values = [r.metric(metric) for r in records]
    if METRIC_DIRECTIONS[metric]:
        return sorted(range(len(values)), key=lambda i: -values[i])
    return sorted(range(len(values)), key=lambda i: values[i])


def ranks_from_order(order: Sequence[int]) -> list[int]:
    """Invert an ordering: ``ranks[item] = position of item``."""
    ranks = [0] * len(order)
    for pos, item in enumerate(order):
        ranks[item] = pos
    return ranks


def _check_permutation(p: Sequence[int]) -> np.ndarray:
    arr = np.asarray(p, dtype=np.int64)
    if arr.ndim != 1 or sorted(arr.tolist()) != list(range(arr.size)):
        raise ValueError("kendall_tau expects permutations of 0..n-1")
    return arr


def _inversion_counts(n: int) -> list[int]:
    """Number of permutations of n items with exactly k inversions (Mahonian numbers)."""
    counts = [1]
    for m in range(2, n + 1):
        nxt = [0] * (len(counts) + m - 1)
        for k, c in enumerate(counts):
            for j in range(m):
                nxt[k + j] += c
        counts = nxt
    return counts


EXACT_P_MAX_N = 8


def kendall_tau(rank_a: Sequence[int], rank_b: Sequence[int], metric: str = "") -> RankCorrelation:
    """Tau-a between two tie-free rankings, with a two-sided p-value.

    ``tau = (C - D) / (n(n-1)/2)``. For ``n <= 8`` the p-value is exact,
    counting permutations whose ``|C - D|`` is at least the observed one;
    above that it uses the normal approximation with variance
    ``2(2n+5) / (9n(n-1))``.
    """
    a = _check_permutation(rank_a)
    b = _check_permutation(rank_b)
    if a.size != b.size:
        raise ValueError(f"ranking length mismatch: {a.size} vs {b.size}")
    n = int(a.size)
    if n < 2:
        raise ValueError("kendall_tau needs n >= 2")
    iu = np.triu_indices(n, k=1)
    s = np.sign(a[:, None] - a[None, :])[iu] * np.sign(b[:, None] - b[None, :])[iu]
    concordant = int(np.count_nonzero(s > 0))
    discordant = int(np.count_nonzero(s < 0))
    pairs = n * (n - 1) // 2
    tau = (concordant - discordant) / pairs

    if n <= EXACT_P_MAX_N:
        counts = _inversion_counts(n)
        observed = abs(concordant - discordant)
        extreme = sum(c for d, c in enumerate(counts) if abs(pairs - 2 * d) >= observed)
        p = extreme / math.factorial(n)
    else:
        sigma = math.sqrt(2.0 * (2 * n + 5) / (9.0 * n * (n - 1)))
        p = math.erfc(abs(tau) / sigma / math.sqrt(2.0))
    return RankCorrelation(tau, min(1.0, p), n, metric)


def correlate_all(records: Sequence[SensitivityRecord]) -> list[RankCorrelation]:
    """Kendall tau of each proxy ranking against the delta-PPL ranking.

    Orderings are converted to per-layer rank vectors before correlating, so
    a pair of layers counts as concordant when both metrics order them the
    same way.
    """
    truth = ranks_from_order(rank_by_metric(records, GROUND_TRUTH))
    return [
        kendall_tau(ranks_from_order(rank_by_metric(records, m)), truth, metric=m)
        for m in PROXY_METRICS
    ]


def subtype_average(records: Sequence[SensitivityRecord]) -> dict[Subtype, float]:
    """Mean delta-PPL per subtype, keyed in subtype declaration order."""
    groups: dict[Subtype, list[float]] = defaultdict(list)
    for r in records:
        groups[r.layer.subtype].append(r.delta_ppl)
    return {s: sum(v) / len(v) for s, v in sorted(groups.items(), key=lambda kv: kv[0].order)}


def layer_cumulative(records: Sequence[SensitivityRecord]) -> list[BlockSensitivity]:
    """Summed delta-PPL per block and its share of the all-block total.

    Only block-owned weights participate; ``lm_head`` sits outside every block.
    """
    sums: dict[int, float] = defaultdict(float)
    for r in records:
        if r.layer.is_block_layer:
            sums[r.layer.block_index] += r.delta_ppl
    total = sum(sums[b] for b in sorted(sums))
    return [
        BlockSensitivity(b, sums[b], sums[b] / total if total != 0 else math.nan)
        for b in sorted(sums)
    ]


def paired_tau_test(taus_a: Sequence[float], taus_b: Sequence[float]) -> tuple[float, float, float]:
    """One-sided paired t-test that metric A's tau exceeds metric B's across seeds.

    Returns ``(mean difference, t statistic, p-value)``.
    """
    from scipy import stats

    a = np.asarray(taus_a, dtype=np.float64)
    b = np.asarray(taus_b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length tau lists with at least 2 entries")
    res = stats.ttest_rel(a, b, alternative="greater")
    return float(np.mean(a - b)), float(res.statistic), float(res.pvalue)


def records_by_layer(records: Sequence[SensitivityRecord]) -> Mapping[LayerDescriptor, SensitivityRecord]:
    return {r.layer: r for r in records}

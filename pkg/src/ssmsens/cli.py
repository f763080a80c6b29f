"""Command-line front end: ``sweep``, ``plan``, ``ablate``, ``selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import reports
from .config import RunConfig, load_config
from .metrics import EvalMode
from .model_zoo import Model, build_model
from .planner import (
    baseline_plan,
    evaluate_plan,
    make_merged_two_pass_plans,
    make_threshold_plans,
    plan_to_json,
    uniform_plan,
)
from .quantizer import Precision, QuantSpec
from .sensitivity import Evaluator, correlate_all, layer_cumulative, per_layer_sweep, subtype_average

log = logging.getLogger("ssmsens")

META_FILE = "sweep_meta.json"


class Staging:
    """Collect output files in a hidden directory; move them into place only on success."""

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
        self.files: list[str] = []

    def write(self, rel: str, text: str) -> None:
        path = self.tmp / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files.append(rel)

    def commit(self) -> None:
        for rel in self.files:
            dest = self.out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.tmp / rel, dest)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def records_name(cfg: RunConfig, bits: int, kind: str = "records") -> str:
    return f"{kind}.csv" if bits == cfg.primary_bits else f"{kind}_int{bits}.csv"


def _setup(cfg: RunConfig):
    model = build_model(cfg.model)
    stream = cfg.dataset.load(cfg.model.vocab_size)
    return model, stream


def run_sweeps(cfg: RunConfig, model: Model, stream) -> dict[int, list]:
    out = {}
    for bits in cfg.quant.bits:
        log.info("sweeping INT%d over %d tokens", bits, len(stream))
        out[bits] = per_layer_sweep(
            model, stream, QuantSpec(bits), cfg.sweep.mode,
            threads=cfg.sweep.threads, include_conv=not cfg.quant.exclude_conv, chunk_len=cfg.dataset.chunk_len,
        )
    return out


def _meta(cfg: RunConfig, stream) -> dict:
    return {"fingerprint": cfg.fingerprint(), "stream_digest": stream.source_digest}


def load_or_run_sweeps(cfg: RunConfig, model: Model, stream) -> dict[int, list]:
    """Reuse ``records*.csv`` from a matching prior sweep in the output dir, else sweep now."""
    out = Path(cfg.output_dir)
    meta_path = out / META_FILE
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            meta = None
        if meta == _meta(cfg, stream):
            try:
                log.info("reusing sweep records from %s", out)
                return {b: reports.parse_records_csv((out / records_name(cfg, b)).read_text()) for b in cfg.quant.bits}
            except (OSError, ValueError):
                pass
    return run_sweeps(cfg, model, stream)


def cmd_sweep(cfg: RunConfig, stage: Staging) -> None:
    model, stream = _setup(cfg)
    sweeps = run_sweeps(cfg, model, stream)
    for bits, records in sweeps.items():
        stage.write(records_name(cfg, bits), reports.records_csv(records))
        wanted = [c for c in correlate_all(records) if c.metric in cfg.sweep.metrics]
        stage.write(records_name(cfg, bits, "correlations"), reports.correlations_csv(wanted))
    stage.write(META_FILE, json.dumps(_meta(cfg, stream), indent=2, sort_keys=True) + "\n")


def cmd_plan(cfg: RunConfig, stage: Staging) -> None:
    model, stream = _setup(cfg)
    sweeps = load_or_run_sweeps(cfg, model, stream)
    p = cfg.plan
    plans = []
    if p.family in ("threshold", "both"):
        plans += make_threshold_plans(sweeps[p.width], p.num_points, Precision.for_bits(p.width), p.score_metric)
    if p.family in ("merged", "both"):
        plans += make_merged_two_pass_plans(sweeps[4], sweeps[8], p.num_points, p.score_metric)

    include_conv = not cfg.quant.exclude_conv
    references = [
        baseline_plan(model, include_conv),
        uniform_plan(model, Precision.INT8, include_conv),
        uniform_plan(model, Precision.INT4, include_conv),
    ]
    evaluator = Evaluator(model, stream, EvalMode.DATASET_TARGETS, cfg.dataset.chunk_len)
    evaluations = []
    for plan in references + plans:
        log.info("evaluating plan %s", plan.name)
        evaluations.append(evaluate_plan(model, plan, evaluator=evaluator))
    for plan in plans:
        stage.write(f"plans/{plan.name}.json", plan_to_json(plan))
    stage.write("pareto.csv", reports.pareto_csv(evaluations))


def cmd_ablate(cfg: RunConfig, stage: Staging) -> None:
    model, stream = _setup(cfg)
    bits = cfg.sweep.ablation_bits
    records = load_or_run_sweeps(cfg, model, stream)[bits]
    stage.write("subtype_avg.csv", reports.subtype_avg_csv(subtype_average(records), records))
    stage.write("layer_cumulative.csv", reports.layer_cumulative_csv(layer_cumulative(records)))


COMMANDS = {"sweep": cmd_sweep, "plan": cmd_plan, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmsens", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--out", help="output directory (overrides [output].dir)")
    common.add_argument("--threads", type=int, help="parallel per-layer evaluations")
    common.add_argument("--seed", type=int, help="model seed (overrides [model].seed)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("sweep", parents=[common], help="per-layer sensitivity sweep -> records/correlations CSV")
    sub.add_parser("plan", parents=[common], help="mixed-precision plans -> plan JSON + pareto.csv")
    sub.add_parser("ablate", parents=[common], help="subtype / block aggregation CSVs")
    sub.add_parser("selftest", parents=[common], help="run identity and property checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "selftest":
        from .selftest import run_selftest

        return 0 if run_selftest() else 1

    try:
        cfg = load_config(args.config).with_overrides(out=args.out, threads=args.threads, seed=args.seed)
    except Exception as e:
        print(f"ssmsens: config error: {e}", file=sys.stderr)
        return 2

    stage = Staging(Path(cfg.output_dir))
    try:
        COMMANDS[args.command](cfg, stage)
    except Exception as e:
        stage.abort()
        print(f"ssmsens {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    stage.commit()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

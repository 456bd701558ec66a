import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

from pydantic import ValidationError

from exceptions import FormatError, RejectedInputError
from schemas import CompareReport, CompareRow, MetricRecord

logger = logging.getLogger(__name__)

SCALAR_METRICS = ("lm", "mim", "ga", "cga", "total", "mask_ratio", "ema_decay", "lr")


def _deep_cosine(record: MetricRecord) -> Optional[float]:
    return record.cosine_profile[-1] if record.cosine_profile else None


def _mean_attention(record: MetricRecord) -> Optional[float]:
    if not record.attention_allocation:
        return None
    return sum(record.attention_allocation) / len(record.attention_allocation)


# sparse metrics only appear on diagnostics steps
DIAGNOSTIC_METRICS: Dict[str, Callable[[MetricRecord], Optional[float]]] = {
    "accuracy": lambda r: r.accuracy,
    "deep_cosine": _deep_cosine,
    "attention_allocation": _mean_attention,
}


def read_metrics(path: Union[str, Path]) -> List[MetricRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(MetricRecord.model_validate(json.loads(line)))
                except (ValueError, ValidationError) as e:
                    raise FormatError(f"line {line_no}: not a metric record ({e})", str(path))
    except OSError as e:
        raise FormatError(f"cannot read metrics: {e}", str(path))
    return records


def _row(metric: str, a: Sequence[float], b: Sequence[float]) -> CompareRow:
    deltas = [y - x for x, y in zip(a, b)]
    return CompareRow(
        metric=metric,
        final_a=a[-1],
        final_b=b[-1],
        final_delta=deltas[-1],
        mean_abs_delta=sum(abs(d) for d in deltas) / len(deltas),
    )


def compare(run_a: Sequence[MetricRecord], run_b: Sequence[MetricRecord]) -> CompareReport:
    """Per-metric deltas (b - a) over aligned steps plus a final-value table."""
    if not run_a or not run_b:
        raise RejectedInputError("both runs need at least one metric record")
    steps_a = [r.step for r in run_a]
    steps_b = [r.step for r in run_b]
    if steps_a != steps_b:
        mismatch = next((i for i, (x, y) in enumerate(zip(steps_a, steps_b)) if x != y), min(len(steps_a), len(steps_b)))
        raise RejectedInputError(
            f"metric logs are misaligned at record {mismatch} ({len(steps_a)} vs {len(steps_b)} records)"
        )

    rows: List[CompareRow] = []
    deltas: Dict[str, List[float]] = {}
    for metric in SCALAR_METRICS:
        a = [getattr(r, metric) for r in run_a]
        b = [getattr(r, metric) for r in run_b]
        rows.append(_row(metric, a, b))
        deltas[metric] = [y - x for x, y in zip(a, b)]

    for metric, extract in DIAGNOSTIC_METRICS.items():
        a, b = [], []
        for ra, rb in zip(run_a, run_b):
            va, vb = extract(ra), extract(rb)
            if (va is None) != (vb is None):
                raise RejectedInputError(f"metric {metric!r} missing from one run at step {ra.step}")
            if va is not None:
                a.append(va)
                b.append(vb)
        if a:
            rows.append(_row(metric, a, b))
            deltas[metric] = [y - x for x, y in zip(a, b)]

    logger.info(f"Compared {len(steps_a)} aligned records over {len(rows)} metrics")
    return CompareReport(steps=steps_a, rows=rows, deltas=deltas)


def compare_files(path_a: Union[str, Path], path_b: Union[str, Path]) -> CompareReport:
    return compare(read_metrics(path_a), read_metrics(path_b))


def format_table(report: CompareReport) -> str:
    lines = [f"{'metric':22s} {'final_a':>12s} {'final_b':>12s} {'delta':>12s} {'mean|delta|':>12s}"]
    for row in report.rows:
        lines.append(
            f"{row.metric:22s} {row.final_a:12.6f} {row.final_b:12.6f} {row.final_delta:+12.6f} {row.mean_abs_delta:12.6f}"
        )
    return "\n".join(lines)

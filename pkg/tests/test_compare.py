import json

import pytest

from exceptions import FormatError, RejectedInputError
from schemas import MetricRecord
from training.compare import compare, compare_files, format_table, read_metrics


def record(step, total, **extra):
    base = dict(step=step, lm=total, mim=0.0, ga=0.0, cga=0.0, total=total, mask_ratio=0.05, ema_decay=0.95, lr=1e-3)
    base.update(extra)
    return MetricRecord(**base)


def write(path, records):
    path.write_text("".join(r.model_dump_json() + "\n" for r in records))
    return path


def test_deltas_are_b_minus_a():
    a = [record(1, 2.0), record(2, 1.0, accuracy=0.5, cosine_profile=[0.1, 0.4])]
    b = [record(1, 1.5), record(2, 1.5, accuracy=0.75, cosine_profile=[0.1, 0.2])]
    report = compare(a, b)
    rows = {row.metric: row for row in report.rows}
    assert report.deltas["total"] == [-0.5, 0.5]
    assert rows["total"].final_delta == 0.5
    assert rows["total"].mean_abs_delta == 0.5
    assert rows["accuracy"].final_delta == 0.25
    assert rows["deep_cosine"].final_delta == pytest.approx(-0.2)
    assert "attention_allocation" not in rows


def test_misaligned_steps_are_rejected():
    with pytest.raises(RejectedInputError, match="misaligned"):
        compare([record(1, 1.0), record(2, 1.0)], [record(1, 1.0), record(3, 1.0)])


def test_one_sided_diagnostics_are_rejected():
    with pytest.raises(RejectedInputError, match="accuracy"):
        compare([record(1, 1.0, accuracy=0.5)], [record(1, 1.0)])


def test_files_and_table(tmp_path):
    a = write(tmp_path / "a.jsonl", [record(5, 1.0)])
    b = write(tmp_path / "b.jsonl", [record(5, 0.25)])
    table = format_table(compare_files(a, b))
    assert table.splitlines()[0].split() == ["metric", "final_a", "final_b", "delta", "mean|delta|"]
    assert any(line.startswith("total") and "-0.750000" in line for line in table.splitlines())


def test_malformed_metrics_name_the_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(record(1, 1.0).model_dump_json() + "\n" + json.dumps({"step": 2}) + "\n")
    with pytest.raises(FormatError, match="line 2"):
        read_metrics(path)


def test_identical_runs_have_zero_deltas():
    run = [record(1, 2.0), record(2, 1.0, accuracy=0.5)]
    report = compare(run, run)
    assert all(v == 0.0 for values in report.deltas.values() for v in values)

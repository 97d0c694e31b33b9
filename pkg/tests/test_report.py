"""Metrics CSV emission and figure rendering."""

import os

import numpy as np
import pytest

from ifmatch.report import (
    HEADER,
    ExperimentRecord,
    emit_metrics,
    render_compare_figure,
    render_perturb_figure,
    render_training_figure,
)


def make_row(step, **overrides):
    row = {
        "step": step, "lr": 0.03, "loss_s": 1.0, "loss_u1": 0.5, "loss_u2": 0.25,
        "util_b1": 0.5, "util_b2": 0.5, "cbi_mask_rate": 0.25, "naive_ratio": 0.125,
        "acc": 0.5, "ema_acc": 0.5, "wall_ms": 0.0,
    }
    row.update(overrides)
    return row


class TestEmitMetrics:
    def test_exact_header(self, tmp_path):
        rec = ExperimentRecord()
        rec.append(make_row(0))
        path = str(tmp_path / "m.csv")
        emit_metrics(rec, path)
        lines = open(path).read().splitlines()
        assert lines[0] == HEADER
        assert lines[0] == ("step,lr,loss_s,loss_u1,loss_u2,util_b1,util_b2,"
                            "cbi_mask_rate,naive_ratio,acc,ema_acc,wall_ms")

    def test_six_significant_digits(self, tmp_path):
        rec = ExperimentRecord()
        rec.append(make_row(0, loss_s=1.23456789, lr=0.0123456789))
        path = str(tmp_path / "m.csv")
        emit_metrics(rec, path)
        line = open(path).read().splitlines()[1]
        assert "1.23457" in line
        assert "0.0123457" in line

    def test_monotonic_steps_enforced(self):
        rec = ExperimentRecord()
        rec.append(make_row(5))
        with pytest.raises(ValueError, match="step"):
            rec.append(make_row(5))

    def test_missing_column_rejected(self):
        rec = ExperimentRecord()
        row = make_row(0)
        del row["naive_ratio"]
        with pytest.raises(ValueError, match="naive_ratio"):
            rec.append(row)

    def test_bitwise_stable_across_emissions(self, tmp_path):
        rec = ExperimentRecord()
        rng = np.random.default_rng(0)
        for s in range(0, 50, 10):
            rec.append(make_row(s, loss_s=float(rng.random()), acc=float(rng.random())))
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        emit_metrics(rec, p1)
        emit_metrics(rec, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestFigures:
    def test_training_figure_written(self, tmp_path):
        rec = ExperimentRecord()
        for s in range(0, 30, 10):
            rec.append(make_row(s, acc=0.3 + s / 100))
        path = str(tmp_path / "curves.png")
        render_training_figure(rec, path)
        assert os.path.getsize(path) > 1000

    def test_compare_figure_written(self, tmp_path):
        table = [
            {"cell": "ifmatch", "mean_ema_acc": 0.9, "sd_ema_acc": 0.01},
            {"cell": "baseline", "mean_ema_acc": 0.8, "sd_ema_acc": 0.02},
        ]
        path = str(tmp_path / "chart.png")
        render_compare_figure(table, path)
        assert os.path.getsize(path) > 1000

    def test_perturb_figure_written(self, tmp_path):
        rng = np.random.default_rng(0)
        path = str(tmp_path / "heat.png")
        render_perturb_figure(rng.random((8, 8)), rng.random((8, 8)), path)
        assert os.path.getsize(path) > 1000

"""Config parsing and CLI subcommands."""

import os

import pytest

from ifmatch.cli import main
from ifmatch.config import parse_config, parse_config_text
from ifmatch.errors import ConfigError

TINY = """
dataset.classes = 3
dataset.per_class = 20
dataset.test_per_class = 8
dataset.size = 8
dataset.difficulty = 0.3
dataset.num_labels = 6
model.widths = 3,4
trainer.steps = 4
trainer.batch_labeled = 3
trainer.batch_unlabeled = 4
trainer.eval_every = 2
trainer.seed = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(str(path))
        assert cfg.trainer.tau == 0.95
        assert cfg.trainer.lambda_u == 1.0
        assert cfg.trainer.ema_decay == 0.999
        assert cfg.trainer.momentum == 0.9

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# a comment\n\ntrainer.tau = 0.9  # inline\n")
        assert cfg.trainer.tau == 0.9

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError, match="lambda_u"):
            parse_config_text("trainer.lambda_u = -1\n")

    def test_unknown_key_suggests_nearest(self):
        with pytest.raises(ConfigError, match="trainer.lambda_u"):
            parse_config_text("trainer.lamda_u = 1\n")

    def test_parse_error_reports_line(self):
        with pytest.raises(ConfigError, match=":3"):
            parse_config_text("\n\ntrainer.tau 0.9\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match=":1"):
            parse_config_text("trainer.steps = soon\n")

    def test_tau_domain(self):
        with pytest.raises(ConfigError):
            parse_config_text("trainer.tau = 0\n")
        with pytest.raises(ConfigError):
            parse_config_text("trainer.tau = 1.2\n")

    def test_threshold_clamp_pair(self):
        cfg = parse_config_text("trainer.threshold_clamp = 0.9, 1.0\n")
        assert cfg.trainer.threshold_clamp == (0.9, 1.0)

    def test_bad_clamp_rejected(self):
        with pytest.raises(ConfigError, match="clamp"):
            parse_config_text("trainer.threshold_clamp = 1.0, 0.9\n")

    def test_unknown_feat_strategy_rejected(self):
        with pytest.raises(ConfigError, match="feat.pool"):
            parse_config_text("feat.pool = translate, wobble\n")

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config("/nonexistent/path.cfg")

    def test_timing_switch(self):
        assert parse_config_text("metrics.timing = measured\n").trainer.measure_time
        assert not parse_config_text("metrics.timing = none\n").trainer.measure_time


class TestCliSplit:
    def test_manifest_written(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "manifest.csv")
        assert main(["split", "--config", tiny_cfg, "--out", out]) == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "id,role,class"
        assert len(lines) == 1 + 60 + 24

    def test_rerun_identical_bytes(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "manifest.csv")
        main(["split", "--config", tiny_cfg, "--out", out])
        first = open(out, "rb").read()
        main(["split", "--config", tiny_cfg, "--out", out])
        assert open(out, "rb").read() == first


class TestCliTrain:
    def test_outputs_written(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "run")
        assert main(["train", "--config", tiny_cfg, "--out", out, "--quiet"]) == 0
        for name in ("metrics.csv", "curves.png", "checkpoint.bin"):
            assert os.path.exists(os.path.join(out, name))

    def test_zero_steps_single_row(self, tmp_path):
        cfg_path = tmp_path / "zero.cfg"
        cfg_path.write_text(TINY.replace("trainer.steps = 4", "trainer.steps = 0"))
        out = str(tmp_path / "run0")
        assert main(["train", "--config", str(cfg_path), "--out", out, "--quiet"]) == 0
        lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
        assert len(lines) == 2  # header + initial eval

    def test_rerun_overwrites_identical_bytes(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "run")
        main(["train", "--config", tiny_cfg, "--out", out, "--quiet"])
        first = {}
        for name in ("metrics.csv", "checkpoint.bin", "ledger.csv"):
            first[name] = open(os.path.join(out, name), "rb").read()
        main(["train", "--config", tiny_cfg, "--out", out, "--quiet"])
        for name, blob in first.items():
            assert open(os.path.join(out, name), "rb").read() == blob, name

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("trainer.lamda_u = 1\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_data_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text(TINY + "dataset.num_labels = 7\n")  # not divisible by 3
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 3


class TestCliEval:
    def test_checkpoint_roundtrip_eval(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "run")
        main(["train", "--config", tiny_cfg, "--out", out, "--quiet"])
        ckpt = os.path.join(out, "checkpoint.bin")
        assert main(["eval", "--config", tiny_cfg, "--checkpoint", ckpt]) == 0
        assert main(["eval", "--config", tiny_cfg, "--checkpoint", ckpt, "--live"]) == 0

    def test_shape_mismatch_is_data_error(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "run")
        main(["train", "--config", tiny_cfg, "--out", out, "--quiet"])
        ckpt = os.path.join(out, "checkpoint.bin")
        other = tmp_path / "other.cfg"
        other.write_text(TINY.replace("model.widths = 3,4", "model.widths = 5,6"))
        assert main(["eval", "--config", str(other), "--checkpoint", ckpt]) == 3


class TestCliPerturbDemo:
    def test_identity_draw_byte_identical_csvs(self, tmp_path):
        out = str(tmp_path / "demo")
        code = main(["perturb-demo", "--strategy", "translate", "--out", out,
                     "--identity"])
        assert code == 0
        before = open(os.path.join(out, "before.csv"), "rb").read()
        after = open(os.path.join(out, "after.csv"), "rb").read()
        assert before == after
        assert os.path.exists(os.path.join(out, "heatmap.png"))

    def test_real_draw_changes_values(self, tmp_path):
        out = str(tmp_path / "demo2")
        assert main(["perturb-demo", "--strategy", "channel_drop", "--out", out,
                     "--seed", "4"]) == 0
        before = open(os.path.join(out, "before.csv"), "rb").read()
        after = open(os.path.join(out, "after.csv"), "rb").read()
        assert before != after

    def test_unknown_strategy_config_error(self, tmp_path):
        assert main(["perturb-demo", "--strategy", "wobble",
                     "--out", str(tmp_path / "x")]) == 2


class TestSaaReportLine:
    def test_loss_to_confidence_mapping_printed(self, tmp_path, capsys):
        cfg_path = tmp_path / "saa.cfg"
        cfg_path.write_text(TINY + "trainer.identification = saa\ntrainer.tau = 0.2\n")
        out = str(tmp_path / "saa_run")
        assert main(["train", "--config", str(cfg_path), "--out", out]) == 0
        captured = capsys.readouterr().out
        assert "confidence exp(-L)=" in captured


class TestCliCompare:
    def test_matrix_and_summary(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "cmp")
        code = main([
            "compare", "--config", tiny_cfg, "--out", out,
            "--paradigms", "fixmatch_baseline,ifmatch", "--seeds", "1,2",
        ])
        assert code == 0
        lines = open(os.path.join(out, "summary.csv")).read().splitlines()
        assert lines[0] == "rank,cell,seeds,mean_ema_acc,sd_ema_acc,mean_naive_ratio"
        assert len(lines) == 3  # two cells
        assert os.path.exists(os.path.join(out, "chart.png"))
        cell_dirs = [d for d in os.listdir(out) if "seed" in d]
        assert len(cell_dirs) == 4  # 2 cells x 2 seeds

    def test_summary_mean_matches_cells(self, tiny_cfg, tmp_path):
        out = str(tmp_path / "cmp2")
        main(["compare", "--config", tiny_cfg, "--out", out, "--seeds", "1,2"])
        summary = open(os.path.join(out, "summary.csv")).read().splitlines()[1]
        mean = float(summary.split(",")[3])
        finals = []
        for d in sorted(os.listdir(out)):
            metrics = os.path.join(out, d, "metrics.csv")
            if os.path.isfile(metrics):
                last = open(metrics).read().splitlines()[-1]
                finals.append(float(last.split(",")[10]))
        assert abs(mean - sum(finals) / len(finals)) <= 1e-9

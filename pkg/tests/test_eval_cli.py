import json

import numpy as np
import pytest

import priorad.autodiff as ad
from priorad.cli import UsageError, load_run_config, main
from priorad.data import default_synthetic_spec
from priorad.evaluation import (
    AblationSpec, EvalReport, apply_ablation_value, channel_contributions,
    compute_metrics, f1_from_pr, format_report_table, run_ablation,
)
from priorad.model import ModelConfig
from priorad.training import TrainConfig
from priorad.scoring import ScoringConfig


def test_f1_published_fixtures():
    # benchmark-style precision/recall pairs reproduce their reported F1
    np.testing.assert_allclose(f1_from_pr(97.37, 98.80), 98.08, atol=0.01)
    np.testing.assert_allclose(f1_from_pr(93.84, 100.0), 96.82, atol=0.01)


def test_f1_degenerate_zero():
    assert f1_from_pr(0.0, 0.0) == 0.0


def test_compute_metrics_counts():
    y_true = np.array([1, 1, 0, 0, 1, 0], bool)
    y_hat = np.array([1, 0, 0, 1, 1, 0], bool)
    rep = compute_metrics(y_hat, y_true, threshold=0.7, fingerprint="cfg")
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (2, 1, 2, 1)
    np.testing.assert_allclose(rep.precision, 100 * 2 / 3)
    np.testing.assert_allclose(rep.recall, 100 * 2 / 3)
    np.testing.assert_allclose(rep.accuracy, 100 * 4 / 6)
    assert rep.threshold == 0.7 and rep.config_fingerprint == "cfg"
    assert not rep.flagged


def test_compute_metrics_flags_no_positives():
    rep = compute_metrics(np.zeros(5, bool), np.ones(5, bool))
    assert rep.flagged and rep.precision == 0.0 and rep.f1 == 0.0


def test_compute_metrics_shape_mismatch():
    with pytest.raises(ad.ContractError):
        compute_metrics(np.zeros(3, bool), np.zeros(4, bool))


def test_channel_contributions_ranking():
    rng = np.random.default_rng(0)
    window = rng.normal(size=(50, 3))
    recon = window.copy()
    recon[:, 2] += 2.0   # worst channel
    recon[:, 0] += 1.0   # second
    mean, var, ranking = channel_contributions(window, recon)
    assert ranking == [2, 0, 1]
    np.testing.assert_allclose(mean[2], 4.0)
    assert channel_contributions(window, recon, top_k=1)[2] == [2]
    with pytest.raises(ad.ShapeError):
        channel_contributions(window, recon[:, :2])


def test_ablation_spec_validation():
    with pytest.raises(ValueError, match="axis"):
        AblationSpec("window_color", [1])
    with pytest.raises(ValueError, match="non-empty"):
        AblationSpec("epochs", [])
    with pytest.raises(ValueError, match="phase_sync"):
        AblationSpec("phase_sync", ["half_phase"])


def test_apply_ablation_value_copies_configs():
    mcfg = ModelConfig(window_length=16, channels=2, model_dim=16,
                       num_layers=1, num_heads=2, feedforward_dim=32, seed=0)
    tcfg = TrainConfig(k=3.0)
    m, t = apply_ablation_value("phase_sync", "no_phase", mcfg, tcfg)
    assert m.prior_mode == "no_phase" and t.k == 0.0
    assert mcfg.prior_mode == "full" and tcfg.k == 3.0  # originals untouched
    m2, t2 = apply_ablation_value("epochs", 7, mcfg, tcfg)
    assert t2.max_epochs == 7 and m2.prior_mode == "full"
    with pytest.raises(ValueError, match="divisible"):
        apply_ablation_value("model_dim", 15, mcfg, tcfg)


def test_run_ablation_records_errors_and_continues(tmp_path):
    mcfg = ModelConfig(window_length=16, channels=3, model_dim=16,
                       num_layers=1, num_heads=2, feedforward_dim=32, seed=0)
    tcfg = TrainConfig(k=0.0, max_epochs=1, batch_size=64,
                       learning_rate=1e-3)
    scfg = ScoringConfig(temperature=1.0, anomaly_ratio=1.0,
                         window_length=16, batch_size=64)
    synth = default_synthetic_spec(seed=0, length=600, channels=3,
                                   kinds=("point",))
    spec = AblationSpec("model_dim", [16, 15])  # 15 is invalid (2 heads)
    out = run_ablation(spec, synth, mcfg, tcfg, scfg,
                       csv_path=tmp_path / "ablation.csv")
    assert isinstance(out[16], EvalReport)
    assert isinstance(out[15], str) and out[15].startswith("error")
    text = (tmp_path / "ablation.csv").read_text()
    assert "ok" in text and "error" in text


def test_format_report_table_alignment():
    rep = compute_metrics(np.ones(4, bool), np.ones(4, bool))
    table = format_report_table({"full": rep, "broken": "error: nope"})
    lines = table.splitlines()
    assert "variant" in lines[0] and "f1" in lines[0]
    assert any("full" in ln and "100.00" in ln for ln in lines)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_load_run_config_overrides(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "model": {"window_length": 16, "channels": 2, "model_dim": 16,
                  "num_layers": 1, "num_heads": 2, "feedforward_dim": 32},
        "train": {"k": 1.0},
    }))
    m, t, s = load_run_config(cfg, [("train.k", "0.5"),
                                    ("scoring.temperature", "2.0")])
    assert t.k == 0.5
    assert s.temperature == 2.0
    assert s.window_length == m.window_length


def test_load_run_config_rejects_bad_override():
    with pytest.raises(UsageError):
        load_run_config(None, [("nonsense", "1")])
    with pytest.raises(UsageError):
        load_run_config(None, [("train.patience", "0")])


def test_cli_usage_exit_codes(tmp_path, capsys):
    assert main(["synth", "--type", "wiggle", "--out", str(tmp_path)]) == 2
    assert main(["score", "--checkpoint", "missing.npz",
                 "--train-csv", "x", "--test-csv", "y",
                 "--labels-csv", "z"]) == 1
    assert main(["not-a-command"]) == 2


def test_cli_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["synth", "--seed", "7", "--length", "500",
                     "--out", str(d)]) == 0
    for name in ("train.csv", "test.csv", "labels.csv", "spec.json"):
        assert (a / name).read_text() == (b / name).read_text()
    spec = json.loads((a / "spec.json").read_text())
    assert spec["seed"] == 7 and len(spec["segments"]) == 5


def test_cli_full_pipeline_smoke(tmp_path, capsys):
    out = tmp_path
    assert main(["synth", "--seed", "1", "--length", "600", "--channels",
                 "2", "--type", "point", "--out", str(out)]) == 0
    overrides = ["--set", "model.window_length=16",
                 "--set", "model.model_dim=16",
                 "--set", "model.num_layers=1",
                 "--set", "model.num_heads=2",
                 "--set", "model.feedforward_dim=32",
                 "--set", "model.channels=2",
                 "--set", "train.max_epochs=1",
                 "--set", "train.batch_size=64",
                 "--set", "train.k=0.0",
                 "--set", "train.learning_rate=0.001"]
    assert main(["train", "--train-csv", str(out / "train.csv"),
                 "--out", str(out)] + overrides) == 0
    assert (out / "checkpoint.npz").exists()
    assert (out / "training_log.csv").exists()

    assert main(["score", "--checkpoint", str(out / "checkpoint.npz"),
                 "--train-csv", str(out / "train.csv"),
                 "--test-csv", str(out / "test.csv"),
                 "--labels-csv", str(out / "labels.csv"),
                 "--out", str(out)] + overrides) == 0
    assert (out / "scores.csv").exists()

    assert main(["eval", "--scores-csv", str(out / "scores.csv"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) >= {"accuracy", "precision", "recall", "f1",
                           "tp", "fp", "tn", "fn"}
    table = capsys.readouterr().out
    assert "point-adjusted" in table


def test_cli_score_rescored_bitwise(tmp_path):
    """Checkpoint save -> load -> score twice gives identical files."""
    out = tmp_path
    main(["synth", "--seed", "2", "--length", "500", "--channels", "2",
          "--type", "point", "--out", str(out)])
    overrides = ["--set", "model.window_length=16",
                 "--set", "model.model_dim=16",
                 "--set", "model.num_layers=1",
                 "--set", "model.num_heads=2",
                 "--set", "model.feedforward_dim=32",
                 "--set", "model.channels=2",
                 "--set", "train.max_epochs=1",
                 "--set", "train.batch_size=64",
                 "--set", "train.k=0.0",
                 "--set", "train.learning_rate=0.001"]
    main(["train", "--train-csv", str(out / "train.csv"),
          "--out", str(out)] + overrides)
    texts = []
    for sub in ("s1", "s2"):
        d = out / sub
        d.mkdir()
        assert main(["score", "--checkpoint", str(out / "checkpoint.npz"),
                     "--train-csv", str(out / "train.csv"),
                     "--test-csv", str(out / "test.csv"),
                     "--labels-csv", str(out / "labels.csv"),
                     "--out", str(d)] + overrides) == 0
        texts.append((d / "scores.csv").read_text())
    assert texts[0] == texts[1]

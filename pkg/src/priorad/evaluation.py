"""Point-adjusted metrics, channel contribution analysis, ablation runner."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import (SyntheticSpec, StandardizerStats, default_synthetic_spec,
                   standardize, split_train_val, synth_generate)
from .model import ModelConfig
from .scoring import ScoringConfig, detect, point_adjust
from .training import TrainConfig, train

ABLATION_AXES = ("phase_sync", "enc_layers", "model_dim", "num_heads",
                 "batch_size", "epochs")
PHASE_SYNC_VALUES = ("full", "no_phase", "single_head")


@dataclass
class EvalReport:
    accuracy: float   # percent
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float | None = None
    config_fingerprint: str = ""
    flagged: bool = False  # set when precision degenerated to 0/0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "threshold": self.threshold,
            "config_fingerprint": self.config_fingerprint,
            "flagged": self.flagged,
        }


def f1_from_pr(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (inputs and output in percent)."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(y_hat, y_true, threshold=None,
                    fingerprint: str = "") -> EvalReport:
    """Binary metrics in percent; positive class is the anomaly."""
    y_hat = np.asarray(y_hat, dtype=bool)
    y_true = np.asarray(y_true, dtype=bool)
    if y_hat.shape != y_true.shape:
        raise ad.ContractError(
            f"length mismatch: predictions {y_hat.shape}, labels {y_true.shape}"
        )
    tp = int(np.sum(y_hat & y_true))
    fp = int(np.sum(y_hat & ~y_true))
    tn = int(np.sum(~y_hat & ~y_true))
    fn = int(np.sum(~y_hat & y_true))
    flagged = (tp + fp) == 0
    precision = 0.0 if flagged else 100.0 * tp / (tp + fp)
    recall = 100.0 * tp / (tp + fn) if (tp + fn) > 0 else 0.0
    accuracy = 100.0 * (tp + tn) / max(len(y_true), 1)
    return EvalReport(accuracy, precision, recall,
                      f1_from_pr(precision, recall),
                      tp, fp, tn, fn, threshold, fingerprint, flagged)


def channel_contributions(window: np.ndarray, recon: np.ndarray, top_k=None):
    """Per-channel mean and variance of squared error, plus a ranking.

    Returns (mean[C], var[C], ranking) with channels ordered by mean error,
    largest first; ranking truncated to ``top_k`` when given.
    """
    window = np.asarray(window, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if window.shape != recon.shape:
        raise ad.ShapeError(
            f"shape mismatch: window {window.shape}, recon {recon.shape}"
        )
    err = (window - recon) ** 2
    mean = err.mean(axis=0)
    var = err.var(axis=0)
    ranking = list(np.argsort(-mean, kind="stable"))
    if top_k is not None:
        ranking = ranking[:top_k]
    return mean, var, ranking


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------


@dataclass
class AblationSpec:
    axis: str
    values: list

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}")
        if not self.values:
            raise ValueError("ablation values must be non-empty")
        if self.axis == "phase_sync":
            bad = [v for v in self.values if v not in PHASE_SYNC_VALUES]
            if bad:
                raise ValueError(f"invalid phase_sync values: {bad}")


def apply_ablation_value(axis: str, value, model_cfg: ModelConfig,
                         train_cfg: TrainConfig):
    """Return (model_cfg, train_cfg) copies with one axis overridden."""
    m = ModelConfig(**model_cfg.to_dict())
    t = TrainConfig(**{k: getattr(train_cfg, k)
                       for k in TrainConfig.__dataclass_fields__})
    if axis == "phase_sync":
        m.prior_mode = value
        if value == "no_phase":
            t.k = 0.0  # prior pathway inert
    elif axis == "enc_layers":
        m.num_layers = int(value)
    elif axis == "model_dim":
        m.model_dim = int(value)
        if m.model_dim % m.num_heads != 0:
            raise ValueError(
                f"model_dim {value} not divisible by {m.num_heads} heads"
            )
    elif axis == "num_heads":
        m.num_heads = int(value)
    elif axis == "batch_size":
        t.batch_size = int(value)
    elif axis == "epochs":
        t.max_epochs = int(value)
    return m, t


def benchmark_configs(seed: int = 0, prior_mode: str = "full",
                      epochs: int = 10):
    """Desk-scale configuration for the synthetic benchmark suite.

    The prior pathway is trained by the pull-towards-series pass only
    (series_ascent off): the ascent term destabilizes at this scale and
    starves the reconstruction signal.
    """
    model_cfg = ModelConfig(window_length=25, channels=3, model_dim=32,
                            num_layers=1, num_heads=2, feedforward_dim=64,
                            seed=seed, prior_mode=prior_mode)
    train_cfg = TrainConfig(k=0.0 if prior_mode == "no_phase" else 3.0,
                            series_ascent=False, max_epochs=epochs,
                            patience=epochs, batch_size=128,
                            learning_rate=3e-3)
    score_cfg = ScoringConfig(temperature=10.0, anomaly_ratio=0.25,
                              window_length=25, batch_size=128)
    return model_cfg, train_cfg, score_cfg


def run_synthetic_pipeline(spec: SyntheticSpec, model_cfg: ModelConfig,
                           train_cfg: TrainConfig, score_cfg: ScoringConfig
                           ) -> EvalReport:
    """Generate, train, score, point-adjust, and evaluate one variant."""
    raw_train, raw_test, labels = synth_generate(spec)
    stats = StandardizerStats.fit(raw_train)
    z_train = standardize(raw_train, stats)
    z_test = standardize(raw_test, stats)
    ckpt = train(z_train, model_cfg, train_cfg)
    fit_part, thresh_part = split_train_val(
        z_train, train_cfg.val_fraction, min_length=model_cfg.window_length
    )
    scores = detect(ckpt.model, fit_part, thresh_part, z_test, score_cfg)
    adjusted = point_adjust(scores.y_hat, labels)
    fingerprint = (f"prior={model_cfg.prior_mode},layers={model_cfg.num_layers},"
                   f"dim={model_cfg.model_dim},heads={model_cfg.num_heads},"
                   f"batch={train_cfg.batch_size},epochs={train_cfg.max_epochs},"
                   f"seed={model_cfg.seed}")
    return compute_metrics(adjusted, labels, scores.threshold, fingerprint)


def run_ablation(spec: AblationSpec, synth_spec: SyntheticSpec,
                 model_cfg: ModelConfig, train_cfg: TrainConfig,
                 score_cfg: ScoringConfig, csv_path=None):
    """Train and evaluate one variant per value; failures are recorded
    per cell and the run continues. Returns {value: EvalReport | error str}."""
    results = {}
    for value in spec.values:
        try:
            m, t = apply_ablation_value(spec.axis, value, model_cfg, train_cfg)
            results[value] = run_synthetic_pipeline(synth_spec, m, t, score_cfg)
        except Exception as exc:  # record and continue
            results[value] = f"error: {exc}"
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", "accuracy", "precision", "recall",
                        "f1", "status"])
            for value, rep in results.items():
                if isinstance(rep, EvalReport):
                    w.writerow([spec.axis, value,
                                f"{rep.accuracy:.4f}", f"{rep.precision:.4f}",
                                f"{rep.recall:.4f}", f"{rep.f1:.4f}", "ok"])
                else:
                    w.writerow([spec.axis, value, "", "", "", "", rep])
    return results


def format_report_table(reports: dict) -> str:
    """Aligned text table of {label: EvalReport}."""
    lines = [f"{'variant':<18} {'acc':>8} {'prec':>8} {'rec':>8} {'f1':>8}"]
    for label, rep in reports.items():
        if isinstance(rep, EvalReport):
            lines.append(f"{str(label):<18} {rep.accuracy:>8.2f} "
                         f"{rep.precision:>8.2f} {rep.recall:>8.2f} "
                         f"{rep.f1:>8.2f}")
        else:
            lines.append(f"{str(label):<18} {rep}")
    return "\n".join(lines)

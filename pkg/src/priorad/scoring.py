"""Inference scoring: window streams, timeline projection, fusion, labels.

Per window: reconstruction error r, mismatch Delta (temperature-scaled
symmetric KL averaged over layers and heads), alignment weights w
(softmax of -Delta), and Energy e = w * r. Streams are projected to the
global timeline end-anchored, robustly normalized against the training
split, fused with a pointwise max, and thresholded at a percentile of
pooled calibration scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import windows
from .model import PiModel

EPS_IQR = 1e-8


@dataclass
class ScoringConfig:
    temperature: float = 10.0
    anomaly_ratio: float = 1.0   # percent
    window_length: int = 100
    batch_size: int = 256

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 < self.anomaly_ratio < 100.0):
            raise ValueError("anomaly_ratio must be in (0, 100)")


@dataclass
class NormStats:
    energy_med: float
    energy_iqr: float
    delta_med: float
    delta_iqr: float
    flagged: bool = False  # set when an IQR had to be floored

    @classmethod
    def fit(cls, energy: np.ndarray, delta: np.ndarray) -> "NormStats":
        e_med, e_iqr = _med_iqr(energy)
        d_med, d_iqr = _med_iqr(delta)
        flagged = e_iqr < EPS_IQR or d_iqr < EPS_IQR
        return cls(e_med, max(e_iqr, EPS_IQR), d_med, max(d_iqr, EPS_IQR),
                   flagged)


def _med_iqr(x: np.ndarray):
    q25, q50, q75 = np.percentile(x, [25.0, 50.0, 75.0])
    return float(q50), float(q75 - q25)


@dataclass
class ScoreSeries:
    r: np.ndarray        # reconstruction error
    delta: np.ndarray    # mismatch
    w: np.ndarray        # alignment weight of the window ending here
    e: np.ndarray        # Energy
    e_norm: np.ndarray
    d_norm: np.ndarray
    f: np.ndarray        # fused score
    y_hat: np.ndarray | None = None
    threshold: float | None = None


# ---------------------------------------------------------------------------
# Window-level operations
# ---------------------------------------------------------------------------


def mismatch_delta(attn, temperature: float) -> np.ndarray:
    """Delta_i = T * mean over layers/heads of symmetric row KL, [..., L]."""
    total = None
    n_mats = 0
    for S, P in zip(attn.series, attn.prior):
        s, p = Tensor(S.data), Tensor(P.data)
        kl = ad.kl_div_rows(s, p).data + ad.kl_div_rows(p, s).data  # [...,H,L]
        term = kl.sum(axis=-2)
        n_mats += S.data.shape[-3]
        total = term if total is None else total + term
    return temperature * total / n_mats


def alignment_weights(delta: np.ndarray) -> np.ndarray:
    """Window-local softmax of -Delta over the last axis."""
    z = -(delta - delta.min(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def energy(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    return w * r


def project_to_timeline(per_window: np.ndarray, n: int, length: int
                        ) -> np.ndarray:
    """End-anchored projection of [K, L] window streams to a length-n stream.

    Index t >= L-1 takes the last position of the window ending at t;
    earlier indices take the first window's interior positions.
    """
    k, L = per_window.shape
    if n < length or L != length or k != n - length + 1:
        raise ad.ContractError(
            f"window stack {per_window.shape} does not cover a length-{n} "
            f"series with L={length}"
        )
    out = np.empty(n)
    out[: length - 1] = per_window[0, : length - 1]
    out[length - 1 :] = per_window[:, length - 1]
    return out


def robust_normalize(stream: np.ndarray, med: float, iqr: float
                     ) -> np.ndarray:
    """max(0, (x - med) / IQR); IQR is floored at EPS_IQR upstream."""
    return np.maximum(0.0, (stream - med) / max(iqr, EPS_IQR))


def fuse(e_norm: np.ndarray, d_norm: np.ndarray) -> np.ndarray:
    return np.maximum(e_norm, d_norm)


def threshold_and_label(f_train: np.ndarray, f_thresh: np.ndarray,
                        f_test: np.ndarray, anomaly_ratio: float):
    """Percentile threshold on pooled calibration scores; strict labels."""
    if not (0.0 < anomaly_ratio < 100.0):
        raise ad.ContractError("anomaly_ratio must be in (0, 100)")
    pool = np.concatenate([np.ravel(f_train), np.ravel(f_thresh)])
    if pool.size == 0:
        raise ad.ContractError("empty calibration pool")
    tau = float(np.percentile(pool, 100.0 - anomaly_ratio,
                              method="linear"))
    return tau, f_test > tau


def point_adjust(y_hat: np.ndarray, y_true: np.ndarray) -> np.ndarray:
    """Mark a whole ground-truth segment positive if any point in it is.

    Predictions outside segments are untouched. Idempotent and monotone.
    """
    y_hat = np.asarray(y_hat, dtype=bool)
    y_true = np.asarray(y_true, dtype=bool)
    if y_hat.shape != y_true.shape:
        raise ad.ContractError(
            f"length mismatch: predictions {y_hat.shape}, "
            f"labels {y_true.shape}"
        )
    adjusted = y_hat.copy()
    n = len(y_true)
    i = 0
    while i < n:
        if y_true[i]:
            j = i
            while j < n and y_true[j]:
                j += 1
            if adjusted[i:j].any():
                adjusted[i:j] = True
            i = j
        else:
            i += 1
    return adjusted


# ---------------------------------------------------------------------------
# Series-level pipeline
# ---------------------------------------------------------------------------


def window_streams(model: PiModel, series: np.ndarray, cfg: ScoringConfig):
    """Per-window (r, delta, w, e) arrays of shape [K, L]."""
    L = cfg.window_length
    if len(series) < L:
        raise ad.ContractError(
            f"series length {len(series)} < window length {L}"
        )
    wins = windows(series, L)
    rs, deltas = [], []
    for i in range(0, len(wins), cfg.batch_size):
        b = wins[i : i + cfg.batch_size]
        out = model.forward(Tensor(b))
        rs.append(((out.recon.data - b) ** 2).mean(axis=-1))
        deltas.append(mismatch_delta(out.attn, cfg.temperature))
    r = np.concatenate(rs)
    delta = np.concatenate(deltas)
    w = alignment_weights(delta)
    return r, delta, w, energy(w, r)


def raw_streams(model: PiModel, series: np.ndarray, cfg: ScoringConfig):
    """Global-timeline (r, delta, w, e) for one series."""
    r, delta, w, e = window_streams(model, series, cfg)
    n = len(series)
    L = cfg.window_length
    return tuple(project_to_timeline(s, n, L) for s in (r, delta, w, e))


def fit_norm_stats(model: PiModel, calib_series: np.ndarray,
                   cfg: ScoringConfig) -> NormStats:
    """Median/IQR of Energy and mismatch on the calibration series."""
    _, delta, _, e = raw_streams(model, calib_series, cfg)
    return NormStats.fit(e, delta)


def score_series(model: PiModel, series: np.ndarray, cfg: ScoringConfig,
                 stats: NormStats) -> ScoreSeries:
    """Full scoring pipeline on one series (no thresholding)."""
    r, delta, w, e = raw_streams(model, series, cfg)
    e_norm = robust_normalize(e, stats.energy_med, stats.energy_iqr)
    d_norm = robust_normalize(delta, stats.delta_med, stats.delta_iqr)
    return ScoreSeries(r, delta, w, e, e_norm, d_norm, fuse(e_norm, d_norm))


def detect(model: PiModel, train_series: np.ndarray,
           thresh_series: np.ndarray, test_series: np.ndarray,
           cfg: ScoringConfig) -> ScoreSeries:
    """Calibrate on train + threshold splits, then score and label test."""
    stats = fit_norm_stats(model, train_series, cfg)
    f_train = score_series(model, train_series, cfg, stats).f
    f_thresh = score_series(model, thresh_series, cfg, stats).f
    scores = score_series(model, test_series, cfg, stats)
    tau, y_hat = threshold_and_label(f_train, f_thresh, scores.f,
                                     cfg.anomaly_ratio)
    scores.threshold = tau
    scores.y_hat = y_hat
    return scores


def write_score_csv(path, scores: ScoreSeries, y_true=None):
    """One row per global index: t,r,delta,w,e,e_norm,d_norm,f,y_hat[,y_true]."""
    cols = ["t", "r", "delta", "w", "e", "e_norm", "d_norm", "f", "y_hat"]
    if y_true is not None:
        cols.append("y_true")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        n = len(scores.f)
        y_hat = scores.y_hat if scores.y_hat is not None else np.zeros(n, bool)
        for t in range(n):
            row = [t] + [repr(float(v[t])) for v in
                         (scores.r, scores.delta, scores.w, scores.e,
                          scores.e_norm, scores.d_norm, scores.f)]
            row.append(int(y_hat[t]))
            if y_true is not None:
                row.append(int(y_true[t]))
            writer.writerow(row)

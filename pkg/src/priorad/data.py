"""Dataset ingestion, standardization, windowing, and synthetic benchmarks.

The synthetic generator produces C channels of two superposed sinusoids
with fixed per-channel phase offsets plus Gaussian noise, and injects the
five canonical anomaly types: point, contextual, collective, seasonal
(phase break), and trend.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

ANOMALY_TYPES = ("point", "contextual", "collective", "seasonal", "trend")


class ParseError(ValueError):
    """Raised on malformed dataset files, with row/column location."""


class SplitError(ValueError):
    """Raised when a split would leave a side shorter than a window."""


@dataclass
class RawDataset:
    train: np.ndarray            # [N_train, C]
    test: np.ndarray             # [N_test, C]
    test_labels: np.ndarray      # bool [N_test]
    channel_names: list

    def __post_init__(self):
        if len(self.test_labels) != len(self.test):
            raise ParseError(
                f"label length {len(self.test_labels)} != "
                f"test length {len(self.test)}"
            )
        if self.train.shape[1] != self.test.shape[1]:
            raise ParseError(
                f"channel mismatch: train has {self.train.shape[1]}, "
                f"test has {self.test.shape[1]}"
            )


@dataclass
class StandardizerStats:
    mean: np.ndarray  # per channel
    std: np.ndarray   # per channel, floored at 1e-8

    @classmethod
    def fit(cls, train: np.ndarray) -> "StandardizerStats":
        return cls(
            mean=train.mean(axis=0),
            std=np.maximum(train.std(axis=0), 1e-8),
        )


def standardize(data: np.ndarray, stats: StandardizerStats) -> np.ndarray:
    return (data - stats.mean) / stats.std


def destandardize(data: np.ndarray, stats: StandardizerStats) -> np.ndarray:
    return data * stats.std + stats.mean


def _read_matrix(path) -> tuple[np.ndarray, list]:
    rows = []
    names = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader):
            if not row:
                continue
            if r == 0:
                try:
                    [float(c) for c in row]
                except ValueError:
                    names = [c.strip() for c in row]
                    continue
            vals = []
            for c, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {r}, column {c}: "
                        f"{cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(rows[0])
    for r, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(
                f"{path}: ragged row {r}: {len(row)} cells, expected {width}"
            )
    return np.array(rows, dtype=np.float64), names


def load_csv_dataset(train_path, test_path, labels_path) -> RawDataset:
    """Load train/test matrices (rows = time) and a 0/1 label column."""
    train, names = _read_matrix(train_path)
    test, _ = _read_matrix(test_path)
    labels, _ = _read_matrix(labels_path)
    if labels.shape[1] != 1:
        raise ParseError(
            f"{labels_path}: labels must be a single column, "
            f"got {labels.shape[1]}"
        )
    if names is None:
        names = [f"ch{c}" for c in range(train.shape[1])]
    return RawDataset(train, test, labels[:, 0].astype(bool), names)


def windows(series: np.ndarray, length: int, stride: int = 1) -> np.ndarray:
    """All overlapping windows as a view-copy of shape [K, L, C]."""
    n = len(series)
    if n < length:
        raise SplitError(f"series length {n} < window length {length}")
    idx = np.arange(0, n - length + 1, stride)
    return np.stack([series[i : i + length] for i in idx])


def split_train_val(series: np.ndarray, val_fraction: float,
                    min_length: int = 1):
    """Chronological split: validation is the final fraction of the series."""
    if not (0.0 < val_fraction < 1.0):
        raise SplitError("val_fraction must be in (0, 1)")
    cut = int(round(len(series) * (1.0 - val_fraction)))
    train, val = series[:cut], series[cut:]
    if len(train) < min_length or len(val) < min_length:
        raise SplitError(
            f"split {len(train)}/{len(val)} leaves a side shorter than "
            f"{min_length}"
        )
    return train, val


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class AnomalySegment:
    kind: str
    start: int
    length: int
    magnitude: float

    def __post_init__(self):
        if self.kind not in ANOMALY_TYPES:
            raise ValueError(f"unknown anomaly type {self.kind!r}")


@dataclass
class SyntheticSpec:
    length: int = 4000
    channels: int = 3
    noise_sigma: float = 0.1
    base_period: float = 100.0   # sets the two sinusoid periods P/4, P/1.5
    segments: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        segs = sorted(self.segments, key=lambda s: s.start)
        prev_end = -1
        for s in segs:
            if s.start < 0 or s.start + s.length > self.length:
                raise ValueError(f"segment {s} out of bounds")
            if s.start <= prev_end:
                raise ValueError(f"segment {s} overlaps its predecessor")
            prev_end = s.start + s.length - 1
        self.segments = segs


def _base_signal(spec: SyntheticSpec, t0: int, n: int,
                 rng: np.random.Generator,
                 phase_break: list | None = None) -> np.ndarray:
    """Sum of two sinusoids per channel + noise over timestamps t0..t0+n-1.

    ``phase_break`` is a list of (onset, shift) pairs: from each onset
    onward every sinusoid's phase is advanced by ``shift`` radians.
    """
    t = np.arange(t0, t0 + n, dtype=np.float64)
    shift = np.zeros(n)
    if phase_break:
        for onset, delta in phase_break:
            shift[t >= onset] += delta
    p1 = spec.base_period / 4.0
    p2 = spec.base_period / 1.5
    out = np.empty((n, spec.channels))
    for c in range(spec.channels):
        off = 2.0 * np.pi * c / max(spec.channels, 1)
        out[:, c] = (
            np.sin(2.0 * np.pi * t / p1 + off + shift)
            + 0.5 * np.sin(2.0 * np.pi * t / p2 + 0.5 * off + shift)
        )
    out += rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return out


def synth_generate(spec: SyntheticSpec):
    """Generate (train, test, labels) per the spec; seed-reproducible.

    Train is a clean draw of the base process. Test is a fresh draw with
    anomalies injected on the configured segments; labels are 1 exactly on
    injected segments.
    """
    rng = np.random.default_rng(spec.seed)
    train = _base_signal(spec, 0, spec.length, rng)

    phase_breaks = [
        (s.start, s.magnitude * np.pi)
        for s in spec.segments if s.kind == "seasonal"
    ]
    test = _base_signal(spec, spec.length, spec.length, rng,
                        phase_break=[(spec.length + on, d)
                                     for on, d in phase_breaks])
    labels = np.zeros(spec.length, dtype=bool)
    sigma = spec.noise_sigma
    period = spec.base_period / 4.0

    for s in spec.segments:
        sl = slice(s.start, s.start + s.length)
        labels[sl] = True
        if s.kind == "point":
            # additive spike on one channel at each index of the segment
            for i in range(s.start, s.start + s.length):
                test[i, i % spec.channels] += s.magnitude * sigma
        elif s.kind == "contextual":
            # offset the local seasonal course by >= 3 sigma while staying
            # inside the global value range
            lo, hi = test.min(), test.max()
            offset = max(3.0, s.magnitude) * sigma
            test[sl] = np.clip(test[sl] + offset, lo, hi)
        elif s.kind == "collective":
            # flat, level-shifted plateau
            level = test[s.start - 1] if s.start > 0 else test[s.start]
            test[sl] = level + s.magnitude * sigma
        elif s.kind == "seasonal":
            pass  # phase break already applied in the base draw
        elif s.kind == "trend":
            # linear ramp over the segment, back to base afterwards
            ramp = np.linspace(0.0, s.magnitude * sigma, s.length)
            test[sl] += ramp[:, None]
    return train, test, labels


def default_synthetic_spec(seed: int = 0, kinds=ANOMALY_TYPES,
                           length: int = 4000, channels: int = 3
                           ) -> SyntheticSpec:
    """Spread one segment of each requested kind across the test span."""
    kinds = list(kinds)
    segments = []
    gap = length // (len(kinds) + 1)
    sizing = {
        "point": (4, 25.0),
        "contextual": (60, 8.0),
        "collective": (80, 15.0),
        "seasonal": (140, 1.0),
        "trend": (100, 30.0),
    }
    for k, kind in enumerate(kinds):
        seg_len, mag = sizing[kind]
        # cap segment length so short series still get every kind
        seg_len = min(seg_len, max(1, gap // 2))
        segments.append(AnomalySegment(kind, gap * (k + 1), seg_len, mag))
    return SyntheticSpec(length=length, channels=channels,
                         segments=segments, seed=seed)


def write_csv(path, matrix: np.ndarray, header: list | None = None):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])

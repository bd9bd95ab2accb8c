"""Dual-attention reconstruction network.

Each encoder layer produces a data-driven series attention S and a
prior attention P built from fractal, Gaussian, and phase kernels whose
per-position parameters (Hurst field H_i, stiffness tau_i) are predicted
from encoder features. A linear head reconstructs the input window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Raised on inconsistent model configuration or input shapes."""


TAU_FLOOR = 0.5

PRIOR_MODES = ("full", "no_phase", "single_head")


@dataclass
class ModelConfig:
    window_length: int = 100
    channels: int = 1
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int = 128
    dropout: float = 0.0
    seed: int = 0
    prior_mode: str = "full"  # full | no_phase | single_head

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {PRIOR_MODES}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "window_length": self.window_length,
            "channels": self.channels,
            "model_dim": self.model_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "feedforward_dim": self.feedforward_dim,
            "dropout": self.dropout,
            "seed": self.seed,
            "prior_mode": self.prior_mode,
        }


@dataclass
class PriorFields:
    """Per-layer prior parameters after squashing to their valid ranges."""

    hurst: Tensor        # [..., L] in (0, 1)
    stiffness: Tensor    # [..., L] > 0
    mix_weights: Tensor  # [H, 3] rows sum to 1 (fractal, gaussian, phase)
    phase_period: Tensor  # [H] > 1
    phase_gain: Tensor    # [H] >= 0


@dataclass
class AttentionStack:
    """Row-stochastic attentions per layer: lists of [..., H, L, L] tensors."""

    series: list = field(default_factory=list)
    prior: list = field(default_factory=list)

    @property
    def num_matrices(self) -> int:
        return sum(t.shape[-3] for t in self.series)


@dataclass
class ReconOutput:
    recon: Tensor              # [..., L, C]
    attn: AttentionStack
    fields: list               # PriorFields per layer
    prior_logits: list         # raw pre-softmax prior scores per layer


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table of shape [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def causal_mask(length: int) -> np.ndarray:
    """Boolean [L, L] mask permitting j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def lag_matrix(length: int) -> np.ndarray:
    """delta[i, j] = max(i - j, 0), the causal lag."""
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    return np.maximum(i - j, 0).astype(np.float64)


class PiModel:
    """Encoder stack with series and prior attention pathways."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params()
        self.pos_enc = sinusoidal_encoding(cfg.window_length, cfg.model_dim)
        self.mask = causal_mask(cfg.window_length)
        self.lags = lag_matrix(cfg.window_length)

    # parameter setup -------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)

        def xavier(shape):
            fan = shape[-2] + shape[-1] if len(shape) >= 2 else shape[-1] + 1
            return rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)

        D, F, C = cfg.model_dim, cfg.feedforward_dim, cfg.channels
        self._add("embed.W", xavier((C, D)))
        self._add("embed.b", np.zeros(D))
        n_prior_heads = 1 if cfg.prior_mode == "single_head" else cfg.num_heads
        for l in range(cfg.num_layers):
            p = f"layer{l}."
            for proj in ("Wq", "Wk", "Wv", "Wo"):
                self._add(p + proj, xavier((D, D)))
            self._add(p + "bo", np.zeros(D))
            self._add(p + "ln1.g", np.ones(D))
            self._add(p + "ln1.b", np.zeros(D))
            self._add(p + "ln2.g", np.ones(D))
            self._add(p + "ln2.b", np.zeros(D))
            self._add(p + "ff.W1", xavier((D, F)))
            self._add(p + "ff.b1", np.zeros(F))
            self._add(p + "ff.W2", xavier((F, D)))
            self._add(p + "ff.b2", np.zeros(D))
            # per-position field head: features -> (raw H, raw tau)
            hid = max(8, D // 2)
            self._add(p + "field.W1", xavier((D, hid)))
            self._add(p + "field.b1", np.zeros(hid))
            self._add(p + "field.W2", xavier((hid, 2)) * 0.1)
            self._add(p + "field.b2", np.array([0.0, 1.0]))
            # per-head kernel mixture and phase template
            self._add(p + "mix_logits", np.zeros((n_prior_heads, 3)))
            periods = np.exp(
                rng.uniform(np.log(4.0), np.log(max(4.01, cfg.window_length)),
                            size=n_prior_heads)
            )
            self._add(p + "phase_period_raw", np.log(np.expm1(periods - 1.0)))
            self._add(p + "phase_gain_raw", np.zeros(n_prior_heads))
        self._add("head.W", xavier((D, C)))
        self._add("head.b", np.zeros(C))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def series_param_names(self) -> list[str]:
        """Parameters belonging to the data-driven (series) pathway."""
        return [n for n in self.params if not self._is_prior_param(n)]

    def prior_param_names(self) -> list[str]:
        return [n for n in self.params if self._is_prior_param(n)]

    @staticmethod
    def _is_prior_param(name: str) -> bool:
        return (".field." in name or "mix_logits" in name
                or "phase_period" in name or "phase_gain" in name)

    # forward pieces ---------------------------------------------------------

    def embed_window(self, window: Tensor) -> Tensor:
        """Linear channel projection plus fixed positional encoding."""
        if window.shape[-1] != self.cfg.channels:
            raise ConfigError(
                f"window has {window.shape[-1]} channels, "
                f"config expects {self.cfg.channels}"
            )
        if window.shape[-2] != self.cfg.window_length:
            raise ConfigError(
                f"window length {window.shape[-2]} != "
                f"config {self.cfg.window_length}"
            )
        x = ad.matmul(window, self.params["embed.W"]) + self.params["embed.b"]
        return x + Tensor(self.pos_enc)

    def _layer_norm(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        mu = ad.tmean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.tmean(ad.square(xc), axis=-1, keepdims=True)
        return g * (xc / ad.sqrt(var + 1e-6)) + b

    def _split_heads(self, x: Tensor, batched: bool) -> Tensor:
        L, D = self.cfg.window_length, self.cfg.model_dim
        H, d = self.cfg.num_heads, self.cfg.head_dim
        if batched:
            x = ad.reshape(x, (-1, L, H, d))
            return ad.transpose(x, (0, 2, 1, 3))
        x = ad.reshape(x, (L, H, d))
        return ad.transpose(x, (1, 0, 2))

    def _merge_heads(self, x: Tensor, batched: bool) -> Tensor:
        L, D = self.cfg.window_length, self.cfg.model_dim
        if batched:
            x = ad.transpose(x, (0, 2, 1, 3))
            return ad.reshape(x, (-1, L, D))
        x = ad.transpose(x, (1, 0, 2))
        return ad.reshape(x, (L, D))

    def series_attention(self, features: Tensor, layer: int):
        """Causal multi-head scaled dot-product attention.

        Returns (S, context) where S is [..., H, L, L] row-stochastic.
        """
        p = f"layer{layer}."
        batched = features.ndim == 3
        q = self._split_heads(ad.matmul(features, self.params[p + "Wq"]), batched)
        k = self._split_heads(ad.matmul(features, self.params[p + "Wk"]), batched)
        v = self._split_heads(ad.matmul(features, self.params[p + "Wv"]), batched)
        scale = 1.0 / np.sqrt(self.cfg.head_dim)
        logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2) if batched else (0, 2, 1))) * scale
        S = ad.masked_softmax_rows(logits, self.mask)
        ctx = self._merge_heads(ad.matmul(S, v), batched)
        ctx = ad.matmul(ctx, self.params[p + "Wo"]) + self.params[p + "bo"]
        return S, ctx

    def prior_fields(self, features: Tensor, layer: int) -> PriorFields:
        """Predict per-position H/tau and expose per-head kernel parameters.

        Features are detached so the prior pathway owns its parameters: the
        symmetric-KL gradients in the prior-update pass never leak into the
        encoder weights.
        """
        p = f"layer{layer}."
        feats = ad.stop_gradient(features)
        h1 = ad.relu(
            ad.matmul(feats, self.params[p + "field.W1"]) + self.params[p + "field.b1"]
        )
        raw = ad.matmul(h1, self.params[p + "field.W2"]) + self.params[p + "field.b2"]
        hurst = ad.sigmoid(raw[..., 0])
        stiffness = ad.softplus(raw[..., 1]) + TAU_FLOOR
        mix = ad.masked_softmax_rows(
            self.params[p + "mix_logits"],
            np.ones_like(self.params[p + "mix_logits"].data, dtype=bool),
        )
        period = ad.softplus(self.params[p + "phase_period_raw"]) + 1.0
        gain = ad.softplus(self.params[p + "phase_gain_raw"])
        return PriorFields(hurst, stiffness, mix, period, gain)

    def prior_attention(self, fields: PriorFields, batched: bool):
        """Row-stochastic causal prior attention [..., H, L, L].

        Per head h and lag delta = i - j >= 0 the logit mixes
        fractal   -(2 - 2 H_i) ln(1 + delta),
        gaussian  -delta^2 / (2 tau_i^2),
        phase     kappa_h cos(2 pi delta / p_h)
        with convex weights, then a causal row softmax.
        """
        cfg = self.cfg
        L = cfg.window_length
        delta = Tensor(self.lags)  # [L, L]
        n_ph = fields.phase_period.shape[0]

        # per-position fields index the row: [..., L] -> [..., L, 1]
        def row_field(t: Tensor) -> Tensor:
            if batched:
                return ad.reshape(t, (-1, L, 1))
            return ad.reshape(t, (L, 1))

        h_row = row_field(fields.hurst)
        tau_row = row_field(fields.stiffness)

        log_lag = Tensor(np.log1p(self.lags))
        fractal = -(2.0 - 2.0 * h_row) * log_lag
        gaussian = -ad.square(delta) / (2.0 * ad.square(tau_row))

        head_logits = []
        for h in range(n_ph):
            ph = ad.cos(delta * (2.0 * np.pi) / fields.phase_period[h])
            phase = fields.phase_gain[h] * ph
            logits_h = (
                fields.mix_weights[h, 0] * fractal
                + fields.mix_weights[h, 1] * gaussian
                + fields.mix_weights[h, 2] * phase
            )
            head_logits.append(logits_h)
        if n_ph == 1 and cfg.num_heads > 1:
            head_logits = head_logits * cfg.num_heads

        axis = -3
        stacked = _stack(head_logits, batched)
        if not np.isfinite(stacked.data).all():
            raise ad.NumericError("non-finite prior kernel logits")
        P = ad.masked_softmax_rows(stacked, self.mask)
        return P, stacked

    def _uniform_prior(self, batch_shape) -> Tensor:
        L, H = self.cfg.window_length, self.cfg.num_heads
        row = self.mask / self.mask.sum(axis=-1, keepdims=True)
        full = np.broadcast_to(row, batch_shape + (H, L, L)).copy()
        return Tensor(full)

    # full forward -----------------------------------------------------------

    def forward(self, window: Tensor, rng: np.random.Generator | None = None,
                training: bool = False) -> ReconOutput:
        """Run the encoder stack and reconstruction head on one window
        ([L, C]) or a batch ([B, L, C])."""
        cfg = self.cfg
        batched = window.ndim == 3
        x = self.embed_window(window)
        stack = AttentionStack()
        all_fields = []
        all_logits = []
        for l in range(cfg.num_layers):
            p = f"layer{l}."
            normed = self._layer_norm(
                x, self.params[p + "ln1.g"], self.params[p + "ln1.b"]
            )
            S, ctx = self.series_attention(normed, l)
            if training and cfg.dropout > 0.0 and rng is not None:
                keep = (rng.random(ctx.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                ctx = ctx * Tensor(keep)
            x = x + ctx
            normed2 = self._layer_norm(
                x, self.params[p + "ln2.g"], self.params[p + "ln2.b"]
            )
            ff = ad.matmul(
                ad.relu(ad.matmul(normed2, self.params[p + "ff.W1"])
                        + self.params[p + "ff.b1"]),
                self.params[p + "ff.W2"],
            ) + self.params[p + "ff.b2"]
            x = x + ff

            if cfg.prior_mode == "no_phase":
                batch_shape = (window.shape[0],) if batched else ()
                P = self._uniform_prior(batch_shape)
                fields = self.prior_fields(normed, l)
                logits = Tensor(np.zeros(P.shape))
            else:
                fields = self.prior_fields(normed, l)
                P, logits = self.prior_attention(fields, batched)
            stack.series.append(S)
            stack.prior.append(P)
            all_fields.append(fields)
            all_logits.append(logits)

        recon = ad.matmul(x, self.params["head.W"]) + self.params["head.b"]
        return ReconOutput(recon, stack, all_fields, all_logits)

    # persistence -------------------------------------------------------------

    def save(self, path, extra: dict | None = None,
             extra_arrays: dict | None = None):
        """Write config + parameters (and optional metadata) to an .npz file."""
        meta = {"format_version": 1, "config": self.cfg.to_dict()}
        if extra:
            meta["extra"] = extra
        arrays = {f"param::{k}": v.data for k, v in self.params.items()}
        if extra_arrays:
            arrays.update({f"extra::{k}": v for k, v in extra_arrays.items()})
        np.savez(path, __meta__=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            **arrays)

    @classmethod
    def load(cls, path):
        """Restore a model; returns (model, meta, extra_arrays)."""
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            cfg = ModelConfig(**meta["config"])
            model = cls(cfg)
            extra_arrays = {}
            for key in z.files:
                if key.startswith("param::"):
                    name = key[len("param::"):]
                    model.params[name].data = np.array(z[key], dtype=np.float64)
                elif key.startswith("extra::"):
                    extra_arrays[key[len("extra::"):]] = np.array(z[key])
        return model, meta, extra_arrays


def _stack(tensors, batched: bool) -> Tensor:
    """Stack per-head [..., L, L] tensors into [..., H, L, L] on the tape."""
    axis = 1 if batched else 0
    expanded = []
    for t in tensors:
        if batched:
            expanded.append(ad.reshape(t, (t.shape[0], 1) + t.shape[1:]))
        else:
            expanded.append(ad.reshape(t, (1,) + t.shape))
    out = expanded[0]
    for t in expanded[1:]:
        out = _concat_axis(out, t, axis=axis)
    return out


def _concat_axis(a: Tensor, b: Tensor, axis: int) -> Tensor:
    na = a.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def backward(g):
        ga = np.take(g, np.arange(na), axis=axis)
        gb = np.take(g, np.arange(na, g.shape[axis]), axis=axis)
        return ga, gb

    return ad._record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Hurst estimator
# ---------------------------------------------------------------------------


def estimate_hurst_rs(series, min_block: int = 16, num_scales: int = 6):
    """Rescaled-range Hurst estimate, clamped to (0.01, 0.99).

    Slope of log(R/S) vs log(block size) over logarithmically spaced block
    sizes. Constant input returns (0.5, flagged=True). The R/S statistic is
    exactly invariant to positive rescaling of the input.

    Returns (estimate, flagged).
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    T = x.size
    if T < 4 * min_block:
        raise ad.ContractError(
            f"series length {T} < 4 * min_block ({4 * min_block})"
        )
    if np.ptp(x) == 0.0:
        return 0.5, True
    sizes = np.unique(
        np.round(np.exp(np.linspace(np.log(min_block), np.log(T // 4),
                                    num_scales))).astype(int)
    )
    log_n, log_rs = [], []
    for n in sizes:
        k = T // n
        blocks = x[: k * n].reshape(k, n)
        dev = blocks - blocks.mean(axis=1, keepdims=True)
        z = np.cumsum(dev, axis=1)
        r = z.max(axis=1) - z.min(axis=1)
        s = blocks.std(axis=1)
        ok = s > 0
        if not ok.any():
            continue
        rs = (r[ok] / s[ok]).mean()
        if rs > 0:
            log_n.append(np.log(n))
            log_rs.append(np.log(rs))
    if len(log_n) < 2:
        return 0.5, True
    slope = np.polyfit(log_n, log_rs, 1)[0]
    return float(np.clip(slope, 0.01, 0.99)), False

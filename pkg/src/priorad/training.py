"""Two-pass min-max training with stop-gradient alternation.

Each step runs two sequential updates: pass 1 pushes the series attention
(with the prior frozen) through L1 = recon - k*symKL + R, pass 2 pulls the
prior (with the series frozen) through L2 = recon + k*symKL + R. R holds
smoothness, Hurst distillation, and a small L2 stabilizer on the raw prior
scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape, OptimizerState, stop_gradient
from .model import PiModel, ModelConfig, ReconOutput
from .data import windows, split_train_val, SplitError
from .model import estimate_hurst_rs


class DivergedError(RuntimeError):
    """Raised when a loss term becomes non-finite during a step."""


@dataclass
class TrainConfig:
    k: float = 3.0               # series-prior coupling weight
    lambda_reg: float = 0.1      # smoothness weight
    lambda_hurst: float = 0.01   # Hurst distillation weight
    lambda_score: float = 1e-4   # L2 stabilizer on raw prior scores
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 5
    patience: int = 3
    clip_norm: float = 5.0
    val_fraction: float = 0.2
    single_pass_ascent: bool = False  # descend series / ascend prior on one loss
    kl_average: bool = False          # average symKL over layers*heads
    series_ascent: bool = True        # keep the -k*symKL term in pass 1

    def __post_init__(self):
        if min(self.k, self.lambda_reg, self.lambda_hurst,
               self.lambda_score) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class LossBreakdown:
    recon: float
    sym_kl: float
    smooth: float
    hurst: float
    score_l2: float
    total_L1: float
    total_L2: float

    FIELDS = ("recon", "sym_kl", "smooth", "hurst", "score_l2",
              "total_L1", "total_L2")


@dataclass
class Checkpoint:
    model: PiModel
    optimizer: OptimizerState
    epoch: int
    best_val_recon: float
    hurst_target: float


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def loss_reconstruction(x: Tensor, recon: Tensor) -> Tensor:
    """MSE averaged over time and channels (and batch if present)."""
    if x.shape != recon.shape:
        raise ad.ShapeError(
            f"reconstruction shape {recon.shape} != input {x.shape}"
        )
    return ad.tmean(ad.square(x - recon))


def loss_sym_kl(attn, frozen: str, average: bool = False,
                num_heads: int | None = None) -> Tensor:
    """Symmetric series-prior KL, summed over layers, heads, and rows.

    ``frozen`` selects the stop-gradiented side: "prior" for the series
    update pass, "series" for the prior update pass, "none" for the
    single-loss variant. Batched inputs are averaged over the batch.
    """
    total = None
    n_mats = 0
    for S, P in zip(attn.series, attn.prior):
        if frozen == "prior":
            a, b = S, stop_gradient(P)
        elif frozen == "series":
            a, b = P, stop_gradient(S)
        elif frozen == "none":
            a, b = S, P
        else:
            raise ValueError(f"unknown frozen side {frozen!r}")
        per_row = ad.kl_div_rows(a, b) + ad.kl_div_rows(b, a)  # [..., H, L]
        summed = ad.tsum(per_row, axis=(-2, -1))
        if summed.ndim > 0:  # batch
            summed = ad.tmean(summed)
        n_mats += S.shape[-3]
        total = summed if total is None else total + summed
    if average and n_mats > 0:
        total = total * (1.0 / n_mats)
    return total


def loss_smoothness(fields_per_layer) -> Tensor:
    """First-difference penalty on H and tau, summed over fields and layers."""
    total = None
    for f in fields_per_layer:
        for theta in (f.hurst, f.stiffness):
            L = theta.shape[-1]
            if L < 2:
                raise ad.ContractError("smoothness needs window length >= 2")
            diff = theta[..., 1:] - theta[..., :-1]
            term = ad.tsum(ad.square(diff), axis=-1) * (1.0 / (L - 1))
            if term.ndim > 0:
                term = ad.tmean(term)
            total = term if total is None else total + term
    return total


def loss_hurst_distill(fields_per_layer, target: float) -> Tensor:
    """Mean squared pull of the Hurst field towards the dataset target."""
    if not (0.0 < target < 1.0):
        raise ad.ContractError(f"Hurst target {target} outside (0, 1)")
    total = None
    for f in fields_per_layer:
        term = ad.tmean(ad.square(f.hurst - target))
        total = term if total is None else total + term
    return total


def loss_prior_score_l2(prior_logits) -> Tensor:
    """Mean squared magnitude of the unnormalized prior scores."""
    total = None
    for logits in prior_logits:
        term = ad.tmean(ad.square(logits))
        total = term if total is None else total + term
    return total


def _regularizer(out: ReconOutput, cfg: TrainConfig, hurst_target: float):
    smooth = loss_smoothness(out.fields)
    hurst = loss_hurst_distill(out.fields, hurst_target)
    score = loss_prior_score_l2(out.prior_logits)
    reg = (cfg.lambda_reg * smooth + cfg.lambda_hurst * hurst
           + cfg.lambda_score * score)
    return reg, smooth, hurst, score


def _check_finite(**terms):
    for name, value in terms.items():
        if not np.isfinite(value):
            raise DivergedError(f"loss term {name!r} is non-finite: {value}")


# ---------------------------------------------------------------------------
# Steps and loop
# ---------------------------------------------------------------------------


def minmax_step(batch: np.ndarray, model: PiModel, opt: OptimizerState,
                cfg: TrainConfig, hurst_target: float) -> LossBreakdown:
    """One two-pass update on a batch of standardized windows [B, L, C]."""
    x = Tensor(batch)

    if cfg.single_pass_ascent:
        return _single_pass_step(x, model, opt, cfg, hurst_target)

    # pass 1: update series pathway towards/away from the frozen prior
    opt.zero_grad()
    with Tape() as tape:
        out = model.forward(x)
        recon = loss_reconstruction(x, out.recon)
        sym = loss_sym_kl(out.attn, frozen="prior", average=cfg.kl_average)
        reg, smooth, hurst, score = _regularizer(out, cfg, hurst_target)
        # the series player maximizes the discrepancy only when asked to;
        # with series_ascent off, pass 1 is a pure reconstruction update
        k1 = cfg.k if cfg.series_ascent else 0.0
        l1 = recon - k1 * sym + reg
    _check_finite(recon=recon.item(), sym_kl=sym.item(),
                  smooth=smooth.item(), hurst=hurst.item(),
                  score_l2=score.item())
    tape.backward(l1)
    opt.step()

    # pass 2: update prior pathway towards the frozen series
    opt.zero_grad()
    with Tape() as tape:
        out = model.forward(x)
        recon2 = loss_reconstruction(x, out.recon)
        sym2 = loss_sym_kl(out.attn, frozen="series", average=cfg.kl_average)
        reg2, smooth2, hurst2, score2 = _regularizer(out, cfg, hurst_target)
        l2 = recon2 + cfg.k * sym2 + reg2
    _check_finite(recon=recon2.item(), sym_kl=sym2.item(),
                  smooth=smooth2.item(), hurst=hurst2.item(),
                  score_l2=score2.item())
    tape.backward(l2)
    opt.step()

    return LossBreakdown(
        recon=recon.item(), sym_kl=sym.item(), smooth=smooth.item(),
        hurst=hurst.item(), score_l2=score.item(),
        total_L1=l1.item(), total_L2=l2.item(),
    )


def _single_pass_step(x, model, opt, cfg, hurst_target) -> LossBreakdown:
    """Algorithm-1 variant: one loss, series descends, prior ascends."""
    opt.zero_grad()
    with Tape() as tape:
        out = model.forward(x)
        recon = loss_reconstruction(x, out.recon)
        sym = loss_sym_kl(out.attn, frozen="none", average=cfg.kl_average)
        reg, smooth, hurst, score = _regularizer(out, cfg, hurst_target)
        total = recon + cfg.k * sym + reg
    _check_finite(recon=recon.item(), sym_kl=sym.item(),
                  smooth=smooth.item(), hurst=hurst.item(),
                  score_l2=score.item())
    tape.backward(total)
    for name in model.prior_param_names():
        p = model.params[name]
        if p.grad is not None:
            p.grad = -p.grad
    opt.step()
    t = total.item()
    return LossBreakdown(recon=recon.item(), sym_kl=sym.item(),
                         smooth=smooth.item(), hurst=hurst.item(),
                         score_l2=score.item(), total_L1=t, total_L2=t)


def validation_recon_loss(model: PiModel, val_windows: np.ndarray,
                          batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(val_windows), batch_size):
        b = val_windows[i : i + batch_size]
        out = model.forward(Tensor(b))
        err = (out.recon.data - b) ** 2
        total += err.mean(axis=(1, 2)).sum()
        count += len(b)
    return total / max(count, 1)


def dataset_hurst_target(train_series: np.ndarray) -> float:
    """Mean of per-channel R/S estimates, clamped inside (0, 1)."""
    est = [estimate_hurst_rs(train_series[:, c])[0]
           for c in range(train_series.shape[1])]
    return float(np.clip(np.mean(est), 0.01, 0.99))


def train(train_series: np.ndarray, model_cfg: ModelConfig,
          cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Fit on a standardized series; early stop on validation recon loss.

    Validation is carved chronologically from the tail of the series.
    Returns the checkpoint with the best validation reconstruction loss.
    """
    if len(train_series) == 0:
        raise ad.ContractError("empty training series")
    L = model_cfg.window_length
    tr, val = split_train_val(train_series, cfg.val_fraction, min_length=L)
    train_w = windows(tr, L)
    val_w = windows(val, L)

    hurst_target = dataset_hurst_target(tr)
    model = PiModel(model_cfg)
    opt = OptimizerState(model.parameters(), lr=cfg.learning_rate,
                         clip_norm=cfg.clip_norm)

    rng = np.random.default_rng(model_cfg.seed)
    log_rows = []
    # patience counts epochs without improvement over the best *trained*
    # epoch; the untrained initialization is not a baseline
    best = Checkpoint(model, opt, epoch=0, best_val_recon=np.inf,
                      hurst_target=hurst_target)
    best_params = {k: v.data.copy() for k, v in model.params.items()}
    stale = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_w))
        for i in range(0, len(order), cfg.batch_size):
            batch = train_w[order[i : i + cfg.batch_size]]
            bd = minmax_step(batch, model, opt, cfg, hurst_target)
            step += 1
            log_rows.append([step, bd.recon, bd.sym_kl, bd.smooth,
                             bd.hurst, bd.total_L1, bd.total_L2])
        val_loss = validation_recon_loss(model, val_w)
        if val_loss < best.best_val_recon:
            best.best_val_recon = val_loss
            best.epoch = epoch
            best_params = {k: v.data.copy() for k, v in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, v in best_params.items():
        model.params[k].data = v
    if not np.isfinite(best.best_val_recon):
        best.best_val_recon = validation_recon_loss(model, val_w)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "recon", "sym_kl", "smooth", "hurst",
                        "total_L1", "total_L2"])
            for row in log_rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return best


def save_checkpoint(ckpt: Checkpoint, path):
    ckpt.model.save(
        path,
        extra={"epoch": ckpt.epoch,
               "best_val_recon": ckpt.best_val_recon,
               "hurst_target": ckpt.hurst_target},
        extra_arrays=ckpt.optimizer.state_arrays(),
    )


def load_checkpoint(path) -> Checkpoint:
    model, meta, arrays = PiModel.load(path)
    opt = OptimizerState(model.parameters())
    if "step_count" in arrays:
        opt.load_state_arrays(arrays)
    extra = meta.get("extra", {})
    return Checkpoint(model, opt,
                      epoch=int(extra.get("epoch", 0)),
                      best_val_recon=float(extra.get("best_val_recon",
                                                     float("nan"))),
                      hurst_target=float(extra.get("hurst_target", 0.5)))

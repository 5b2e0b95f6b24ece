"""Leakage-safe training: five-term objective, KL / posterior-mixing schedules, AdamW loop."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .data import WindowBatch
from .errors import ConfigError, TrainingDivergence
from .latent import LatentGaussian, gaussian_nll, kl_diag, sample
from .model import WorldModel, load_state, snapshot
from .runtime import pinned_threads

TERMS = ("recon", "target", "huber", "consistency", "kl", "rollout")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 256
    grad_clip: float = 1.0
    max_epochs: int = 100
    patience: int = 10
    tol: float = 1e-5
    beta_start: float = 0.01
    beta_end: float = 1.0
    kl_epochs: int = 20
    pi_start: float = 1.0
    pi_end: float = 0.5
    input_noise: float = 0.01
    channel_drop: float = 0.1
    huber_delta: float = 1.0
    w_recon: float = 1.0
    w_target: float = 1.0
    w_huber: float = 0.1
    w_cons: float = 0.1
    w_rollout: float = 0.1
    rollout_steps: int = 0
    restart_period: int = 10
    restart_mult: int = 2
    mixed_precision: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        if self.tol < 0 or self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("need tol >= 0, patience >= 1, max_epochs >= 1, batch_size >= 1")
        for name in ("pi_start", "pi_end", "channel_drop"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.input_noise < 0 or self.huber_delta <= 0 or self.kl_epochs < 0:
            raise ConfigError("input_noise >= 0, huber_delta > 0, kl_epochs >= 0 required")
        if self.rollout_steps < 0:
            raise ConfigError("rollout_steps must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    target: torch.Tensor
    huber: torch.Tensor
    consistency: torch.Tensor
    kl: torch.Tensor
    rollout: torch.Tensor
    total: torch.Tensor
    beta_e: float
    pi_e: float | None = None

    def as_floats(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in (*TERMS, "total")}
        out["beta_e"] = self.beta_e
        return out


@dataclass
class Outputs:
    summary: torch.Tensor
    prior: LatentGaussian
    chosen: LatentGaussian
    z: torch.Tensor
    y_full_hat: torch.Tensor
    y_t_hat: torch.Tensor
    logvar_t: torch.Tensor | None
    phase: str


@dataclass
class Tensors:
    """A WindowBatch moved to torch in the model dtype."""

    inputs: torch.Tensor
    actions: torch.Tensor
    targets_full: torch.Tensor
    targets: torch.Tensor
    future_full: torch.Tensor | None = None
    future_actions: torch.Tensor | None = None
    future_mask: torch.Tensor | None = None

    @classmethod
    def from_batch(cls, batch: WindowBatch, dtype: torch.dtype) -> "Tensors":
        t = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
        mask = None if batch.future_mask is None else torch.as_tensor(batch.future_mask)
        return cls(t(batch.inputs), t(batch.actions), t(batch.targets_full), t(batch.targets),
                   t(batch.future_full), t(batch.future_actions), mask)


# --- schedules and augmentation ----------------------------------------------------


def schedules(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Linear KL-weight and posterior-probability ramps over ``kl_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = 1.0 if cfg.kl_epochs == 0 else min(1.0, epoch / cfg.kl_epochs)
    beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac
    pi = cfg.pi_start + (cfg.pi_end - cfg.pi_start) * frac
    return beta, pi


def augment(batch: WindowBatch, cfg: TrainConfig, rng: np.random.Generator, action_index: int) -> WindowBatch:
    """Gaussian input noise plus per-window feature-channel dropout; the PRB column is left alone."""
    x = batch.inputs.copy()
    B, L, F_ = x.shape
    keep_col = np.ones(F_, dtype=bool)
    keep_col[action_index] = False  # columns subject to augmentation
    if cfg.input_noise > 0:
        noise = rng.standard_normal(x.shape) * cfg.input_noise
        x[:, :, keep_col] += noise[:, :, keep_col]
    if cfg.channel_drop > 0:
        drop = rng.random((B, F_)) < cfg.channel_drop
        drop[:, action_index] = False
        x = np.where(drop[:, None, :], 0.0, x)
    return WindowBatch(x, batch.actions, batch.targets_full, batch.targets, batch.anchors,
                       batch.future_full, batch.future_actions, batch.future_mask)


def huber(r: torch.Tensor, delta: float) -> torch.Tensor:
    """Elementwise Huber loss (0.5 r^2 inside ``delta``, linear outside)."""
    return F.huber_loss(r, torch.zeros_like(r), reduction="none", delta=delta)


# --- forward pass and losses -----------------------------------------------------------


def forward_outputs(model: WorldModel, t: Tensors, phase: str, noise: torch.Tensor | None) -> Outputs:
    """Encode, pick prior or posterior, draw ``z`` (``noise=None`` uses the mean), decode."""
    summary = model.encode(t.inputs, t.actions)
    prior = model.heads.prior(summary)
    if phase == "posterior":
        chosen = model.heads.posterior(summary, t.targets_full)
    elif phase == "prior":
        chosen = prior
    else:
        raise ValueError(f"phase must be 'prior' or 'posterior', got {phase!r}")
    z = chosen.mu if noise is None else sample(chosen, noise)
    y_full_hat = model.heads.decode_full(summary, z)
    pred = model.heads.decode_target(summary, z, t.inputs[..., -1, :])
    return Outputs(summary, prior, chosen, z, y_full_hat, pred.mean, pred.logvar, phase)


def loss_terms(model: WorldModel, t: Tensors, out: Outputs, cfg: TrainConfig, beta_e: float,
               rollout_fn: Callable[[], torch.Tensor] | None = None) -> LossBreakdown:
    mc = model.cfg
    recon = ((out.y_full_hat - t.targets_full) ** 2).sum(-1).mean()
    resid = out.y_t_hat - t.targets
    if mc.heteroscedastic:
        target = gaussian_nll(t.targets, out.y_t_hat, out.logvar_t).mean()
    else:
        target = (resid ** 2).sum(-1).mean()
    hub = huber(resid, cfg.huber_delta).sum(-1).mean()
    full_on_target = out.y_full_hat[..., mc.target_index:mc.target_index + 1] if mc.out_dim == 1 \
        else out.y_full_hat
    cons = ((out.y_t_hat - full_on_target) ** 2).sum(-1).mean()
    if out.phase == "posterior":
        kl = kl_diag(out.chosen, out.prior).mean()
    else:
        kl = torch.zeros((), dtype=recon.dtype)
    if cfg.rollout_steps > 0 and rollout_fn is not None:
        roll = rollout_fn()
        w_roll = cfg.w_rollout
    else:
        roll = torch.zeros((), dtype=recon.dtype)
        w_roll = 0.0
    total = (cfg.w_recon * recon + cfg.w_target * target + cfg.w_huber * hub
             + cfg.w_cons * cons + beta_e * kl + w_roll * roll)
    return LossBreakdown(recon, target, hub, cons, kl, roll, total, beta_e)


def rollout_penalty(model: WorldModel, t: Tensors, K: int) -> torch.Tensor:
    """Mean over k=1..K of the squared error of the k-step decoded frame (prior-mean latent).

    The window is advanced with decoded frames; the action channel receives the
    logged PRB of each step. Windows whose K future rows leave the split are skipped.
    """
    if K <= 0:
        return torch.zeros((), dtype=t.inputs.dtype)
    if t.future_full is None or t.future_full.shape[1] < K:
        raise ConfigError(f"rollout penalty needs {K} aligned future frames per window")
    mask = t.future_mask if t.future_mask is not None else torch.ones(len(t.inputs), dtype=torch.bool)
    if not bool(mask.any()):
        return torch.zeros((), dtype=t.inputs.dtype)
    X, A = t.inputs[mask], t.actions[mask]
    fut, fut_a = t.future_full[mask], t.future_actions[mask]
    errs = []
    for k in range(K):
        summary = model.encode(X, A)
        frame = model.heads.decode_full(summary, model.heads.prior(summary).mu)
        errs.append(((frame - fut[:, k]) ** 2).sum(-1).mean())
        X = torch.cat([X[:, 1:], frame.unsqueeze(1)], dim=1)
        A = torch.cat([A[:, 1:], fut_a[:, k].reshape(-1, 1, 1)], dim=1)
    return torch.stack(errs).mean()


def total_loss(model: WorldModel, t: Tensors, cfg: TrainConfig, phase: str,
               noise: torch.Tensor | None, beta_e: float) -> LossBreakdown:
    out = forward_outputs(model, t, phase, noise)
    roll = (lambda: rollout_penalty(model, t, cfg.rollout_steps)) if cfg.rollout_steps > 0 else None
    return loss_terms(model, t, out, cfg, beta_e, roll)


# --- training loop ----------------------------------------------------------------------


class EarlyStopping:
    """Save-best / patience counter. ``step`` returns True on a new best."""

    def __init__(self, patience: int, tol: float = 0.0):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.best_epoch: int | None = None
        self.counter = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best - self.tol:
            self.best, self.best_epoch, self.counter = value, epoch, 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def clip_gradients(params, max_norm: float) -> float:
    """Global-norm clip; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, batch); order of generation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch]))


@contextlib.contextmanager
def parameter_write_guard(model: WorldModel):
    """No-grad region that fails loudly if any parameter changes inside it."""
    before = snapshot(model)
    with torch.no_grad():
        yield
    for k, v in model.state_dict().items():
        if not torch.equal(v, before[k]):
            raise RuntimeError(f"parameter {k} was modified during validation")


def validation_loss(model: WorldModel, t: Tensors, cfg: TrainConfig) -> tuple[float, dict]:
    """Teacher-forced loss in the prior phase (latent at the prior mean), no gradients."""
    was_training = model.training
    model.eval()
    try:
        with parameter_write_guard(model):
            out = forward_outputs(model, t, "prior", None)
            roll = (lambda: rollout_penalty(model, t, cfg.rollout_steps)) if cfg.rollout_steps > 0 else None
            lb = loss_terms(model, t, out, cfg, 0.0, roll)
            resid = (out.y_t_hat - t.targets).double()
            metrics = {
                "val_target_mae_std": float(resid.abs().mean()),
                "val_target_rmse_std": float(resid.pow(2).mean().sqrt()),
            }
    finally:
        model.train(was_training)
    return float(lb.total), {**{f"val_{k}": v for k, v in lb.as_floats().items() if k in TERMS}, **metrics}


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val: float
    epochs_run: int
    log: list[dict] = field(default_factory=list)


@pinned_threads()
def train(model: WorldModel, train_batch: WindowBatch, val_batch: WindowBatch, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """AdamW + cosine warm restarts (per mini-batch) + clipping + patience early stop.

    Returns the best-validation parameters. All randomness (shuffling, augmentation,
    posterior/prior switch, reparameterization noise, dropout) is drawn from streams
    keyed by ``(seed, epoch, batch)``.
    """
    dtype = model.dtype
    n = len(train_batch)
    if n == 0 or len(val_batch) == 0:
        raise ConfigError("train and validation splits must each hold at least one window")
    nb = math.ceil(n / cfg.batch_size)
    mc = model.cfg
    if cfg.rollout_steps > 0 and train_batch.future_full is None:
        raise ConfigError("rollout_steps > 0 needs windows built with rollout_steps")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=cfg.restart_period, T_mult=cfg.restart_mult)
    val_t = Tensors.from_batch(val_batch, dtype)
    stopper = EarlyStopping(cfg.patience, cfg.tol)
    best_state = snapshot(model)
    log: list[dict] = []
    model.train()

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        beta, pi = schedules(epoch, cfg)
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 2**31])).permutation(n)
        sums = dict.fromkeys((*TERMS, "total"), 0.0)
        n_post = 0
        for b in range(nb):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            rng = batch_rng(cfg.seed, epoch, b)
            phase = "posterior" if rng.random() < pi else "prior"
            batch = augment(train_batch.subset(idx), cfg, rng, mc.action_index)
            noise = torch.as_tensor(rng.standard_normal((len(idx), mc.d_latent)), dtype=dtype)
            torch.manual_seed(int(rng.integers(2**62)))  # dropout masks
            t = Tensors.from_batch(batch, dtype)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=cfg.mixed_precision):
                lb = total_loss(model, t, cfg, phase, noise, beta)
            for term in (*TERMS, "total"):
                v = float(getattr(lb, term).detach())
                if not math.isfinite(v):
                    load_state(model, best_state)
                    raise TrainingDivergence(
                        f"non-finite {term} loss at epoch {epoch + 1}, batch {b}",
                        epoch=epoch + 1, batch=b, term=term, best_state=best_state)
                sums[term] += v * len(idx)
            n_post += phase == "posterior"
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            clip_gradients(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step(epoch + (b + 1) / nb)

        val, val_metrics = validation_loss(model, val_t, cfg)
        if not math.isfinite(val):
            load_state(model, best_state)
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch + 1}",
                                     epoch=epoch + 1, term="validation", best_state=best_state)
        improved = stopper.step(val, epoch + 1)
        if improved:
            best_state = snapshot(model)
        record = {
            "epoch": epoch + 1,
            **{f"train_{k}": v / n for k, v in sums.items()},
            "beta_e": beta,
            "pi_e": pi,
            "posterior_fraction": n_post / nb,
            "lr": opt.param_groups[0]["lr"],
            "val_loss": val,
            **val_metrics,
            "best_epoch": stopper.best_epoch,
            "improved": improved,
            "wall_clock_s": time.perf_counter() - t0,
        }
        log.append(record)
        if on_epoch:
            on_epoch(record)
        if stopper.should_stop:
            break

    load_state(model, best_state)
    return TrainResult(best_state, stopper.best_epoch, stopper.best, len(log), log)

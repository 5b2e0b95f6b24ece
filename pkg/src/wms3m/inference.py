"""Prior-sampling Monte-Carlo prediction, variance decomposition and forecast metrics."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import StandardScaler
from .model import WorldModel
from .runtime import pinned_threads

DEFAULT_SAMPLES = 8


@dataclass
class Prediction:
    mean: np.ndarray  # (O,) physical units
    std_mean: np.ndarray  # (O,) standardized
    variance: np.ndarray  # (O,) physical units
    aleatoric: np.ndarray  # (O,) standardized
    epistemic: np.ndarray  # (O,) standardized
    samples_used: int

    def interval(self, z: float = 1.96) -> tuple[np.ndarray, np.ndarray]:
        half = z * np.sqrt(self.variance)
        return self.mean - half, self.mean + half

    def to_dict(self, z: float = 1.96) -> dict:
        lo, hi = self.interval(z)
        return {
            "mean": self.mean.tolist(), "std_mean": self.std_mean.tolist(),
            "variance": self.variance.tolist(), "aleatoric": self.aleatoric.tolist(),
            "epistemic": self.epistemic.tolist(), "samples_used": self.samples_used,
            "interval": {"z": z, "lower": lo.tolist(), "upper": hi.tolist()},
        }


def sample_noise(seed: int, window_id: int, S: int, d_latent: int) -> np.ndarray:
    """Counter-based draws: Philox keyed by (seed, window_id), so windows are independent."""
    key = (int(seed) % 2**64) * 2**64 + int(window_id) % 2**64
    return np.random.Generator(np.random.Philox(key=key)).standard_normal((S, d_latent))


@pinned_threads()
@torch.no_grad()
def predict_standardized(model: WorldModel, inputs_std: np.ndarray, noise: np.ndarray) -> dict[str, np.ndarray]:
    """Batched MC core on standardized windows.

    ``inputs_std`` is (B, L, F); ``noise`` is (B, S, d_z). Returns standardized
    ``mean``, ``aleatoric``, ``epistemic`` (each (B, O)) plus per-sample head means.
    """
    x = model.tensor(inputs_std)
    a = x[..., model.cfg.action_index:model.cfg.action_index + 1]
    summary = model.encode(x, a)
    prior = model.heads.prior(summary)
    eps = model.tensor(noise)
    S = eps.shape[1]
    z = prior.mu.unsqueeze(1) + torch.exp(0.5 * prior.logvar).unsqueeze(1) * eps
    d_rep = summary.unsqueeze(1).expand(-1, S, -1)
    skip = model.heads.ar_skip(x[:, -1, :])  # deterministic, once per window
    pred = model.heads.decode_target(d_rep, z, None, skip=skip.unsqueeze(1))
    head = pred.head_mean.double().numpy()  # (B, S, O)
    means = pred.mean.double().numpy()
    mean = means.mean(axis=1)
    if pred.logvar is not None:
        aleatoric = np.exp(pred.logvar.double().numpy()).mean(axis=1)
    else:
        aleatoric = np.zeros_like(mean)
    epistemic = head.var(axis=1, ddof=1) if S > 1 else np.zeros_like(mean)
    return {"mean": mean, "aleatoric": aleatoric, "epistemic": epistemic, "samples": means}


def predict(window: np.ndarray, model: WorldModel, scaler: StandardScaler, S: int = DEFAULT_SAMPLES,
            seed: int = 0, window_id: int = 0) -> Prediction:
    """Predict the next-step target from one (L, F) window in physical units."""
    if S < 1:
        raise ValueError(f"number of samples S must be >= 1, got {S}")
    x = scaler.transform(np.asarray(window, dtype=np.float64))[None]
    noise = sample_noise(seed, window_id, S, model.cfg.d_latent)[None]
    out = predict_standardized(model, x, noise)
    return _to_prediction(out, 0, scaler, S)


def _to_prediction(out: dict, i: int, scaler: StandardScaler, S: int) -> Prediction:
    m, ale, epi = out["mean"][i], out["aleatoric"][i], out["epistemic"][i]
    return Prediction(
        mean=scaler.inverse_target(m), std_mean=m,
        variance=(ale + epi) * scaler.target_std ** 2,
        aleatoric=ale, epistemic=epi, samples_used=S,
    )


@dataclass
class MetricReport:
    rmse: float
    mae: float
    mse: float
    r2: float
    skill_r: float | None
    skill_m: float | None
    persistence_rmse: float
    persistence_mae: float
    n_samples: int
    latency_mean_s: float
    latency_median_s: float
    per_feature: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def regression_metrics(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Pooled RMSE/MAE/MSE/R^2 over all entries; R^2 uses per-column means."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(truth), -1)
    truth = np.asarray(truth, dtype=np.float64).reshape(len(truth), -1)
    err = pred - truth
    mse = float(np.mean(err ** 2))
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((truth - truth.mean(axis=0)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return {"rmse": math.sqrt(mse), "mae": float(np.mean(np.abs(err))), "mse": mse, "r2": r2}


def skill_scores(model_errors: np.ndarray, persistence_errors: np.ndarray) -> tuple[float | None, float | None]:
    """``1 - RMSE/RMSE_pers`` and ``1 - MAE/MAE_pers``; None where the baseline is perfect."""
    me = np.asarray(model_errors, dtype=np.float64).ravel()
    pe = np.asarray(persistence_errors, dtype=np.float64).ravel()
    r_m, r_p = math.sqrt(np.mean(me ** 2)), math.sqrt(np.mean(pe ** 2))
    a_m, a_p = float(np.mean(np.abs(me))), float(np.mean(np.abs(pe)))
    skill_r = None if r_p == 0 else 1.0 - r_m / r_p
    skill_m = None if a_p == 0 else 1.0 - a_m / a_p
    return skill_r, skill_m


@dataclass
class Evaluation:
    report: MetricReport
    predictions: list[Prediction]
    truth: np.ndarray  # (B, O) physical


def evaluate(windows: np.ndarray, truth: np.ndarray, model: WorldModel, scaler: StandardScaler,
             S: int = DEFAULT_SAMPLES, seed: int = 0, window_ids: np.ndarray | None = None,
             feature_names: list[str] | None = None) -> Evaluation:
    """Per-window ``predict`` over (B, L, F) physical windows against (B, O) physical truth.

    The persistence baseline repeats each window's last observed target values.
    """
    windows = np.asarray(windows, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64).reshape(len(windows), -1)
    if len(windows) == 0:
        raise ValueError("evaluate needs at least one test window")
    ids = np.arange(len(windows)) if window_ids is None else np.asarray(window_ids)
    preds, lat = [], []
    for i, w in enumerate(windows):
        t0 = time.perf_counter()
        preds.append(predict(w, model, scaler, S, seed, int(ids[i])))
        lat.append(time.perf_counter() - t0)
    yhat = np.stack([p.mean for p in preds])
    persistence = windows[:, -1, list(scaler.target_columns)]
    m = regression_metrics(yhat, truth)
    pm = regression_metrics(persistence, truth)
    skill_r, skill_m = skill_scores(yhat - truth, persistence - truth)
    per_feature = {}
    if truth.shape[1] > 1:
        names = feature_names or [str(c) for c in scaler.target_columns]
        for j, c in enumerate(scaler.target_columns):
            fm = regression_metrics(yhat[:, j], truth[:, j])
            fr, fmae = skill_scores(yhat[:, j] - truth[:, j], persistence[:, j] - truth[:, j])
            per_feature[names[c]] = {**fm, "skill_r": fr, "skill_m": fmae}
    report = MetricReport(
        rmse=m["rmse"], mae=m["mae"], mse=m["mse"], r2=m["r2"], skill_r=skill_r, skill_m=skill_m,
        persistence_rmse=pm["rmse"], persistence_mae=pm["mae"], n_samples=int(truth.size),
        latency_mean_s=float(np.mean(lat)), latency_median_s=float(np.median(lat)),
        per_feature=per_feature,
    )
    return Evaluation(report, preds, truth)

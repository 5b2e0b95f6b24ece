"""Stochastic latent state and the two decoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ModeError

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


@dataclass
class LatentGaussian:
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.logvar)


@dataclass
class TargetPrediction:
    mean: torch.Tensor  # mu_t + tanh(kappa) * skip
    head_mean: torch.Tensor  # mu_t alone
    logvar: torch.Tensor | None  # clamped; None when homoscedastic
    ar_skip: torch.Tensor
    gain: torch.Tensor


def mlp(n_in: int, n_hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.GELU(), nn.Linear(n_hidden, n_out))


def clamp_logvar(lv: torch.Tensor) -> torch.Tensor:
    return torch.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)


def sample(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mu + exp(logvar / 2) * noise``."""
    return g.mu + torch.exp(0.5 * g.logvar) * noise


def kl_diag(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    ratio = torch.exp(q.logvar - p.logvar)
    mahal = (p.mu - q.mu) ** 2 * torch.exp(-p.logvar)
    return 0.5 * (ratio + mahal - 1.0 + (p.logvar - q.logvar)).sum(-1)


def gaussian_nll(y: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample Gaussian NLL summed over the last axis."""
    return 0.5 * (logvar + (y - mean) ** 2 * torch.exp(-logvar) + math.log(2 * math.pi)).sum(-1)


class LatentHeads(nn.Module):
    def __init__(self, d_model: int, n_features: int, d_latent: int, out_dim: int,
                 heteroscedastic: bool = True, ar_hidden: int = 32, kappa_init: float = 0.5):
        super().__init__()
        self.d_latent = d_latent
        self.out_dim = out_dim
        self.heteroscedastic = heteroscedastic
        self.prior_net = mlp(d_model, d_model, 2 * d_latent)
        self.posterior_net = mlp(d_model + n_features, d_model, 2 * d_latent)
        self.dec_full = mlp(d_model + d_latent, d_model, n_features)
        self.dec_target = mlp(d_model + d_latent, d_model, (2 if heteroscedastic else 1) * out_dim)
        self.f_ar = mlp(n_features, ar_hidden, out_dim)
        self.kappa = nn.Parameter(torch.tensor(float(kappa_init)))

    def _split(self, out: torch.Tensor) -> LatentGaussian:
        mu, lv = out.chunk(2, dim=-1)
        return LatentGaussian(mu, lv)

    def prior(self, summary: torch.Tensor) -> LatentGaussian:
        return self._split(self.prior_net(summary))

    def posterior(self, summary: torch.Tensor, y_full: torch.Tensor) -> LatentGaussian:
        # the label enters here, so it must never run outside training
        if not self.training:
            raise ModeError("posterior encoder reads the next-step label and is training-only")
        return self._split(self.posterior_net(torch.cat([summary, y_full], dim=-1)))

    def decode_full(self, summary: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.dec_full(torch.cat([summary, z], dim=-1))

    def ar_skip(self, last_row: torch.Tensor) -> torch.Tensor:
        return self.f_ar(last_row)

    def decode_target(self, summary: torch.Tensor, z: torch.Tensor, last_row: torch.Tensor,
                      skip: torch.Tensor | None = None) -> TargetPrediction:
        out = self.dec_target(torch.cat([summary, z], dim=-1))
        if self.heteroscedastic:
            mu_t, lv = out.chunk(2, dim=-1)
            lv = clamp_logvar(lv)
        else:
            mu_t, lv = out, None
        b = self.ar_skip(last_row) if skip is None else skip
        gain = torch.tanh(self.kappa)
        return TargetPrediction(mu_t + gain * b, mu_t, lv, b, gain)

"""Causal multi-scale SSM encoder producing the last-step summary vector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .kernels import DT_EPS, build_hippo, causal_depthwise_conv, mixture_taps


@dataclass
class BackboneConfig:
    n_features: int
    window: int
    d_model: int = 192
    n_layers: int = 4
    state_size: int = 64
    n_components: int = 4
    kernel_len: int | None = None  # defaults to window
    glu_ratio: float = 1.0
    dropout: float = 0.1
    causal_gate: bool = False
    dt_min: float = 1e-2
    dt_max: float = 1.0

    def __post_init__(self):
        for name in ("n_features", "window", "d_model", "state_size", "n_components"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if not 0 < self.glu_ratio < 2:
            raise ConfigError("glu_ratio must lie in (0, 2)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def L_k(self) -> int:
        return self.kernel_len or self.window

    @property
    def hidden(self) -> int:
        return max(1, round(self.glu_ratio * self.d_model))

    @property
    def se_width(self) -> int:
        return max(4, self.d_model // 8)

    def to_dict(self) -> dict:
        return asdict(self)


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SSMLayer(nn.Module):
    """Mixture SSM conv -> SE gate -> residual+LN -> GLU -> residual+LN."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, N, M = cfg.d_model, cfg.state_size, cfg.n_components
        self.cfg = cfg
        hippo = build_hippo(N, dtype=torch.float64)
        self.register_buffer("A_ct", hippo.A_ct.to(torch.get_default_dtype()), persistent=False)
        self.B = nn.Parameter(hippo.B_ref.to(torch.get_default_dtype()).repeat(d, 1)
                              * (1 + 0.1 * torch.randn(d, N)))
        self.C = nn.Parameter(torch.randn(d, N) / (N * M))
        self.D = nn.Parameter(0.1 * torch.randn(d) / M)
        dts = torch.logspace(math.log10(cfg.dt_min), math.log10(cfg.dt_max), M)
        self.tau = nn.Parameter(torch.tensor([_inv_softplus(float(v) - DT_EPS) for v in dts]))
        self.se_down = nn.Linear(d, cfg.se_width)
        self.se_up = nn.Linear(cfg.se_width, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        h = cfg.hidden
        self.up_a = nn.Linear(d, h)
        self.up_g = nn.Linear(d, h)
        self.down = nn.Linear(h, d)
        self.drop = nn.Dropout(cfg.dropout)
        self._taps_cache: torch.Tensor | None = None

    def taps(self) -> torch.Tensor:
        if self._taps_cache is not None:
            return self._taps_cache
        return mixture_taps(self.A_ct, self.tau, self.B, self.C, self.D, self.cfg.L_k)

    def cache_taps(self, on: bool = True) -> None:
        """Freeze taps for inference; must be refreshed after any parameter change."""
        self._taps_cache = None
        if on:
            with torch.no_grad():
                self._taps_cache = self.taps().detach()

    def gate(self, H: torch.Tensor) -> torch.Tensor:
        """SE gate in (0, 1); shape (B, d), or (B, L, d) under the causal flag."""
        if self.cfg.causal_gate:
            steps = torch.arange(1, H.shape[-2] + 1, dtype=H.dtype).unsqueeze(-1)
            s = torch.cumsum(H, dim=-2) / steps
        else:
            s = H.mean(dim=-2)
        return torch.sigmoid(self.se_up(F.gelu(self.se_down(s))))

    def forward(self, H: torch.Tensor, taps: torch.Tensor | None = None) -> torch.Tensor:
        taps = self.taps() if taps is None else taps
        U = causal_depthwise_conv(H, taps)
        g = self.gate(H)
        if not self.cfg.causal_gate:
            g = g.unsqueeze(-2)
        Y = self.norm1(H + U * g)
        Z = self.down(F.gelu(self.up_a(Y)) * torch.sigmoid(self.up_g(Y)))
        return self.norm2(Y + self.drop(Z))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.W_in = nn.Linear(cfg.n_features + 1, cfg.d_model, bias=False)
        self.layers = nn.ModuleList(SSMLayer(cfg) for _ in range(cfg.n_layers))

    def embed(self, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        if inputs.shape[-1] != self.cfg.n_features or actions.shape[-1] != 1 \
                or inputs.shape[:-1] != actions.shape[:-1]:
            raise ConfigError(
                f"shape mismatch: inputs {tuple(inputs.shape)}, actions {tuple(actions.shape)}, "
                f"F={self.cfg.n_features}"
            )
        return self.W_in(torch.cat([inputs, actions], dim=-1))

    def hidden_states(self, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Full (B, L, d) output of the last layer."""
        H = self.embed(inputs, actions)
        for layer in self.layers:
            H = layer(H)
        return H

    def forward(self, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.hidden_states(inputs, actions)[..., -1, :]

    def cache_taps(self, on: bool = True) -> None:
        for layer in self.layers:
            layer.cache_taps(on)

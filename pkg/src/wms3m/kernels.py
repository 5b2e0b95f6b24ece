"""HiPPO-LegS kernels: continuous operator, bilinear discretization, taps, causal conv.

All functions are differentiable torch code so the taps can be recomputed from
learned parameters on every training step. The convolution is a plain
time-domain sum with left zero padding, which keeps causality exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DT_EPS = 1e-4


@dataclass(frozen=True)
class HippoOperator:
    A_ct: torch.Tensor  # (N, N), lower triangular
    B_ref: torch.Tensor  # (N,)

    @property
    def N(self) -> int:
        return self.A_ct.shape[0]


def build_hippo(N: int, dtype: torch.dtype = torch.float64) -> HippoOperator:
    """Return the HiPPO-LegS operator of state size ``N`` (0-based indexing)."""
    if N < 1:
        raise ValueError(f"state size must be >= 1, got {N}")
    idx = torch.arange(N, dtype=dtype)
    root = torch.sqrt(2.0 * idx + 1.0)
    A = -torch.outer(root, root)
    A = torch.tril(A, diagonal=-1) - torch.diag(idx + 1.0)
    return HippoOperator(A_ct=A, B_ref=root.clone())


def softplus_dt(tau: torch.Tensor | float, eps: float = DT_EPS) -> torch.Tensor:
    """Positive step size ``log(1 + exp(tau)) + eps``, overflow safe for large ``|tau|``."""
    if not torch.is_tensor(tau):
        tau = torch.tensor(tau, dtype=torch.float64)
    # logaddexp(t, 0) = max(t, 0) + log1p(exp(-|t|)), never overflows
    return torch.logaddexp(tau, torch.zeros_like(tau)) + eps


def discretize(A_ct: torch.Tensor, dt: torch.Tensor | float) -> torch.Tensor:
    """Bilinear transform ``(I - dt/2 A)^-1 (I + dt/2 A)``.

    ``A_ct`` is lower triangular, so the inverse is applied with a triangular
    solve. Raises ``FloatingPointError`` if the left factor is singular.
    """
    if isinstance(A_ct, HippoOperator):
        A_ct = A_ct.A_ct
    dt = torch.as_tensor(dt, dtype=A_ct.dtype)
    if torch.any(dt <= 0):
        raise ValueError("dt must be positive")
    eye = torch.eye(A_ct.shape[0], dtype=A_ct.dtype)
    half = 0.5 * dt
    left = eye - half * A_ct
    right = eye + half * A_ct
    diag = torch.diagonal(left)
    if torch.any(diag.detach() == 0):
        raise FloatingPointError("singular (I - dt/2 A_ct) in bilinear discretization")
    return torch.linalg.solve_triangular(left, right, upper=False)


def make_taps(
    A_d: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor,
    L_k: int,
) -> torch.Tensor:
    """Per-channel taps ``k[c, 0] = <C_c, B_c> + D_c``, ``k[c, t] = <C_c, A^t B_c>``.

    ``B`` and ``C`` are (d, N), ``D`` is (d,), ``A_d`` is (N, N). Powers of
    ``A_d`` are never formed; the state is propagated by repeated mat-vecs.
    Returns a (d, L_k) tensor.
    """
    if L_k < 1:
        raise ValueError("L_k must be >= 1")
    taps = [(C * B).sum(-1) + D]
    state = B  # (d, N): row c holds A^t B_c
    for _ in range(1, L_k):
        state = state @ A_d.T
        taps.append((C * state).sum(-1))
    return torch.stack(taps, dim=-1)


def mixture_taps(
    A_ct: torch.Tensor,
    taus: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor,
    L_k: int,
    eps: float = DT_EPS,
) -> torch.Tensor:
    """Sum of component taps, one component per entry of ``taus`` (shared B, C, D)."""
    total = None
    for tau in taus:
        A_d = discretize(A_ct, softplus_dt(tau, eps))
        k = make_taps(A_d, B, C, D, L_k)
        total = k if total is None else total + k
    return total


def causal_depthwise_conv(x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    """``U[t, c] = sum_tau taps[c, tau] * x[t - tau, c]`` with zeros before t=0.

    ``x`` is (L, d) or (B, L, d); ``taps`` is (d, L_k). Output has the shape of ``x``.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    d, L_k = taps.shape
    inp = F.pad(x.transpose(1, 2), (L_k - 1, 0))
    # conv1d is cross-correlation, so flip the taps to get a convolution
    out = F.conv1d(inp, taps.flip(-1).unsqueeze(1), groups=d).transpose(1, 2)
    return out.squeeze(0) if squeeze else out


def geometric_envelope(taps: torch.Tensor, burn_in: int = 0) -> tuple[float, float]:
    """Fit ``log|k[t]| ~ log M0 + t log rho`` for t >= burn_in; returns ``(M0, rho)``.

    Diagnostic only. The upper envelope is taken so every tap satisfies the bound.
    """
    mags = taps.detach().abs().double().flatten()[burn_in:]
    t = torch.arange(burn_in, burn_in + mags.numel(), dtype=torch.float64)
    keep = mags > 0
    if keep.sum() < 2:
        return 0.0, 0.0
    y = torch.log(mags[keep])
    tt = t[keep]
    slope = ((tt - tt.mean()) * (y - y.mean())).sum() / ((tt - tt.mean()) ** 2).sum()
    intercept = (y - slope * tt).max()
    return math.exp(float(intercept)), math.exp(float(slope))

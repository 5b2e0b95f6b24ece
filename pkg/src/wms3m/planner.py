"""PRB planning with MPC/CEM over deterministic prior-mean rollouts, plus what-if scenarios."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import REWARD_ROLES, ActionBounds, StandardScaler
from .errors import BoundsError, ConfigError
from .model import WorldModel
from .runtime import pinned_threads

# +1 rewards the KPI, -1 penalizes it (PRB is scored through the applied action)
REWARD_SIGNS = {"SINR": 1.0, "SE": 1.0, "BLER": -1.0, "Delay": -1.0, "PRB": -1.0, "RSRP": 1.0}
SIGMA_FLOOR = 1e-6


@dataclass
class PlanConfig:
    horizon: int = 8
    population: int = 256
    elite_frac: float = 0.1
    iterations: int = 4
    smooth: float = 0.05
    weights: dict = field(default_factory=lambda: dict.fromkeys(REWARD_ROLES, 1.0))
    sigma_init: float = 0.5
    seed: int = 0
    overwrite_action: bool = False
    bounds: list | None = None  # [lo, hi] physical override

    def __post_init__(self):
        if self.horizon < 1 or self.population < 1 or self.iterations < 1:
            raise ConfigError("horizon, population and iterations must be >= 1")
        if not 0 < self.elite_frac <= 1:
            raise ConfigError("elite_frac must lie in (0, 1]")
        if self.smooth < 0 or self.sigma_init <= 0:
            raise ConfigError("smooth must be >= 0 and sigma_init > 0")
        w = dict.fromkeys(REWARD_ROLES, 1.0)
        for k, v in dict(self.weights).items():
            if k not in REWARD_SIGNS:
                raise ConfigError(f"unknown reward role {k!r}")
            if v < 0:
                raise ConfigError(f"reward weight for {k} must be >= 0")
            w[k] = float(v)
        self.weights = w

    @property
    def n_elite(self) -> int:
        return max(1, math.floor(self.elite_frac * self.population))

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def step_reward(frame_std, action_std, prev_action_std, weights: Mapping[str, float], smooth: float,
                reward_indices: Mapping[str, int]):
    """Signed weighted KPI score minus PRB cost minus smoothness penalty (standardized space).

    Works on scalars, numpy arrays or torch tensors with frames of shape (..., F).
    Roles absent from ``reward_indices`` contribute nothing.
    """
    r = 0.0
    for role in ("SINR", "SE", "RSRP", "BLER", "Delay"):
        if role in reward_indices and weights.get(role, 0.0) != 0.0:
            r = r + REWARD_SIGNS[role] * weights[role] * frame_std[..., reward_indices[role]]
    r = r - weights.get("PRB", 0.0) * action_std
    return r - smooth * abs(action_std - prev_action_std)


@dataclass
class RolloutResult:
    totals: np.ndarray  # (P,)
    rewards: np.ndarray  # (P, H)
    frames: np.ndarray  # (P, H, F) standardized


@pinned_threads()
@torch.no_grad()
def rollout(window_std: np.ndarray, action_hist_std: np.ndarray, candidates: np.ndarray, model: WorldModel,
            weights: Mapping[str, float], smooth: float, reward_indices: Mapping[str, int],
            overwrite_action: bool = False) -> RolloutResult:
    """Score (P, H) standardized action paths by rolling the model with ``z`` = prior mean.

    The window advances with the decoded frame (its PRB column left as decoded unless
    ``overwrite_action``) and the action history advances with the candidate action.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    P, H = cand.shape
    X = model.tensor(window_std).unsqueeze(0).expand(P, -1, -1).clone()
    A = model.tensor(np.asarray(action_hist_std).reshape(-1, 1)).unsqueeze(0).expand(P, -1, -1).clone()
    prev = np.full(P, float(np.asarray(action_hist_std).reshape(-1)[-1]))
    rewards = np.empty((P, H))
    frames = np.empty((P, H, X.shape[-1]))
    ia = model.cfg.action_index
    for h in range(H):
        summary = model.encode(X, A)
        frame = model.heads.decode_full(summary, model.heads.prior(summary).mu)
        a_t = cand[:, h]
        if overwrite_action:
            frame = frame.clone()
            frame[:, ia] = model.tensor(a_t)
        f_np = frame.double().numpy()
        frames[:, h] = f_np
        rewards[:, h] = step_reward(f_np, a_t, prev, weights, smooth, reward_indices)
        prev = a_t
        X = torch.cat([X[:, 1:], frame.unsqueeze(1)], dim=1)
        A = torch.cat([A[:, 1:], model.tensor(a_t).reshape(P, 1, 1)], dim=1)
    return RolloutResult(rewards.sum(axis=1), rewards, frames)


@dataclass
class CemResult:
    mu: np.ndarray
    sigma: np.ndarray
    history: list[dict]
    n_elite: int


def cem_search(score: Callable[[np.ndarray], np.ndarray], mu0: np.ndarray, sigma0: np.ndarray | float,
               lo: float, hi: float, population: int, n_elite: int, iterations: int,
               rng: np.random.Generator) -> CemResult:
    """Cross-entropy search over clamped Gaussian action paths.

    ``score`` maps (P, H) candidates to (P,) rewards. Elites are the top ``n_elite``
    by reward with ties broken by sample index.
    """
    if not lo < hi:
        raise BoundsError(f"degenerate bounds [{lo}, {hi}]")
    mu = np.asarray(mu0, dtype=np.float64).copy()
    sigma = np.broadcast_to(np.asarray(sigma0, dtype=np.float64), mu.shape).copy()
    history = []
    for it in range(iterations):
        samples = mu + sigma * rng.standard_normal((population, mu.size))
        samples = np.clip(samples, lo, hi)
        R = np.asarray(score(samples), dtype=np.float64)
        order = np.argsort(-R, kind="stable")
        elite = samples[order[:n_elite]]
        mu = np.clip(elite.mean(axis=0), lo, hi)
        sigma = elite.std(axis=0) + SIGMA_FLOOR
        history.append({
            "iteration": it + 1,
            "elite_mean_reward": float(R[order[:n_elite]].mean()),
            "best_reward": float(R[order[0]]),
            "median_reward": float(np.median(R)),
            "mu": mu.tolist(),
            "sigma": sigma.tolist(),
        })
    return CemResult(mu, sigma, history, n_elite)


@dataclass
class PlanResult:
    action: float  # next PRB, physical units
    action_std: float
    mu: list
    sigma: list
    n_elite: int
    history: list
    path: list  # final mean path, physical units
    step_rewards: list
    total_reward: float
    bounds: dict

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_bounds(bounds: ActionBounds, config: PlanConfig, scaler: StandardScaler,
                   action_index: int) -> ActionBounds:
    if config.bounds is not None:
        lo, hi = config.bounds
        return ActionBounds.from_physical(float(lo), float(hi), scaler, action_index)
    return bounds


def cem_plan(window: np.ndarray, model: WorldModel, scaler: StandardScaler, bounds: ActionBounds,
             config: PlanConfig, reward_indices: Mapping[str, int], *, standardized: bool = False,
             action_hist_std: np.ndarray | None = None, seed: int | None = None) -> PlanResult:
    """Plan the next PRB for one window (physical units unless ``standardized``)."""
    ia = model.cfg.action_index
    bounds = resolve_bounds(bounds, config, scaler, ia)
    if not bounds.lo_std < bounds.hi_std:
        raise BoundsError("degenerate action bounds")
    x = np.asarray(window, dtype=np.float64)
    x_std = x if standardized else scaler.transform(x)
    a_hist = x_std[:, ia].copy() if action_hist_std is None else np.asarray(action_hist_std, dtype=np.float64)
    H = config.horizon
    rng = np.random.default_rng(config.seed if seed is None else seed)

    def score(c):
        return rollout(x_std, a_hist, c, model, config.weights, config.smooth, reward_indices,
                       config.overwrite_action).totals

    res = cem_search(score, np.full(H, a_hist[-1]), config.sigma_init, bounds.lo_std, bounds.hi_std,
                     config.population, config.n_elite, config.iterations, rng)
    final = rollout(x_std, a_hist, res.mu[None], model, config.weights, config.smooth, reward_indices,
                    config.overwrite_action)
    path = scaler.inverse_column(ia, res.mu)
    return PlanResult(
        action=float(path[0]), action_std=float(res.mu[0]), mu=res.mu.tolist(), sigma=res.sigma.tolist(),
        n_elite=res.n_elite, history=res.history, path=path.tolist(),
        step_rewards=final.rewards[0].tolist(), total_reward=float(final.totals[0]), bounds=bounds.to_dict(),
    )


# --- what-if scenarios -----------------------------------------------------------------

SCENARIOS = {
    "hold": "Hold (last PRB)",
    "step_up": "Step +20%",
    "step_down": "Step -20%",
    "ramp_high": "Ramp -> high",
    "cem": "CEM (receding)",
}
_ALIASES = {"step+20%": "step_up", "step-20%": "step_down", "ramp->high": "ramp_high",
            "ramp_to_high": "ramp_high", "cem-receding": "cem", "cem_receding": "cem"}


@dataclass
class ScenarioResult:
    name: str
    label: str
    actions: list  # physical PRBs, length H
    rewards: list
    total: float
    kpis: dict  # feature name -> per-step physical forecast means
    averages: dict

    def to_dict(self) -> dict:
        return asdict(self)


def scripted_path(name: str, last_prb: float, bounds: ActionBounds, H: int) -> np.ndarray:
    """Physical PRB path for a named script."""
    if name == "hold":
        return np.full(H, float(last_prb))
    if name in ("step_up", "step_down"):
        f = 1.2 if name == "step_up" else 0.8
        return np.full(H, float(np.clip(last_prb * f, bounds.lo, bounds.hi)))
    if name == "ramp_high":
        h = np.arange(1, H + 1)
        return np.clip(last_prb + (bounds.hi - last_prb) * h / H, bounds.lo, bounds.hi)
    raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")


def _canonical(name: str) -> str:
    key = name.strip().lower().replace(" ", "")
    key = _ALIASES.get(key, key)
    if key not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return key


@torch.no_grad()
def receding_cem_path(window_std: np.ndarray, model: WorldModel, scaler: StandardScaler, bounds: ActionBounds,
                      config: PlanConfig, reward_indices: Mapping[str, int]) -> np.ndarray:
    """Replan at each step on the imagined window and apply the first action."""
    ia = model.cfg.action_index
    X = np.asarray(window_std, dtype=np.float64).copy()
    A = X[:, ia].copy()
    out = []
    for h in range(config.horizon):
        res = cem_plan(X, model, scaler, bounds, config, reward_indices, standardized=True,
                       action_hist_std=A, seed=config.seed + 7919 * h)
        a = res.action_std
        out.append(a)
        step = rollout(X, A, np.array([[a]]), model, config.weights, config.smooth, reward_indices,
                       config.overwrite_action)
        X = np.vstack([X[1:], step.frames[0, 0]])
        A = np.append(A[1:], a)
    return scaler.inverse_column(ia, np.array(out))


def run_scenarios(window: np.ndarray, model: WorldModel, scaler: StandardScaler, bounds: ActionBounds,
                  config: PlanConfig, reward_indices: Mapping[str, int],
                  scenarios: Sequence[str | Mapping] = tuple(SCENARIOS),
                  feature_names: Sequence[str] | None = None) -> list[ScenarioResult]:
    """Evaluate PRB control paths from one fixed context window through the same rollout."""
    ia = model.cfg.action_index
    bounds = resolve_bounds(bounds, config, scaler, ia)
    x = np.asarray(window, dtype=np.float64)
    x_std = scaler.transform(x)
    a_hist = x_std[:, ia].copy()
    last = float(x[-1, ia])
    H = config.horizon
    names = list(feature_names) if feature_names else [f"f{j}" for j in range(x.shape[1])]
    results = []
    for sc in scenarios:
        if isinstance(sc, Mapping):
            name, label = str(sc["name"]), str(sc.get("label", sc["name"]))
            path = np.asarray(sc["path"], dtype=np.float64)
            if path.shape != (H,):
                raise ConfigError(f"custom scenario {name!r} needs {H} actions")
        else:
            name = _canonical(sc)
            label = SCENARIOS[name]
            if name == "cem":
                path = receding_cem_path(x_std, model, scaler, bounds, config, reward_indices)
            else:
                path = scripted_path(name, last, bounds, H)
        path_std = scaler.transform_column(ia, path)
        res = rollout(x_std, a_hist, path_std[None], model, config.weights, config.smooth, reward_indices,
                      config.overwrite_action)
        phys = scaler.inverse_transform(res.frames[0])  # (H, F)
        kpis = {names[j]: phys[:, j].tolist() for j in range(phys.shape[1])}
        results.append(ScenarioResult(
            name=name, label=label, actions=path.tolist(), rewards=res.rewards[0].tolist(),
            total=float(res.totals[0]), kpis=kpis,
            averages={k: float(np.mean(v)) for k, v in kpis.items()},
        ))
    return results

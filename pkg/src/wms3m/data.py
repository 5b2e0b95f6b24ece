"""KPI trace ingestion, chronological splits, train-only scaling, windows and PRB bounds."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import BoundsError, ConfigError, EmptyTraceError, MissingArtifactError, SchemaError, SizingError

REWARD_ROLES = ("SINR", "SE", "BLER", "Delay", "PRB", "RSRP")
EPS_FLOOR = 1e-6


@dataclass(frozen=True)
class Schema:
    """Maps trace roles onto CSV column names."""

    target: str
    action: str
    timestamp: str = "ts"
    features: tuple[str, ...] | None = None
    reward: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        d = dict(d)
        if "target" not in d or "action" not in d:
            raise SchemaError("schema needs 'target' and 'action' column names")
        feats = d.get("features")
        return cls(
            target=d["target"],
            action=d["action"],
            timestamp=d.get("timestamp", "ts"),
            features=tuple(feats) if feats else None,
            reward=dict(d.get("reward", {})),
        )


@dataclass(frozen=True, eq=False)
class KpiTrace:
    timestamps: np.ndarray  # (T,) int64, strictly increasing
    values: np.ndarray  # (T, F) float64, physical units
    feature_names: tuple[str, ...]
    action_index: int
    target_index: int
    reward_indices: Mapping[str, int] = field(default_factory=dict)
    dropped_count: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != ts.shape[0]:
            raise ConfigError("values must be (T, F) with one timestamp per row")
        if vals.shape[1] != len(self.feature_names):
            raise ConfigError("feature_names length does not match values")
        if ts.size and np.any(np.diff(ts) <= 0):
            raise ConfigError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("trace values must be finite")
        F = vals.shape[1]
        for name, idx in [("action", self.action_index), ("target", self.target_index)]:
            if not 0 <= idx < F:
                raise ConfigError(f"{name} index {idx} out of range for F={F}")
        for role, idx in self.reward_indices.items():
            if role not in REWARD_ROLES:
                raise ConfigError(f"unknown reward role {role!r}")
            if not 0 <= idx < F:
                raise ConfigError(f"reward index for {role} out of range")
        roles = list(self.reward_indices.values())
        if len(set(roles)) != len(roles):
            raise ConfigError("reward roles must map to distinct columns")
        ts.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "reward_indices", dict(self.reward_indices))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def F(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "KpiTrace":
        return KpiTrace(
            self.timestamps, values, self.feature_names, self.action_index,
            self.target_index, self.reward_indices, self.dropped_count,
        )


def ingest_csv(path: str | Path, schema: Schema | Mapping) -> KpiTrace:
    """Read a KPI CSV, keep schema columns, drop rows holding non-finite values."""
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"trace not found: {path}")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise EmptyTraceError(f"{path} is empty") from None
    if schema.timestamp not in df.columns:
        raise SchemaError(f"missing column {schema.timestamp!r}")
    if schema.features is not None:
        features = list(schema.features)
    else:
        features = [c for c in df.columns if c != schema.timestamp]
    required = list(features) + [schema.target, schema.action] + list(schema.reward.values())
    for col in required:
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r}")
    for col in (schema.target, schema.action, *schema.reward.values()):
        if col not in features:
            raise SchemaError(f"column {col!r} is not among the model features")
    if len(df) == 0:
        raise EmptyTraceError(f"{path} has a header but no rows")

    vals = df[features].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    ts = pd.to_numeric(df[schema.timestamp], errors="coerce").to_numpy(dtype=np.float64)
    ok = np.isfinite(vals).all(axis=1) & np.isfinite(ts)
    dropped = int((~ok).sum())
    vals, ts = vals[ok], ts[ok]
    if vals.shape[0] == 0:
        raise EmptyTraceError(f"{path}: no finite rows ({dropped} dropped)")
    if np.any(ts != np.round(ts)):
        raise ConfigError("timestamps must be integer period indices")
    reward = {role: features.index(col) for role, col in schema.reward.items()}
    reward.setdefault("PRB", features.index(schema.action))
    return KpiTrace(
        timestamps=ts.astype(np.int64),
        values=vals,
        feature_names=tuple(features),
        action_index=features.index(schema.action),
        target_index=features.index(schema.target),
        reward_indices=reward,
        dropped_count=dropped,
    )


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def range(self, which: str) -> tuple[int, int]:
        return {"train": self.train, "val": self.val, "test": self.test}[which]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitPlan":
        return cls(*(tuple(int(v) for v in d[k]) for k in ("train", "val", "test")))


def make_split(T: int | KpiTrace, fractions: Sequence[float] = (0.7, 0.1, 0.2), L: int = 1) -> SplitPlan:
    """Contiguous train < val < test ranges at ``floor(T * cumulative fraction)``."""
    if isinstance(T, KpiTrace):
        T = T.T
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise ConfigError(f"fractions must be three positive reals summing to 1, got {fractions}")
    # tolerance guards against 0.7 + 0.1 = 0.7999999999999999
    b1 = math.floor(T * fr[0] + 1e-9)
    b2 = math.floor(T * (fr[0] + fr[1]) + 1e-9)
    plan = SplitPlan((0, b1), (b1, b2), (b2, T))
    smallest = min(b1, b2 - b1, T - b2)
    if smallest < L + 1:
        need = math.ceil((L + 1) / min(fr))
        raise SizingError(
            f"split too small for a window of L={L}: smallest split has {smallest} rows, "
            f"need >= {L + 1}; use T >= {need}"
        )
    return plan


@dataclass(frozen=True, eq=False)
class StandardScaler:
    mean: np.ndarray
    std: np.ndarray
    target_mean: np.ndarray  # length O
    target_std: np.ndarray
    target_columns: tuple[int, ...]
    epsilon_floor: float = EPS_FLOOR

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def transform_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_target(self, y):
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean

    def transform_column(self, i: int, v):
        return (np.asarray(v, dtype=np.float64) - self.mean[i]) / self.std[i]

    def inverse_column(self, i: int, v):
        return np.asarray(v, dtype=np.float64) * self.std[i] + self.mean[i]

    @property
    def O(self) -> int:
        return len(self.target_columns)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "target_columns": list(self.target_columns),
            "epsilon_floor": self.epsilon_floor,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StandardScaler":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            target_mean=np.asarray(d["target_mean"], dtype=np.float64),
            target_std=np.asarray(d["target_std"], dtype=np.float64),
            target_columns=tuple(d["target_columns"]),
            epsilon_floor=float(d.get("epsilon_floor", EPS_FLOOR)),
        )


def fit_scaler(trace: KpiTrace, plan: SplitPlan, target_mode: int | str = 1,
               epsilon_floor: float = EPS_FLOOR) -> StandardScaler:
    """Population mean/std over train rows only; std floored at ``epsilon_floor``."""
    s, e = plan.train
    if e <= s:
        raise SizingError("train range is empty")
    rows = trace.values[s:e]
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0, ddof=0), epsilon_floor)
    cols = _target_columns(trace, target_mode)
    return StandardScaler(mean, std, mean[list(cols)].copy(), std[list(cols)].copy(), cols, epsilon_floor)


def _target_columns(trace: KpiTrace, target_mode) -> tuple[int, ...]:
    if target_mode in (1, "univariate", "1"):
        return (trace.target_index,)
    if target_mode in ("multivariate", "F", "full") or target_mode == trace.F:
        return tuple(range(trace.F))
    raise ConfigError(f"target_mode must be 1 or F={trace.F}, got {target_mode!r}")


@dataclass(frozen=True, eq=False)
class WindowBatch:
    inputs: np.ndarray  # (B, L, F) standardized
    actions: np.ndarray  # (B, L, 1) standardized PRB history
    targets_full: np.ndarray  # (B, F)
    targets: np.ndarray  # (B, O)
    anchors: np.ndarray  # (B,) row index of the last input row
    future_full: np.ndarray | None = None  # (B, K, F) rows anchor+1 .. anchor+K
    future_actions: np.ndarray | None = None  # (B, K) standardized PRB at those rows
    future_mask: np.ndarray | None = None  # (B,) all K future rows inside the split

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return WindowBatch(
            self.inputs[idx], self.actions[idx], self.targets_full[idx], self.targets[idx],
            self.anchors[idx], pick(self.future_full), pick(self.future_actions), pick(self.future_mask),
        )


def window_anchors(split: tuple[int, int], L: int) -> np.ndarray:
    s, e = split
    if L < 1 or L >= e - s:
        raise SizingError(f"window length L={L} needs a split of at least {L + 1} rows, got {e - s}")
    return np.arange(s + L - 1, e - 1)


def build_windows(trace: KpiTrace, plan: SplitPlan, scaler: StandardScaler, L: int,
                  split: str = "train", rollout_steps: int = 0) -> WindowBatch:
    """All stride-1 windows whose inputs and next-step target lie inside ``split``."""
    s, e = plan.range(split)
    anchors = window_anchors((s, e), L)
    z = scaler.transform(trace.values[s:e])  # rows of this split only
    rel = anchors - s
    offs = np.arange(-L + 1, 1)
    inputs = z[rel[:, None] + offs[None, :]]
    actions = inputs[:, :, trace.action_index:trace.action_index + 1].copy()
    targets_full = z[rel + 1]
    targets = scaler.transform_target(trace.values[s:e][rel + 1][:, list(scaler.target_columns)])
    fut = fut_a = mask = None
    if rollout_steps > 0:
        K = rollout_steps
        n = e - s
        mask = rel + K <= n - 1
        idx = np.clip(rel[:, None] + np.arange(1, K + 1)[None, :], 0, n - 1)
        fut = z[idx]
        fut_a = fut[:, :, trace.action_index].copy()
    return WindowBatch(inputs, actions, targets_full, targets, anchors, fut, fut_a, mask)


@dataclass(frozen=True)
class ActionBounds:
    lo: float
    hi: float
    lo_std: float
    hi_std: float

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "lo_std": self.lo_std, "hi_std": self.hi_std}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActionBounds":
        return cls(float(d["lo"]), float(d["hi"]), float(d["lo_std"]), float(d["hi_std"]))

    @classmethod
    def from_physical(cls, lo: float, hi: float, scaler: StandardScaler, action_index: int) -> "ActionBounds":
        if not lo < hi:
            raise BoundsError(f"action bounds must satisfy lo < hi, got [{lo}, {hi}]")
        return cls(float(lo), float(hi),
                   float(scaler.transform_column(action_index, lo)),
                   float(scaler.transform_column(action_index, hi)))


def compute_action_bounds(trace: KpiTrace, plan: SplitPlan, scaler: StandardScaler,
                          q: tuple[float, float] = (5.0, 95.0)) -> ActionBounds:
    """5th/95th percentile (linear interpolation) of train-split PRBs."""
    s, e = plan.train
    if e <= s:
        raise SizingError("train range is empty")
    prb = trace.values[s:e, trace.action_index]
    lo, hi = np.percentile(prb, q, method="linear")
    if not lo < hi:
        raise BoundsError("PRB percentiles coincide: the training trace is constant in PRB")
    return ActionBounds.from_physical(lo, hi, scaler, trace.action_index)


def save_sidecar(path: str | Path, scaler: StandardScaler, bounds: ActionBounds | None,
                 extra: Mapping | None = None) -> str:
    """Write scaler + bounds JSON (repr floats round-trip exactly); returns its text."""
    doc = {"format": "wms3m-scaler", "version": 1, "scaler": scaler.to_dict(),
           "bounds": bounds.to_dict() if bounds else None}
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=2, sort_keys=True)
    Path(path).write_text(text)
    return text


def load_sidecar(path: str | Path) -> tuple[StandardScaler, ActionBounds | None, dict]:
    doc = json.loads(Path(path).read_text())
    bounds = ActionBounds.from_dict(doc["bounds"]) if doc.get("bounds") else None
    return StandardScaler.from_dict(doc["scaler"]), bounds, doc


# --- synthetic controlled traces -------------------------------------------------


def _rotation(radius: float, period: float) -> np.ndarray:
    th = 2 * math.pi / period
    return radius * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])


@dataclass
class SyntheticConfig:
    """Linear-Gaussian plant ``x' = A x + B (u - u_ref) + w``, ``y = C x + offset + v``."""

    A: list = field(default_factory=lambda: _default_A().tolist())
    B: list = field(default_factory=lambda: [0.02, 0.0, 0.015, -0.01])
    C: list = field(default_factory=lambda: [[2.0, 0.0, 1.0, 0.0],
                                             [0.0, 1.5, 0.0, 1.0],
                                             [1.0, 1.0, 0.0, 0.5]])
    obs_offset: list = field(default_factory=lambda: [-90.0, 15.0, 5.0])
    x0: list | None = None
    process_noise: float = 0.1
    obs_noise: float = 0.05
    u_ref: float = 50.0
    excitation: str = "steps"  # steps | constant | sine
    u_low: float = 20.0
    u_high: float = 80.0
    hold_min: int = 3
    hold_max: int = 12
    feature_names: list = field(default_factory=lambda: ["rsrp", "sinr", "bler", "prb"])

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "SyntheticConfig":
        return cls(**dict(d or {}))


def _default_A() -> np.ndarray:
    A = np.zeros((4, 4))
    A[:2, :2] = _rotation(0.95, 10.0)
    A[2:, 2:] = _rotation(0.9, 25.0)
    return A


def generate_synthetic_trace(seed: int, T: int, config: SyntheticConfig | Mapping | None = None) -> KpiTrace:
    """Simulate a controlled linear-Gaussian trace; features are ``[y_1..y_p, prb]``."""
    cfg = config if isinstance(config, SyntheticConfig) else SyntheticConfig.from_dict(config)
    if T < 10:
        raise ConfigError("synthetic traces need T >= 10")
    A = np.atleast_2d(np.asarray(cfg.A, dtype=np.float64))
    n = A.shape[0]
    B = np.asarray(cfg.B, dtype=np.float64).reshape(n)
    C = np.atleast_2d(np.asarray(cfg.C, dtype=np.float64))
    p = C.shape[0]
    if C.shape[1] != n or A.shape != (n, n):
        raise ConfigError("inconsistent A/B/C shapes")
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1.0:
        raise ConfigError(f"unstable A: spectral radius {rho:.4g} >= 1")
    offset = np.asarray(cfg.obs_offset if cfg.obs_offset is not None else np.zeros(p), dtype=np.float64)
    names = list(cfg.feature_names)
    if len(names) != p + 1:
        raise ConfigError(f"feature_names must have {p + 1} entries (observations + prb)")

    rng = np.random.default_rng(seed)
    u = _excitation(rng, T, cfg)
    x = np.zeros(n) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64).reshape(n)
    ys = np.empty((T, p))
    w = rng.standard_normal((T, n)) * cfg.process_noise
    v = rng.standard_normal((T, p)) * cfg.obs_noise
    for t in range(T):
        ys[t] = C @ x + offset + v[t]
        x = A @ x + B * (u[t] - cfg.u_ref) + w[t]
    values = np.column_stack([ys, u])
    reward = {}
    for role in REWARD_ROLES:
        if role.lower() in names:
            reward[role] = names.index(role.lower())
    return KpiTrace(np.arange(T, dtype=np.int64), values, tuple(names), action_index=p,
                    target_index=0, reward_indices=reward)


def _excitation(rng: np.random.Generator, T: int, cfg: SyntheticConfig) -> np.ndarray:
    if cfg.excitation == "constant":
        return np.full(T, float(cfg.u_ref))
    if cfg.excitation == "sine":
        t = np.arange(T)
        mid, amp = (cfg.u_high + cfg.u_low) / 2, (cfg.u_high - cfg.u_low) / 2
        return mid + amp * np.sin(2 * math.pi * t / 50.0)
    if cfg.excitation == "steps":
        out = np.empty(T)
        t = 0
        while t < T:
            hold = int(rng.integers(cfg.hold_min, cfg.hold_max + 1))
            out[t:t + hold] = np.round(rng.uniform(cfg.u_low, cfg.u_high))
            t += hold
        return out
    raise ConfigError(f"unknown excitation {cfg.excitation!r}")


def trace_to_frame(trace: KpiTrace, timestamp: str = "ts") -> pd.DataFrame:
    df = pd.DataFrame(trace.values, columns=list(trace.feature_names))
    df.insert(0, timestamp, trace.timestamps)
    return df

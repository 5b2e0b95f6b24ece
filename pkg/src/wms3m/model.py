"""The full world model (encoder + latent heads) and its checkpoint format."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, MissingArtifactError, VersionMismatchError
from .latent import LatentGaussian, LatentHeads

CHECKPOINT_FORMAT = "wms3m-checkpoint"
CHECKPOINT_VERSION = 1
PAPER_PARAM_COUNT = 477_802

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    # filled from the data
    n_features: int = 4
    window: int = 16
    out_dim: int = 1
    target_index: int = 0
    action_index: int = 0
    # architecture
    d_model: int = 192
    n_layers: int = 4
    state_size: int = 64
    n_components: int = 4
    kernel_len: int | None = None
    glu_ratio: float = 1.0
    dropout: float = 0.1
    causal_gate: bool = False
    dt_min: float = 1e-2
    dt_max: float = 1.0
    d_latent: int = 48
    heteroscedastic: bool = True
    ar_hidden: int = 32
    kappa_init: float = 0.5
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        if self.out_dim not in (1, self.n_features):
            raise ConfigError(f"out_dim must be 1 or F={self.n_features}")
        for name in ("target_index", "action_index"):
            if not 0 <= getattr(self, name) < self.n_features:
                raise ConfigError(f"{name} out of range")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.d_latent < 1:
            raise ConfigError("d_latent must be positive")
        self.backbone_config()  # validates shared fields

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_features=self.n_features, window=self.window, d_model=self.d_model,
            n_layers=self.n_layers, state_size=self.state_size, n_components=self.n_components,
            kernel_len=self.kernel_len, glu_ratio=self.glu_ratio, dropout=self.dropout,
            causal_gate=self.causal_gate, dt_min=self.dt_min, dt_max=self.dt_max,
        )

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


class WorldModel(nn.Module):
    """Encoder ``d = f(X, A)``, prior/posterior over ``z``, full and target decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        prev = torch.get_default_dtype()
        torch.set_default_dtype(cfg.torch_dtype)
        try:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.init_seed)
                self.backbone = Backbone(cfg.backbone_config())
                self.heads = LatentHeads(cfg.d_model, cfg.n_features, cfg.d_latent, cfg.out_dim,
                                         cfg.heteroscedastic, cfg.ar_hidden, cfg.kappa_init)
        finally:
            torch.set_default_dtype(prev)

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    def train(self, mode: bool = True):
        if mode:
            self.backbone.cache_taps(False)
        return super().train(mode)

    def freeze(self) -> "WorldModel":
        """Eval mode, no grads, taps cached."""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.backbone.cache_taps(True)
        return self

    def tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def encode(self, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.backbone(inputs, actions)

    def prior(self, summary: torch.Tensor) -> LatentGaussian:
        return self.heads.prior(summary)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameters grouped by role (W_in, ssm, se, norm, glu, prior, posterior, ...)."""
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            groups.setdefault(_group_of(name), []).append((name, p))
        return groups


def _group_of(name: str) -> str:
    if name.startswith("backbone.W_in"):
        return "embed"
    if name.startswith("backbone.layers"):
        leaf = name.split(".")[3]
        if leaf in ("B", "C", "D", "tau"):
            return "ssm"
        if leaf.startswith("se_"):
            return "se_gate"
        if leaf.startswith("norm"):
            return "layer_norm"
        return "glu"
    part = name.split(".")[1]
    return {"prior_net": "prior", "posterior_net": "posterior", "dec_full": "dec_full",
            "dec_target": "dec_target", "f_ar": "ar_skip", "kappa": "ar_skip"}[part]


# --- checkpoints ---------------------------------------------------------------


def _encode_tensor(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {"shape": list(arr.shape), "dtype": str(arr.dtype.name),
            "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")}


def _decode_tensor(d: Mapping) -> torch.Tensor:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=np.dtype(d["dtype"]).newbyteorder("<"))
    return torch.from_numpy(arr.reshape(d["shape"]).astype(np.dtype(d["dtype"])).copy())


def state_to_json(model: WorldModel, meta: Mapping | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "meta": dict(meta or {}),
        "params": {k: _encode_tensor(v) for k, v in model.state_dict().items()},
    }
    return json.dumps(doc, sort_keys=True)


def save_checkpoint(path: str | Path, model: WorldModel, meta: Mapping | None = None) -> str:
    """Write a JSON checkpoint; tensors are base64 little-endian. Returns the sha256."""
    text = state_to_json(model, meta)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[WorldModel, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
            f"found {doc.get('format')} v{doc.get('version')}"
        )
    model = WorldModel(ModelConfig.from_dict(doc["model_config"]))
    state = {k: _decode_tensor(v) for k, v in doc["params"].items()}
    model.load_state_dict(state)
    return model, doc.get("meta", {})


def load_state(model: WorldModel, state: Mapping[str, torch.Tensor]) -> None:
    model.load_state_dict({k: v.clone() for k, v in state.items()})


def snapshot(model: WorldModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}

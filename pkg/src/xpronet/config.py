from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .corpus import ConfigError

LABEL_MODES = ("all", "oracle")
DECODE_MODES = ("greedy", "beam")


@dataclass
class RunConfig:
    """Every hyperparameter of a run. Keys are the JSON config keys."""

    # prototype memory
    n_labels: int = 14
    n_prototypes: int = 20
    gamma: int = 15
    proto_heads: int = 2
    feature_dim: int = 32
    proto_proj_dim: int = 32
    query_dim: int = 32
    global_visual_dim: int = 16
    global_text_dim: int = 16
    normalizer: str = "softmax"
    inference_label_mode: str = "all"
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    # losses
    theta: float = 1.5
    alpha: float = 0.4
    lambda_visual: float = 1.0
    delta_textual: float = 0.1
    clamp_positive: bool = False
    # transformer
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    max_len: int = 48
    dropout: float = 0.1
    # optimisation
    batch_size: int = 16
    epochs: int = 30
    lr_prototype: float = 2e-3
    lr_model: float = 1e-3
    lr_decay: float = 0.8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # ablations
    disable_pi: bool = False
    disable_imlcs: bool = False
    disable_cmpnet: bool = False
    # decoding / evaluation
    beam_size: int = 3
    decode_mode: str = "beam"
    length_normalize: bool = True
    val_decode: str = "greedy"
    jobs: int = 1
    # paths
    data_dir: str = ""
    run_dir: str = ""
    pm_path: str = ""

    def validate(self) -> "RunConfig":
        problems = []
        positive = (
            "n_labels", "n_prototypes", "gamma", "proto_heads", "feature_dim", "proto_proj_dim", "query_dim",
            "global_visual_dim", "global_text_dim", "layers", "heads", "ffn_dim", "max_len", "batch_size",
            "beam_size", "jobs", "kmeans_max_iter",
        )
        for name in positive:
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.theta <= 0:
            problems.append("theta must be > 0")
        if not 0 <= self.alpha < 1:
            problems.append("alpha must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must lie in [0, 1)")
        if self.query_dim % self.proto_heads:
            problems.append("query_dim must be divisible by proto_heads")
        if self.feature_dim % self.heads:
            problems.append("feature_dim must be divisible by heads")
        if self.lr_prototype <= 0 or self.lr_model <= 0 or self.lr_decay <= 0:
            problems.append("learning rates and lr_decay must be > 0")
        if self.normalizer not in ("softmax", "literal-linear"):
            problems.append("normalizer must be 'softmax' or 'literal-linear'")
        if self.inference_label_mode not in LABEL_MODES:
            problems.append(f"inference_label_mode must be one of {LABEL_MODES}")
        for name in ("decode_mode", "val_decode"):
            if getattr(self, name) not in DECODE_MODES:
                problems.append(f"{name} must be one of {DECODE_MODES}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def proto_dim(self) -> int:
        return self.global_visual_dim + self.global_text_dim

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, value in raw.items():
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            values[key] = value
        return cls(**values).validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        """Digest of everything except paths and parallelism."""
        core = {k: v for k, v in self.to_dict().items() if k not in ("data_dir", "run_dir", "pm_path", "jobs")}
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()

    def ablation_flags(self) -> dict:
        return {"disable_pi": self.disable_pi, "disable_imlcs": self.disable_imlcs, "disable_cmpnet": self.disable_cmpnet}

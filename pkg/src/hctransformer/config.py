"""Dataclass configs and the JSON run document that ties them together."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class AblationFlags:
    no_hm_encoder: bool = False
    no_ctx_encoder: bool = False
    no_decoder: bool = False
    no_prototypes: bool = False
    no_masking: bool = False

    @classmethod
    def parse(cls, spec: str) -> "AblationFlags":
        flags = cls()
        for item in filter(None, (s.strip() for s in spec.split(","))):
            if not hasattr(flags, item):
                raise ConfigError(f"unknown ablation flag {item!r}")
            setattr(flags, item, True)
        return flags


@dataclass
class ModelConfig:
    M: int = 5
    D: int = 32
    D_v: int = 16
    L_e: int = 2
    L_d: int = 2
    K: int | str = "2*ncls"
    mask_threshold: float = 0.5
    ablation: AblationFlags = field(default_factory=AblationFlags)
    trn_subsets: int = 3
    eval_seed: int = 0
    separate_proto_params: bool = False
    decoder_self_attn: bool = False
    keep_fraction: float = 0.5
    ctx_clf_epochs: int = 5
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    # 0 keeps the prototypes fixed after stage 1
    prototype_refresh_epochs: int = 0
    # decoder residual branches start at zero, so stage 2 begins from Z_hc = Z_hm
    zero_init_decoder: bool = True
    # stage-2 video classifier starts from the stage-1 human classifier
    warm_start_classifier: bool = True

    def num_prototypes(self, n_cls: int) -> int:
        if isinstance(self.K, str):
            if self.K.replace(" ", "") != "2*ncls":
                raise ConfigError(f"K must be an integer or '2*ncls', got {self.K!r}")
            return 2 * n_cls
        return int(self.K)

    def validate(self) -> None:
        if self.M < 2:
            raise ConfigError("model.M must be at least 2")
        if self.L_e < 1 or self.L_d < 1:
            raise ConfigError("model.L_e and model.L_d must be at least 1")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError("model.mask_threshold must lie in (0, 1)")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("model.keep_fraction must lie in (0, 1]")


@dataclass
class StageConfig:
    optimizer: str = "sgd"
    lr0: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 30
    momentum: float = 0.9


@dataclass
class TrainConfig:
    lambda_hm: float = 0.5
    lambda_ctx: float = 0.5
    lambda_hc: float = 0.25
    lambda_H: float = 0.25
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(optimizer="adam", lr0=0.001, weight_decay=0.0, epochs=30))
    batch_pairs: int = 16
    grl_gamma: float = 10.0
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        for name in ("lambda_hm", "lambda_ctx", "lambda_hc", "lambda_H"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be nonnegative")
        for st in (self.stage1, self.stage2):
            if st.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"unknown optimizer {st.optimizer!r}")
        if self.batch_pairs < 1:
            raise ConfigError("train.batch_pairs must be positive")


@dataclass
class EvalConfig:
    accuracy: bool = True
    human_ratio: bool = True
    davies_bouldin: bool = True
    threshold_coef: float = 0.5
    ratio_denominator: str = "attribution"
    attribution_videos: int = 120


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs/default"


def _from_dict(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    bench: Any = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.bench is None:
            from .synthbench import BenchSpec
            self.bench = BenchSpec()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        from .synthbench import BenchSpec

        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = set(data) - {"bench", "model", "train", "eval", "paths"}
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        cfg = cls(
            bench=_from_dict(BenchSpec, data.get("bench", {}), "bench"),
            model=_from_dict(ModelConfig, data.get("model", {}), "model"),
            train=_from_dict(TrainConfig, data.get("train", {}), "train"),
            eval=_from_dict(EvalConfig, data.get("eval", {}), "eval"),
            paths=_from_dict(PathsConfig, data.get("paths", {}), "paths"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def validate(self) -> None:
        self.bench.validate()
        self.model.validate()
        self.train.validate()
        if self.model.M != self.bench.M or self.model.D != self.bench.D:
            raise ConfigError("model.M/model.D must match bench.M/bench.D")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

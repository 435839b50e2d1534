"""
Model, training and run configuration records
"""
import json
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config.settings import (
    EMBED_DIM, STAGES, HEADS, CLASSES, IMAGE_SIZE, ENCODER_DEPTH,
    STRIP_KERNELS, INIT_STD, INIT_SCHEME, LN_EPS, LEARNING_RATE, GRAD_CLIP,
    ITERATIONS, BATCH_SIZE, CHECKPOINT_EVERY
)
from tafe.errors import ConfigError

AFE_BLOCK_CHOICES = ("both", "anatomy", "instrument")
INIT_SCHEMES = ("fan_in", "normal")


@dataclass
class TafeConfig:
    d: int = EMBED_DIM
    stages: int = STAGES
    heads: int = HEADS
    classes: int = CLASSES
    height: int = IMAGE_SIZE
    width: int = IMAGE_SIZE
    learning_rate: float = LEARNING_RATE
    grad_clip: float = GRAD_CLIP
    iterations: int = ITERATIONS
    batch_size: int = BATCH_SIZE
    seed: int = 0
    afe_enabled: bool = True
    share_aggregation: bool = True
    afe_blocks: str = "both"
    encoder_depth: int = ENCODER_DEPTH
    strip_kernels: Tuple[int, ...] = STRIP_KERNELS
    init_std: float = INIT_STD
    init_scheme: str = INIT_SCHEME
    ln_eps: float = LN_EPS
    checkpoint_every: int = CHECKPOINT_EVERY

    def __post_init__(self):
        self.strip_kernels = tuple(int(k) for k in self.strip_kernels)

    def validate(self) -> "TafeConfig":
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.stages < 0:
            raise ConfigError(f"stages (M) must be >= 0, got {self.stages}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        for name in ("height", "width"):
            size = getattr(self, name)
            if size < 32 or size % 32:
                raise ConfigError(f"{name}={size} must be a positive multiple of 32")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables), got {self.grad_clip}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.afe_blocks not in AFE_BLOCK_CHOICES:
            raise ConfigError(f"afe_blocks must be one of {AFE_BLOCK_CHOICES}, got {self.afe_blocks!r}")
        if self.encoder_depth < 1:
            raise ConfigError(f"encoder_depth must be >= 1, got {self.encoder_depth}")
        if not self.strip_kernels or any(k < 1 or k % 2 == 0 for k in self.strip_kernels):
            raise ConfigError(f"strip kernels must be odd and positive, got {self.strip_kernels}")
        if self.init_std <= 0 or self.ln_eps <= 0:
            raise ConfigError("init_std and ln_eps must be > 0")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        for name in ("afe_enabled", "share_aggregation"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        return self

    @staticmethod
    def field_names() -> List[str]:
        return [f.name for f in fields(TafeConfig)]

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "TafeConfig":
        unknown = sorted(set(data) - set(TafeConfig.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return TafeConfig(**data).validate()
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}") from e

    def replace(self, **changes) -> "TafeConfig":
        data = self.to_dict()
        data.update(changes)
        return TafeConfig.from_dict(data)

    def to_dict(self):
        data = asdict(self)
        data["strip_kernels"] = list(self.strip_kernels)
        return data


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """`key=value` strings; values are JSON literals, falling back to plain strings."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


RUN_PATH_KEYS = ("data", "out", "eval_data")


@dataclass
class RunConfig:
    """
    TafeConfig plus the dataset paths and output directory of one run
    """
    model: TafeConfig
    data: Optional[str] = None
    out: Optional[str] = None
    eval_data: Optional[str] = None

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(TafeConfig.field_names()) - set(RUN_PATH_KEYS))
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        model = {k: v for k, v in data.items() if k not in RUN_PATH_KEYS}
        return RunConfig(
            model=TafeConfig.from_dict(model),
            data=data.get("data"),
            out=data.get("out"),
            eval_data=data.get("eval_data"),
        )

    @staticmethod
    def load(
        path: Optional[str],
        overrides: Sequence[str] = (),
        **paths: Optional[str]
    ) -> "RunConfig":
        document: Dict[str, Any] = {}
        if path:
            try:
                with open(path, 'r', encoding='utf-8') as f:
                    document = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(document, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        document.update(parse_overrides(overrides))
        document.update({k: v for k, v in paths.items() if v is not None})
        return RunConfig.from_dict(document)

    def validate_paths(self):
        if not self.data or not Path(self.data, "manifest.json").is_file():
            raise ConfigError(f"dataset directory {self.data!r} has no manifest.json")
        if self.eval_data and not Path(self.eval_data, "manifest.json").is_file():
            raise ConfigError(f"eval dataset directory {self.eval_data!r} has no manifest.json")
        if not self.out:
            raise ConfigError("an output directory is required")
        out = Path(self.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"output path {out} exists and is not a directory")

    def to_dict(self):
        data = self.model.to_dict()
        data.update({"data": self.data, "out": self.out, "eval_data": self.eval_data})
        return data

"""
Synthetic scene records
"""
from dataclasses import dataclass, asdict
from typing import Any, Dict, Tuple

import numpy as np

from tafe.errors import ConfigError, ShapeError

CLASS_NAMES = ("background", "anatomy", "instrument", "thread")

# RGB base colors in [0, 1]; anatomy and instrument sit within a few hundredths
# of each other in mean intensity so color alone cannot separate them
DEFAULT_COLORS = (
    (0.52, 0.30, 0.28),
    (0.60, 0.36, 0.35),
    (0.56, 0.39, 0.38),
    (0.63, 0.41, 0.36),
)
DEFAULT_SIGMAS = (0.10, 0.12, 0.09, 0.10)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    seed: int = 0
    polygon_vertices: Tuple[int, int] = (5, 9)
    bar_width: Tuple[int, int] = (3, 6)
    thread_width: Tuple[int, int] = (1, 2)
    class_colors: Tuple[Tuple[float, float, float], ...] = DEFAULT_COLORS
    class_sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    illumination: float = 0.05

    def __post_init__(self):
        self.polygon_vertices = tuple(self.polygon_vertices)
        self.bar_width = tuple(self.bar_width)
        self.thread_width = tuple(self.thread_width)
        self.class_colors = tuple(tuple(float(v) for v in c) for c in self.class_colors)
        self.class_sigmas = tuple(float(s) for s in self.class_sigmas)
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if len(self.class_colors) != len(CLASS_NAMES) or len(self.class_sigmas) != len(CLASS_NAMES):
            raise ConfigError(f"need one color and sigma per class ({len(CLASS_NAMES)})")
        for lo, hi in (self.polygon_vertices, self.bar_width, self.thread_width):
            if lo < 1 or hi < lo:
                raise ConfigError(f"invalid range ({lo}, {hi})")

    @property
    def classes(self) -> int:
        return len(CLASS_NAMES)

    def with_seed(self, seed: int) -> "SceneSpec":
        data = asdict(self)
        data["seed"] = seed
        return SceneSpec(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["classes"] = list(CLASS_NAMES)
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "SceneSpec":
        data = {k: v for k, v in data.items() if k != "classes"}
        try:
            return SceneSpec(**data)
        except TypeError as e:
            raise ConfigError(f"invalid scene spec: {e}") from e


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ShapeError(f"sample image must be (1, 3, H, W), got {self.image.shape}")
        if self.mask.shape != (1, 1) + self.image.shape[2:]:
            raise ShapeError(f"sample mask {self.mask.shape} does not match image {self.image.shape}")

    def class_fraction(self, class_id: int) -> float:
        return float(np.mean(self.mask == class_id))

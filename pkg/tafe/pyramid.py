"""
Convolutional backbone and the pyramid <-> token-sequence bijection.

Token order is layer-major, then column j, then row i (row index fastest),
so for 1-based (i, j) in layer l the flat position is

    offset_l + i + (j - 1) * h_l,    offset_l = sum_{k < l} h_k * w_k

which is the square-map unflatten formula generalized to h_l x w_l maps,
with the empty offset sum (layer 1) equal to zero.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from tafe import autodiff as ad
from tafe.autodiff import ParamScope, Var
from tafe.errors import ConfigError, ShapeError

PYRAMID_LEVELS = 4
# input-resolution divisor of each pyramid level
LEVEL_STRIDES = (4, 8, 16, 32)

Layer = Union[np.ndarray, Var]


@dataclass(frozen=True)
class LayerGeometry:
    l: int
    h: int
    w: int
    offset: int

    @property
    def area(self) -> int:
        return self.h * self.w

    def to_dict(self):
        return {"h": self.h, "w": self.w}


Geometry = Tuple[LayerGeometry, ...]


def make_geometry(sizes: Sequence[Tuple[int, int]]) -> Geometry:
    layers = []
    offset = 0
    for l, (h, w) in enumerate(sizes, start=1):
        if h < 1 or w < 1:
            raise ShapeError(f"layer {l} has empty size {h}x{w}")
        layers.append(LayerGeometry(l=l, h=int(h), w=int(w), offset=offset))
        offset += h * w
    return tuple(layers)


def image_geometry(height: int, width: int) -> Geometry:
    check_image_size(height, width)
    return make_geometry([(height // s, width // s) for s in LEVEL_STRIDES])


def check_image_size(height: int, width: int):
    if height % 32 or width % 32 or height < 32 or width < 32:
        raise ConfigError(f"image size {height}x{width} must be a positive multiple of 32")


def token_count(geometry: Geometry) -> int:
    return sum(g.area for g in geometry)


def token_index(geometry: Geometry, l: int, i: int, j: int) -> int:
    """1-based flat token position of 1-based element (i, j) of layer l."""
    g = geometry[l - 1]
    if not (1 <= i <= g.h and 1 <= j <= g.w):
        raise ShapeError(f"({i}, {j}) outside layer {l} of size {g.h}x{g.w}")
    return g.offset + i + (j - 1) * g.h


def _value(x: Layer) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


@dataclass
class FeaturePyramid:
    layers: List[Layer]

    def __post_init__(self):
        if len(self.layers) != PYRAMID_LEVELS:
            raise ShapeError(f"a pyramid has {PYRAMID_LEVELS} layers, got {len(self.layers)}")
        shapes = [_value(x).shape for x in self.layers]
        n, d = shapes[0][0], shapes[0][1]
        for l, shape in enumerate(shapes, start=1):
            if len(shape) != 4 or shape[0] != n or shape[1] != d:
                raise ShapeError(f"layer {l} shape {shape} disagrees with (n={n}, d={d})")

    @property
    def geometry(self) -> Geometry:
        return make_geometry([_value(x).shape[2:] for x in self.layers])

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [_value(x).shape for x in self.layers]


@dataclass
class TokenSequence:
    tokens: Layer
    geometry: Geometry

    def __post_init__(self):
        shape = _value(self.tokens).shape
        if len(shape) != 4 or shape[3] != 1:
            raise ShapeError(f"tokens must be (n, d, T, 1), got {shape}")
        if shape[2] != token_count(self.geometry):
            raise ShapeError(
                f"token count {shape[2]} does not match geometry total {token_count(self.geometry)}"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return _value(self.tokens).shape


def flatten_arrays(layers: Sequence[np.ndarray]) -> np.ndarray:
    n, d = layers[0].shape[:2]
    # (n, d, h, w) -> (n, d, w, h) puts the row index innermost
    columns = [x.transpose(0, 1, 3, 2).reshape(n, d, -1) for x in layers]
    return np.concatenate(columns, axis=2)[..., np.newaxis]


def unflatten_array(tokens: np.ndarray, g: LayerGeometry) -> np.ndarray:
    n, d = tokens.shape[:2]
    block = tokens[:, :, g.offset:g.offset + g.area, 0]
    return np.ascontiguousarray(block.reshape(n, d, g.w, g.h).transpose(0, 1, 3, 2))


def flatten_pyramid(pyramid: FeaturePyramid) -> TokenSequence:
    geometry = pyramid.geometry
    layers = pyramid.layers
    if not isinstance(layers[0], Var):
        return TokenSequence(flatten_arrays(layers), geometry)

    graph = layers[0].graph
    value = flatten_arrays([x.value for x in layers])
    tokens = graph.record(
        "flatten", layers, value,
        lambda g: tuple(unflatten_array(g, lg) for lg in geometry)
    )
    return TokenSequence(tokens, geometry)


def _unflatten_var(tokens: Var, g: LayerGeometry) -> Var:
    shape = tokens.shape

    def backward(grad):
        full = np.zeros(shape)
        full[:, :, g.offset:g.offset + g.area, 0] = flatten_arrays([grad])[:, :, :, 0]
        return (full,)

    return tokens.graph.record("unflatten", (tokens,), unflatten_array(tokens.value, g), backward)


def unflatten_tokens(seq: TokenSequence) -> FeaturePyramid:
    if isinstance(seq.tokens, Var):
        return FeaturePyramid([_unflatten_var(seq.tokens, g) for g in seq.geometry])
    return FeaturePyramid([unflatten_array(seq.tokens, g) for g in seq.geometry])


def backbone_shapes(d: int, in_channels: int = 3) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = [
        ("stem.weight", (d, in_channels, 3, 3)), ("stem.bias", (d,)),
    ]
    for level in range(1, PYRAMID_LEVELS + 1):
        shapes += [(f"down{level}.weight", (d, d, 3, 3)), (f"down{level}.bias", (d,))]
    for level in range(1, PYRAMID_LEVELS + 1):
        shapes += [(f"proj{level}.weight", (d, d, 1, 1)), (f"proj{level}.bias", (d,))]
    return shapes


def extract_pyramid(image: Var, params: ParamScope) -> FeaturePyramid:
    """Strided 3x3 conv stack: two stride-2 convs reach 1/4, one more per level after."""
    n, c, height, width = image.shape
    check_image_size(height, width)

    x = ad.relu(ad.conv2d(image, params["stem.weight"], params["stem.bias"], stride=2))
    layers = []
    for level in range(1, PYRAMID_LEVELS + 1):
        x = ad.relu(ad.conv2d(x, params[f"down{level}.weight"], params[f"down{level}.bias"], stride=2))
        layers.append(ad.conv2d(x, params[f"proj{level}.weight"], params[f"proj{level}.bias"]))
    return FeaturePyramid(layers)

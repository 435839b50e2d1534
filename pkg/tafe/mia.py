"""
Model assembly: backbone pyramid, M stages of encoder/AFE interaction,
per-pixel classification head, and the cross-entropy objective.
"""
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.tafe_config import TafeConfig
from tafe import afe
from tafe import autodiff as ad
from tafe.autodiff import Graph, ParamScope, Var
from tafe.encoder import block_shapes, encoder_stack
from tafe.errors import DataError, ShapeError
from tafe.pyramid import (
    FeaturePyramid, TokenSequence, backbone_shapes, extract_pyramid,
    flatten_pyramid, image_geometry, token_count, unflatten_tokens
)

ParamShapes = List[Tuple[str, Tuple[int, ...]]]


def param_shapes(config: TafeConfig) -> ParamShapes:
    d = config.d
    tokens = token_count(image_geometry(config.height, config.width))
    shapes = [(f"backbone.{n}", s) for n, s in backbone_shapes(d)]
    shapes.append(("pos_embed", (1, d, tokens, 1)))
    blocks = afe.resolve_blocks(config.afe_blocks)
    for s in range(config.stages):
        for b in range(config.encoder_depth):
            shapes += [(f"stage{s}.encoder.block{b}.{n}", sh) for n, sh in block_shapes(d)]
        if config.afe_enabled:
            layer = afe.layer_shapes(d, config.strip_kernels, config.share_aggregation, blocks)
            for l in range(1, 5):
                shapes += [(f"stage{s}.afe.layer{l}.{n}", sh) for n, sh in layer]
    shapes += [("head.weight", (config.classes, d, 1, 1)), ("head.bias", (config.classes,))]
    return shapes


# N(0, init_std) under every scheme; the AFE gate starts near zero
SMALL_INIT = ("pos_embed", "head.weight", ".fuse.weight")
# Weights feeding a ReLU or GELU
RECTIFIED = ("backbone.stem.weight", "backbone.down", ".aggregate.weight", ".ffn.fc1.weight")


def fan_in(shape: Tuple[int, ...]) -> int:
    """Inputs per output unit: c_in*kh*kw for conv kernels, rows for (d_in, d_out) matrices."""
    if len(shape) == 4:
        return int(np.prod(shape[1:]))
    return int(shape[0])


def init_std(name: str, shape: Tuple[int, ...], scheme: str, std: float) -> float:
    if scheme == "normal" or any(key in name for key in SMALL_INIT):
        return std
    gain = 2.0 if any(key in name for key in RECTIFIED) else 1.0
    return float(np.sqrt(gain / fan_in(shape)))


def _init_value(name: str, shape: Tuple[int, ...], seed: int, std: float, scheme: str = "normal") -> np.ndarray:
    if name.endswith(".bias") or name.endswith(".beta"):
        return np.zeros(shape)
    if name.endswith(".gamma"):
        return np.ones(shape)
    # per-name stream: toggling a component never shifts the others' draws
    rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
    return rng.normal(0.0, init_std(name, shape, scheme, std), size=shape)


@dataclass
class TafeModel:
    config: TafeConfig
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        names = [n for n, _ in expected]
        if sorted(names) != sorted(self.params):
            missing = sorted(set(names) - set(self.params))
            extra = sorted(set(self.params) - set(names))
            raise ShapeError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape in expected:
            if tuple(self.params[name].shape) != tuple(shape):
                raise ShapeError(f"{name}: shape {self.params[name].shape} != expected {shape}")
        # keep the canonical enumeration order
        self.params = {name: np.asarray(self.params[name], dtype=np.float64) for name in names}

    @staticmethod
    def initialize(config: TafeConfig) -> "TafeModel":
        config.validate()
        return TafeModel(config, {
            name: _init_value(name, shape, config.seed, config.init_std, config.init_scheme)
            for name, shape in param_shapes(config)
        })

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def with_params(self, params: Dict[str, np.ndarray]) -> "TafeModel":
        return TafeModel(self.config, params)


def stage_interact(
    f_in: TokenSequence,
    p_in: FeaturePyramid,
    stage: ParamScope,
    config: TafeConfig
) -> Tuple[TokenSequence, FeaturePyramid]:
    """One stage: encoder on tokens, AFE on the pyramid, then cross-addition."""
    if f_in.geometry != p_in.geometry:
        raise ShapeError("token geometry does not match the pyramid")
    f_enc = encoder_stack(f_in, stage.child("encoder"), config.heads, config.encoder_depth, config.ln_eps)
    unflat = unflatten_tokens(f_enc)
    if not config.afe_enabled:
        return f_enc, unflat

    enhanced = afe.afe_forward(p_in, stage.child("afe"), afe.resolve_blocks(config.afe_blocks))
    p_out = FeaturePyramid([ad.add(u, e) for u, e in zip(unflat.layers, enhanced.layers)])
    f_out = TokenSequence(ad.add(f_enc.tokens, flatten_pyramid(enhanced).tokens), f_enc.geometry)
    return f_out, p_out


def segmentation_head(pyramid: FeaturePyramid, params: ParamScope, height: int, width: int) -> Var:
    """Upsample layers 2-4 to the 1/4 grid, sum with layer 1, 1x1 classify, upsample to input."""
    first = pyramid.layers[0]
    h1, w1 = first.shape[2], first.shape[3]
    fused = first
    for layer in pyramid.layers[1:]:
        fused = ad.add(fused, ad.upsample_bilinear(layer, h1, w1))
    logits = ad.conv2d(fused, params["weight"], params["bias"])
    return ad.upsample_bilinear(logits, height, width)


def forward(image: Var, params: ParamScope, config: TafeConfig) -> Var:
    n, c, height, width = image.shape
    if (height, width) != (config.height, config.width) or c != 3:
        raise ShapeError(
            f"image {image.shape} does not match config (n, 3, {config.height}, {config.width})"
        )
    pyramid = extract_pyramid(image, params.child("backbone"))
    seq = flatten_pyramid(pyramid)
    seq = TokenSequence(ad.add_broadcast(seq.tokens, params["pos_embed"]), seq.geometry)
    for s in range(config.stages):
        seq, pyramid = stage_interact(seq, pyramid, params.child(f"stage{s}"), config)
    return segmentation_head(pyramid, params.child("head"), height, width)


def check_mask(mask: np.ndarray, classes: int, logits_shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"mask must be (n, 1, H, W), got {mask.shape}")
    if logits_shape is not None:
        n, _, h, w = logits_shape
        if mask.shape != (n, 1, h, w):
            raise ShapeError(f"mask {mask.shape} does not match logits {logits_shape}")
    if not np.all(mask == np.round(mask)) or mask.min() < 0 or mask.max() >= classes:
        raise DataError(f"mask class ids must be integers in [0, {classes})")
    return mask.astype(np.int64)


def loss_ce(logits: Var, mask: np.ndarray) -> Var:
    """Mean per-pixel softmax cross-entropy."""
    z = logits.value
    target = check_mask(mask, z.shape[1], z.shape)[:, 0]
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    norm = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(norm)
    picked = np.take_along_axis(log_probs, target[:, np.newaxis], axis=1)
    count = picked.size
    value = np.array(-picked.sum() / count)

    def backward(g):
        grad = exp / norm
        np.put_along_axis(grad, target[:, np.newaxis], np.take_along_axis(grad, target[:, np.newaxis], axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return logits.graph.record("cross_entropy", (logits,), value, backward)


def compute_loss(model: TafeModel, images: np.ndarray, masks: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and parameter gradients for one batch on a fresh graph."""
    graph = Graph()
    params = ParamScope(graph.bind(model.params))
    loss = loss_ce(forward(graph.constant(images), params, model.config), masks)
    return float(loss.value), graph.backward(loss)


def predict_logits(model: TafeModel, images: np.ndarray) -> np.ndarray:
    graph = Graph()
    params = ParamScope(graph.bind(model.params))
    return forward(graph.constant(images), params, model.config).value


def predict_classes(model: TafeModel, images: np.ndarray) -> np.ndarray:
    """Per-pixel argmax class ids, shape (n, 1, H, W)."""
    return predict_logits(model, images).argmax(axis=1)[:, np.newaxis]


def gradient_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm`` (0 leaves grads as they are)."""
    norm = gradient_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def gradient_step(model: TafeModel, grads: Dict[str, np.ndarray], learning_rate: float) -> TafeModel:
    return model.with_params({
        name: value - learning_rate * grads[name] for name, value in model.params.items()
    })

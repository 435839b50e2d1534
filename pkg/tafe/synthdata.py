"""
Procedural labeled scenes: a convex polygon (anatomy), a rotated bar
(instrument) and a thin curved thread over a textured background.

Class textures share noise statistics and sit close in mean color, so a
model has to separate them by shape rather than by local appearance.
"""
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from config.settings import SCENE_RETRIES
from models.scene import CLASS_NAMES, SceneSpec, Sample
from tafe.errors import ConfigError, DataError
from tafe.persister import load_pgm, load_ppm, read_json, save_pgm, save_ppm, write_json
from tafe.tensor import conv2d_raw, parallel_map
from utils.logger import RunLogger
from utils.retry import retry_on

BACKGROUND, ANATOMY, INSTRUMENT, THREAD = range(len(CLASS_NAMES))

# Accepted coverage per class, as a fraction of the frame
MIN_POLYGON = 0.02
BAR_RANGE = (0.02, 0.20)
THREAD_RANGE = (0.002, 0.05)

THREAD_SEGMENTS = 32

Points = List[Tuple[float, float]]


class DegenerateScene(Exception):
    pass


def _place(shape: np.ndarray, spec: SceneSpec, rng: np.random.Generator, pad: float = 0.0) -> Points:
    """Translate origin-centred points to a uniform position that keeps them inside the frame."""
    lo = shape.min(axis=0)
    hi = shape.max(axis=0)
    margin = 1.0 + pad
    limits = np.array([spec.width, spec.height]) - 1.0 - margin
    first = margin - lo
    last = limits - hi
    if (last < first).any():
        raise DegenerateScene("shape does not fit in the frame")
    offset = rng.uniform(first, last)
    return [tuple(p) for p in (shape + offset).tolist()]


def _polygon(spec: SceneSpec, rng: np.random.Generator) -> Points:
    """Jittered angles on a rotated ellipse; ordered angles keep the polygon convex."""
    size = min(spec.height, spec.width)
    lo, hi = spec.polygon_vertices
    count = int(rng.integers(lo, hi + 1))
    rx, ry = rng.uniform(0.18, 0.3, size=2) * size
    rot = rng.uniform(0.0, np.pi)
    step = 2.0 * np.pi / count
    angles = rng.uniform(0.0, step) + step * (np.arange(count) + rng.uniform(-0.35, 0.35, size=count))
    ex, ey = rx * np.cos(angles), ry * np.sin(angles)
    shape = np.stack([ex * np.cos(rot) - ey * np.sin(rot), ex * np.sin(rot) + ey * np.cos(rot)], axis=1)
    return _place(shape, spec, rng)


def _bar(spec: SceneSpec, rng: np.random.Generator) -> Points:
    size = min(spec.height, spec.width)
    lo, hi = spec.bar_width
    half_w = int(rng.integers(lo, hi + 1)) / 2.0
    half_l = rng.uniform(0.55, 0.8) * size / 2.0
    theta = rng.uniform(0.0, np.pi)
    u = np.array([np.cos(theta), np.sin(theta)])
    v = np.array([-u[1], u[0]])
    corners = np.stack([su * half_l * u + sv * half_w * v for su, sv in ((1, 1), (1, -1), (-1, -1), (-1, 1))])
    return _place(corners, spec, rng)


def _thread(spec: SceneSpec, rng: np.random.Generator) -> Tuple[Points, int]:
    """Quadratic Bezier polyline; returns the points and the stroke width."""
    size = min(spec.height, spec.width)
    lo, hi = spec.thread_width
    stroke = int(rng.integers(lo, hi + 1))
    length = rng.uniform(0.5, 0.8) * size
    theta = rng.uniform(0.0, 2.0 * np.pi)
    end = length * np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-np.sin(theta), np.cos(theta)])
    control = end / 2.0 + rng.uniform(-0.25, 0.25) * length * normal
    t = np.linspace(0.0, 1.0, THREAD_SEGMENTS + 1)[:, np.newaxis]
    curve = 2 * (1 - t) * t * control + t ** 2 * end
    return _place(curve, spec, rng, pad=stroke / 2.0), stroke


def _rasterize(spec: SceneSpec, polygon: Points, bar: Points, thread: Points, stroke: int) -> np.ndarray:
    canvas = Image.new("L", (spec.width, spec.height), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    draw.polygon(polygon, fill=ANATOMY)
    draw.polygon(bar, fill=INSTRUMENT)
    draw.line(thread, fill=THREAD, width=stroke, joint="curve")
    return np.asarray(canvas, dtype=np.int64)


def _layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    polygon = _polygon(spec, rng)
    bar = _bar(spec, rng)
    thread, stroke = _thread(spec, rng)

    labels = _rasterize(spec, polygon, bar, thread, stroke)
    fraction = np.bincount(labels.ravel(), minlength=len(CLASS_NAMES)) / labels.size
    if fraction[ANATOMY] < MIN_POLYGON:
        raise DegenerateScene(f"polygon covers {fraction[ANATOMY]:.4f}")
    if not BAR_RANGE[0] <= fraction[INSTRUMENT] <= BAR_RANGE[1]:
        raise DegenerateScene(f"bar covers {fraction[INSTRUMENT]:.4f}")
    if not THREAD_RANGE[0] <= fraction[THREAD] <= THREAD_RANGE[1]:
        raise DegenerateScene(f"thread covers {fraction[THREAD]:.4f}")
    return labels


def _texture(spec: SceneSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    colors = np.asarray(spec.class_colors)
    sigmas = np.asarray(spec.class_sigmas)

    ys, xs = np.mgrid[0:h, 0:w]
    fx, fy = rng.uniform(-1.0, 1.0, size=2) / max(h, w)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    illumination = spec.illumination * np.cos(2.0 * np.pi * (fx * xs + fy * ys) + phase)

    noise = rng.standard_normal(size=(3, h, w))
    base = colors[labels].transpose(2, 0, 1)
    image = base + illumination[np.newaxis] + sigmas[labels][np.newaxis] * noise
    return np.clip(image, 0.0, 1.0)[np.newaxis]


def gen_scene(spec: SceneSpec) -> Sample:
    """One labeled scene, fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    # attempts share the generator, so each retry draws a fresh layout
    labels = retry_on((DegenerateScene,), max_attempts=SCENE_RETRIES)(_layout)(spec, rng)
    image = _texture(spec, labels, rng)
    return Sample(image=image, mask=labels[np.newaxis, np.newaxis], seed=spec.seed)


def local_mean_gap(sample: Sample, first: int = ANATOMY, second: int = INSTRUMENT, window: int = 5) -> Optional[float]:
    """|mean local intensity of class `first` - that of class `second`|, or None if either is absent."""
    intensity = sample.image.mean(axis=1, keepdims=True)
    box = np.full((1, 1, window, window), 1.0 / (window * window))
    local = conv2d_raw(intensity, box)[0, 0]
    labels = sample.mask[0, 0]
    if not (labels == first).any() or not (labels == second).any():
        return None
    return float(abs(local[labels == first].mean() - local[labels == second].mean()))


def sample_paths(index: int) -> Tuple[str, str]:
    return f"image_{index:04d}.ppm", f"mask_{index:04d}.pgm"


def gen_dataset(
    n: int,
    base_seed: int,
    out_dir: str,
    spec: Optional[SceneSpec] = None,
    logger: Optional[RunLogger] = None
) -> dict:
    """Write n scenes with seeds base_seed .. base_seed+n-1 plus manifest.json."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    spec = (spec or SceneSpec()).with_seed(base_seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out}: {e}") from e

    if logger:
        logger.info(f"Generating {n} scenes ({spec.height}x{spec.width}) from seed {base_seed}")

    samples = parallel_map(lambda i: gen_scene(spec.with_seed(base_seed + i)), range(n))

    entries = []
    try:
        for index, sample in enumerate(samples):
            image_name, mask_name = sample_paths(index)
            save_ppm(out / image_name, sample.image)
            save_pgm(out / mask_name, sample.mask)
            entries.append({"image": image_name, "mask": mask_name, "seed": sample.seed})
        manifest = {"samples": entries, "spec": spec.to_dict()}
        write_json(out / "manifest.json", manifest)
    except OSError as e:
        raise DataError(f"failed writing dataset to {out}: {e}") from e

    if logger:
        logger.info(f"Wrote {n} image/mask pairs to {out}")
    return manifest


def load_dataset(data_dir: str) -> Tuple[List[Sample], SceneSpec]:
    root = Path(data_dir)
    manifest = read_json(root / "manifest.json")
    try:
        spec = SceneSpec.from_dict(manifest["spec"])
        entries = manifest["samples"]
    except (KeyError, TypeError, ConfigError) as e:
        raise DataError(f"bad dataset manifest in {root}: {e}") from e
    if not entries:
        raise DataError(f"dataset {root} lists no samples")

    samples = []
    for entry in entries:
        try:
            image = load_ppm(root / entry["image"])
            mask = load_pgm(root / entry["mask"])
            samples.append(Sample(image=image, mask=mask, seed=int(entry.get("seed", 0))))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad sample entry {entry!r} in {root}: {e}") from e
    return samples, spec


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch samples into (n, 3, H, W) images and (n, 1, H, W) masks."""
    return (
        np.concatenate([s.image for s in samples], axis=0),
        np.concatenate([s.mask for s in samples], axis=0),
    )

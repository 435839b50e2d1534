"""
On-disk formats: TAFE-T1 tensors, geometry sidecars, checkpoints, JSON
reports, PPM/PGM scenes, and the SQLite run registry.
"""
import json
import sqlite3
import struct
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from models.run_metadata import RunMetadata
from models.tafe_config import TafeConfig
from tafe.errors import DataError, ShapeError
from tafe.pyramid import Geometry, make_geometry
from utils.logger import RunLogger

TENSOR_MAGIC = b"TAFETNSR"
CHECKPOINT_FORMAT = "tafe-checkpoint-1"

PathLike = Union[str, Path]


def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"TAFE-T1 stores rank-4 tensors, got shape {x.shape}")
    header = json.dumps({"shape": list(x.shape), "dtype": "f64"}, separators=(",", ":")).encode("utf-8")
    return TENSOR_MAGIC + struct.pack("<I", len(header)) + header + x.astype("<f8").tobytes(order="C")


HEADER_PREFIX = len(TENSOR_MAGIC) + 4


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:8] != TENSOR_MAGIC:
        raise DataError("not a TAFE-T1 tensor (bad magic)")
    if len(blob) < HEADER_PREFIX:
        raise DataError(f"truncated TAFE-T1 tensor: {len(blob)} bytes, no header length")
    (length,) = struct.unpack("<I", blob[8:HEADER_PREFIX])
    if len(blob) < HEADER_PREFIX + length:
        raise DataError(f"truncated TAFE-T1 header: declares {length} bytes, {len(blob) - HEADER_PREFIX} present")
    try:
        header = json.loads(blob[HEADER_PREFIX:HEADER_PREFIX + length].decode("utf-8"))
        shape = tuple(int(s) for s in header.get("shape", ()))
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, TypeError, ValueError) as e:
        raise DataError(f"corrupt TAFE-T1 header: {e}") from e
    if header.get("dtype") != "f64" or len(shape) != 4 or min(shape) < 0:
        raise DataError(f"unsupported TAFE-T1 header {header}")
    body = blob[HEADER_PREFIX + length:]
    expected = int(np.prod(shape)) * 8
    if len(body) != expected:
        raise DataError(f"TAFE-T1 payload has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path: PathLike, x: np.ndarray):
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path: PathLike) -> np.ndarray:
    try:
        return decode_tensor(Path(path).read_bytes())
    except OSError as e:
        raise DataError(f"cannot read tensor {path}: {e}") from e


def as_rank4(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim > 4:
        raise ShapeError(f"cannot store rank-{x.ndim} array as TAFE-T1")
    return x.reshape((1,) * (4 - x.ndim) + x.shape)


def write_json(path: PathLike, data: Any):
    """Stable JSON (sorted keys, fixed indent) so identical runs give identical bytes."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e


def save_geometry(path: PathLike, geometry: Geometry):
    write_json(path, {"layers": [g.to_dict() for g in geometry]})


def load_geometry(path: PathLike) -> Geometry:
    data = read_json(path)
    try:
        return make_geometry([(layer["h"], layer["w"]) for layer in data["layers"]])
    except (KeyError, TypeError) as e:
        raise DataError(f"bad geometry sidecar {path}: {e}") from e


def save_tokens(directory: PathLike, tokens: np.ndarray, geometry: Geometry):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "tokens.tafe", tokens)
    save_geometry(directory / "geometry.json", geometry)


def load_tokens(directory: PathLike) -> Tuple[np.ndarray, Geometry]:
    directory = Path(directory)
    return load_tensor(directory / "tokens.tafe"), load_geometry(directory / "geometry.json")


def save_pyramid(directory: PathLike, layers: Sequence[np.ndarray]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for l, layer in enumerate(layers, start=1):
        save_tensor(directory / f"layer{l}.tafe", layer)
    save_geometry(directory / "geometry.json", make_geometry([x.shape[2:] for x in layers]))


def load_pyramid(directory: PathLike) -> list:
    directory = Path(directory)
    geometry = load_geometry(directory / "geometry.json")
    layers = [load_tensor(directory / f"layer{g.l}.tafe") for g in geometry]
    for g, layer in zip(geometry, layers):
        if layer.shape[2:] != (g.h, g.w):
            raise ShapeError(f"layer {g.l} is {layer.shape[2:]}, sidecar says {(g.h, g.w)}")
    return layers


def save_ppm(path: PathLike, image: np.ndarray):
    """(1, 3, H, W) floats in [0, 1] -> binary 8-bit PPM (P6)."""
    pixels = np.clip(np.round(image[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def save_pgm(path: PathLike, mask: np.ndarray):
    """(1, 1, H, W) class ids -> binary 8-bit PGM (P5)."""
    Image.fromarray(np.asarray(mask[0, 0], dtype=np.uint8)).save(path, format="PPM")


def load_ppm(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DataError(f"{path} is {im.mode}, expected an RGB PPM")
            pixels = np.asarray(im, dtype=np.float64)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return (pixels / 255.0).transpose(2, 0, 1)[np.newaxis]


def load_pgm(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path} is {im.mode}, expected a grayscale PGM")
            values = np.asarray(im, dtype=np.int64)
    except OSError as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    return values[np.newaxis, np.newaxis]


def save_checkpoint(directory: PathLike, config: TafeConfig, params: Dict[str, np.ndarray], iteration: int):
    """Manifest naming every parameter plus one TAFE-T1 file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (name, value) in enumerate(params.items()):
        filename = f"p{index:04d}.tafe"
        save_tensor(directory / filename, as_rank4(value))
        entries.append({"name": name, "file": filename, "shape": list(value.shape)})
    write_json(directory / "manifest.json", {
        "format": CHECKPOINT_FORMAT,
        "iteration": iteration,
        "config": config.to_dict(),
        "parameters": entries,
    })


def load_checkpoint(directory: PathLike) -> Tuple[TafeConfig, Dict[str, np.ndarray], int]:
    directory = Path(directory)
    if (directory / "checkpoint" / "manifest.json").is_file():
        directory = directory / "checkpoint"
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{directory} is not a TAFE checkpoint")
    config = TafeConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["parameters"]:
        value = load_tensor(directory / entry["file"])
        shape = tuple(entry["shape"])
        if value.size != int(np.prod(shape)):
            raise ShapeError(f"{entry['name']}: stored {value.shape} cannot hold {shape}")
        params[entry["name"]] = value.reshape(shape)
    return config, params, int(manifest.get("iteration", 0))


class Persister:
    def __init__(self, logger: RunLogger, out_dir: PathLike, metadata_db: PathLike):
        self.logger = logger
        self.out_dir = Path(out_dir)
        self.metadata_db = Path(metadata_db)

        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metadata_db.parent.mkdir(parents=True, exist_ok=True)

        self._init_metadata_db()

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoint"

    def _init_metadata_db(self):
        conn = sqlite3.connect(self.metadata_db)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs_metadata (
                run_id TEXT PRIMARY KEY,
                command TEXT,
                start_time TEXT,
                end_time TEXT,
                duration_seconds REAL,
                tafe_version TEXT,
                config TEXT,
                output_dir TEXT,
                iterations_completed INTEGER,
                final_loss REAL,
                miou REAL,
                mdice REAL,
                error_summary TEXT
            )
        ''')

        conn.commit()
        conn.close()

    def save_checkpoint(self, config: TafeConfig, params: Dict[str, np.ndarray], iteration: int):
        save_checkpoint(self.checkpoint_dir, config, params, iteration)
        self.logger.info(f"Checkpoint written at iteration {iteration}: {self.checkpoint_dir}")

    def save_loss_log(self, entries: Sequence[Dict[str, Any]]) -> Path:
        path = self.out_dir / "loss_log.json"
        write_json(path, list(entries))
        return path

    def save_metrics(self, metrics: Dict[str, Any], path: PathLike = None) -> Path:
        path = Path(path) if path else self.out_dir / "metrics.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, metrics)
        self.logger.info(f"Metrics written: {path}")
        return path

    def save_run_metadata(self, metadata: RunMetadata):
        conn = sqlite3.connect(self.metadata_db)
        cursor = conn.cursor()

        cursor.execute('''
            INSERT OR REPLACE INTO runs_metadata VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            metadata.run_id,
            metadata.command,
            metadata.start_time,
            metadata.end_time,
            metadata.duration_seconds,
            metadata.tafe_version,
            json.dumps(metadata.config, sort_keys=True),
            metadata.output_dir,
            metadata.iterations_completed,
            metadata.final_loss,
            metadata.miou,
            metadata.mdice,
            json.dumps(metadata.error_summary)
        ))

        conn.commit()
        conn.close()

        self.logger.info(f"Saved run metadata for run_id: {metadata.run_id}")

import json

import numpy as np
import pytest

from models.scene import SceneSpec, Sample
from tafe.errors import ConfigError, DataError, GeometryRetryError, ShapeError
from tafe.synthdata import (
    ANATOMY, BAR_RANGE, INSTRUMENT, THREAD, THREAD_RANGE,
    gen_dataset, gen_scene, load_dataset, local_mean_gap, stack
)


@pytest.fixture(scope="module")
def hundred_scenes():
    return [gen_scene(SceneSpec(seed=seed)) for seed in range(100)]


def test_same_seed_gives_identical_scene():
    a = gen_scene(SceneSpec(seed=42))
    b = gen_scene(SceneSpec(seed=42))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, gen_scene(SceneSpec(seed=43)).mask)


def test_scene_shapes_and_ranges(hundred_scenes):
    for sample in hundred_scenes[:10]:
        assert sample.image.shape == (1, 3, 64, 64)
        assert sample.mask.shape == (1, 1, 64, 64)
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert set(np.unique(sample.mask)) <= {0, 1, 2, 3}


def test_class_fractions_over_a_hundred_seeds(hundred_scenes):
    for sample in hundred_scenes:
        assert THREAD_RANGE[0] <= sample.class_fraction(THREAD) <= THREAD_RANGE[1]
        assert BAR_RANGE[0] <= sample.class_fraction(INSTRUMENT) <= BAR_RANGE[1]
    assert THREAD_RANGE == (0.002, 0.05) and BAR_RANGE == (0.02, 0.20)


def test_every_mask_has_several_classes(hundred_scenes):
    assert all(len(np.unique(s.mask)) >= 2 for s in hundred_scenes)


def test_classes_are_hard_to_split_by_local_intensity(hundred_scenes):
    gaps = [local_mean_gap(s, ANATOMY, INSTRUMENT) for s in hundred_scenes]
    gaps = [g for g in gaps if g is not None]
    assert gaps
    assert np.mean(gaps) < 0.15


def test_non_square_scene():
    sample = gen_scene(SceneSpec(height=32, width=64, seed=3))
    assert sample.mask.shape == (1, 1, 32, 64)


def test_impossible_geometry_exhausts_retries():
    with pytest.raises(GeometryRetryError):
        gen_scene(SceneSpec(bar_width=(40, 40), seed=1))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(height=8)
    with pytest.raises(ConfigError):
        SceneSpec(bar_width=(6, 3))
    with pytest.raises(ConfigError):
        SceneSpec(class_sigmas=(0.1, 0.1))


def test_sample_shapes_are_checked():
    with pytest.raises(ShapeError):
        Sample(image=np.zeros((1, 3, 4, 4)), mask=np.zeros((1, 1, 4, 5)))


def test_dataset_files_and_manifest(tmp_path):
    manifest = gen_dataset(8, 5, str(tmp_path / "data"))
    root = tmp_path / "data"
    assert len(list(root.glob("*.ppm"))) == 8
    assert len(list(root.glob("*.pgm"))) == 8
    assert json.loads((root / "manifest.json").read_text()) == json.loads(json.dumps(manifest))
    assert [e["seed"] for e in manifest["samples"]] == list(range(5, 13))
    assert manifest["spec"]["classes"] == ["background", "anatomy", "instrument", "thread"]
    assert (root / manifest["samples"][0]["image"]).read_bytes().startswith(b"P6")
    assert (root / manifest["samples"][0]["mask"]).read_bytes().startswith(b"P5")


def test_regeneration_is_byte_identical(tmp_path):
    gen_dataset(3, 9, str(tmp_path / "a"), spec=SceneSpec(height=32, width=32))
    gen_dataset(3, 9, str(tmp_path / "b"), spec=SceneSpec(height=32, width=32))
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_loading_reproduces_samples_up_to_quantization(tmp_path):
    spec = SceneSpec(height=32, width=32)
    gen_dataset(2, 20, str(tmp_path), spec=spec)
    samples, loaded_spec = load_dataset(str(tmp_path))
    assert loaded_spec == spec.with_seed(20)
    for sample in samples:
        original = gen_scene(spec.with_seed(sample.seed))
        assert np.max(np.abs(sample.image - original.image)) <= 1.0 / 255.0
        np.testing.assert_array_equal(sample.mask, original.mask)

    images, masks = stack(samples)
    assert images.shape == (2, 3, 32, 32) and masks.shape == (2, 1, 32, 32)


def test_dataset_needs_samples(tmp_path):
    with pytest.raises(ConfigError):
        gen_dataset(0, 0, str(tmp_path))


def test_broken_datasets_are_data_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "missing"))

    gen_dataset(1, 0, str(tmp_path / "ok"), spec=SceneSpec(height=32, width=32))
    manifest = json.loads((tmp_path / "ok" / "manifest.json").read_text())

    (tmp_path / "ok" / "manifest.json").write_text(json.dumps({"samples": manifest["samples"]}))
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "ok"))

    (tmp_path / "ok" / "manifest.json").write_text(json.dumps({**manifest, "samples": []}))
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "ok"))

    (tmp_path / "ok" / manifest["samples"][0]["image"]).unlink()
    (tmp_path / "ok" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "ok"))

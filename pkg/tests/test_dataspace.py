import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sslkd.dataspace import (
    DatasetSplit,
    Sample,
    SceneParams,
    generate_dataset,
    generate_synthetic_scene,
    load_dataset,
    materialize,
    read_split,
    save_dataset,
    split_dataset,
    write_split,
)
from sslkd.errors import ConfigError, ValidationError


def brute_rasterize(size, polylines, widths):
    """Per-pixel loop: pixel centre within width/2 of any segment."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for y in range(size):
        for x in range(size):
            cx, cy = x + 0.5, y + 0.5
            for line, w in zip(polylines, widths):
                for (ax, ay), (bx, by) in zip(line[:-1], line[1:]):
                    vx, vy = bx - ax, by - ay
                    length2 = vx * vx + vy * vy
                    t = 0.0 if length2 == 0 else max(0.0, min(1.0, ((cx - ax) * vx + (cy - ay) * vy) / length2))
                    d = math.hypot(ax + t * vx - cx, ay + t * vy - cy)
                    if d * d <= (w / 2) ** 2:
                        mask[y, x] = 1
    return mask


def test_no_roads_gives_empty_mask():
    s = generate_synthetic_scene(SceneParams(n_roads_range=(0, 0)), seed=5)
    assert s.mask.sum() == 0


def test_generation_is_deterministic():
    p = SceneParams()
    a, b = generate_synthetic_scene(p, 7), generate_synthetic_scene(p, 7)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, generate_synthetic_scene(p, 8).image)


def test_two_roads_cover_a_minority_of_pixels():
    p = SceneParams(image_size=128, n_roads_range=(2, 2), road_width_range=(6, 6))
    frac = generate_synthetic_scene(p, 3).mask.mean()
    assert 0 < frac < 0.5


def test_image_range_and_mask_values():
    s = generate_synthetic_scene(SceneParams(noise_std=0.5), 1)
    assert s.image.dtype == np.float32 and s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}


def test_rejects_tiny_images():
    with pytest.raises(ConfigError):
        generate_synthetic_scene(SceneParams(image_size=16), 0)


def test_scene_params_validation():
    with pytest.raises(ValueError):
        SceneParams(road_width_range=(5, 2))
    with pytest.raises(ValueError):
        SceneParams(noise_std=-1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_equals_independent_rasterization(seed):
    p = SceneParams(image_size=32, road_width_range=(2, 5), n_roads_range=(1, 3))
    s = generate_synthetic_scene(p, seed)
    expected = brute_rasterize(32, s.meta["polylines"], s.meta["widths"])
    assert np.array_equal(s.mask, expected)


def test_sample_invariants():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    with pytest.raises(ValidationError):
        Sample("x", img + 2)
    with pytest.raises(ValidationError):
        Sample("x", img, np.zeros((4, 5), dtype=np.uint8))
    with pytest.raises(ValidationError):
        Sample("x", img, np.full((4, 4), 2, dtype=np.uint8))


def _write_png(path, arr, mode):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode).save(path)


def test_load_dataset_counts_and_binarizes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        _write_png(tmp_path / "images" / f"t{i}.png", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), "RGB")
    for i in range(2):
        _write_png(tmp_path / "masks" / f"t{i}.png", (rng.integers(0, 2, (8, 8)) * 255).astype(np.uint8), "L")
    samples = load_dataset(tmp_path)
    assert len(samples) == 3
    assert sum(s.mask is not None for s in samples) == 2
    assert set(np.unique(samples[0].mask)) <= {0, 1}
    assert samples[0].image.max() <= 1.0 and samples[0].image.shape == (3, 8, 8)


def test_load_dataset_edge_cases(tmp_path):
    (tmp_path / "images").mkdir()
    assert load_dataset(tmp_path) == []
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    _write_png(tmp_path / "images" / "a.png", np.zeros((8, 8, 3), dtype=np.uint8), "RGB")
    _write_png(tmp_path / "masks" / "a.png", np.zeros((4, 8), dtype=np.uint8), "L")
    with pytest.raises(ValidationError, match="a"):
        load_dataset(tmp_path)


def test_save_load_round_trip(tmp_path):
    samples = generate_dataset(SceneParams(image_size=32), 3, seed=0)
    save_dataset(samples, tmp_path)
    back = load_dataset(tmp_path)
    assert [s.id for s in back] == sorted(s.id for s in samples)
    by_id = {s.id: s for s in samples}
    for s in back:
        assert np.array_equal(s.mask, by_id[s.id].mask)
        assert np.abs(s.image - by_id[s.id].image).max() <= 0.5 / 255 + 1e-6


@pytest.fixture(scope="module")
def pool():
    return generate_dataset(SceneParams(image_size=32), 300, seed=1)


def test_split_counts(pool):
    split = split_dataset(pool, 40, 4, 20, seed=0)
    assert (len(split.labelled), len(split.unlabelled), len(split.validation)) == (40, 160, 20)
    assert split_dataset(pool, 1, 0, 0, seed=0).unlabelled == ()


def test_split_deterministic_and_disjoint(pool):
    a = split_dataset(pool, 10, 4, 5, seed=3)
    assert a == split_dataset(pool, 10, 4, 5, seed=3)
    assert a != split_dataset(pool, 10, 4, 5, seed=4)
    parts = [set(a.labelled), set(a.unlabelled), set(a.validation)]
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])


def test_split_insufficient_samples(pool):
    with pytest.raises(ConfigError, match="needs 350 .* 300"):
        split_dataset(pool, 50, 5, 50, seed=0)


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        DatasetSplit(labelled=("a",), unlabelled=("a",), validation=(), seed=0)


def test_materialize_withholds_unlabelled_masks(pool):
    split = split_dataset(pool, 4, 4, 2, seed=0)
    parts = materialize(split, pool)
    assert all(s.mask is None for s in parts["unlabelled"])
    assert all(s.mask is not None for s in parts["labelled"] + parts["validation"])
    assert all(s.mask is not None for s in pool)


def test_split_file_round_trip(pool, tmp_path):
    split = split_dataset(pool, 4, 4, 2, seed=9)
    path = write_split(split, tmp_path / "split.csv")
    assert path.read_text().splitlines()[1].startswith("labelled,")
    assert read_split(path) == split

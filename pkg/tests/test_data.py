import numpy as np
import pytest

from camwords.data import DataConfig, generate_dataset, load_dataset, save_dataset, split
from camwords.errors import ConfigError


def small(n=20, **kw):
    return DataConfig(num_samples=n, **kw)


def test_single_shape_single_class():
    ds = generate_dataset(small(1, num_classes=2, shapes_per_image=(1, 1)), seed=7)
    assert len(ds) == 1 and ds.samples[0].y_img.sum() == 1


def test_regeneration_is_byte_identical():
    a = generate_dataset(small(5), seed=7)
    b = generate_dataset(small(5), seed=7)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.image.tobytes() == sb.image.tobytes()
        assert sa.gt_mask.tobytes() == sb.gt_mask.tobytes()
        assert sa.y_img.tobytes() == sb.y_img.tobytes()


def test_different_seeds_differ():
    a = generate_dataset(small(3), seed=1)
    b = generate_dataset(small(3), seed=2)
    assert any(sa.image.tobytes() != sb.image.tobytes() for sa, sb in zip(a.samples, b.samples))


def test_class_presence_frequency():
    ds = generate_dataset(small(200, num_classes=5), seed=3)
    freq = ds.labels().mean(axis=0)
    assert ((freq >= 0.1) & (freq <= 0.9)).all(), freq


@pytest.mark.parametrize("seed", range(3))
def test_mask_label_consistency_and_shape_count(seed):
    ds = generate_dataset(small(60, num_classes=8), seed=seed)
    for s in ds.samples:
        classes = set(np.unique(s.gt_mask).tolist()) - {0}
        assert classes == {c + 1 for c in np.flatnonzero(s.y_img)}
        assert 1 <= len(s.shapes) <= 3
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.image.shape == (64, 64, 3) and s.gt_mask.dtype == np.uint8


def test_two_tone_interiors_have_two_colours():
    ds = generate_dataset(small(40), seed=5)
    checked = 0
    for s in ds.samples:
        for shape in s.shapes:
            if shape.fill_style != "two-tone":
                continue
            region = s.image[s.gt_mask == shape.class_id + 1]
            assert len(np.unique(region.round(4), axis=0)) >= 2
            checked += 1
    assert checked > 10


def test_class_kind_bijection():
    ds = generate_dataset(small(30, num_classes=8), seed=0)
    pairs = {(sh.class_id, sh.shape_kind) for s in ds.samples for sh in s.shapes}
    kinds = {}
    for cid, kind in pairs:
        kinds.setdefault(cid, set()).add(kind)
    assert all(len(v) == 1 for v in kinds.values())
    assert len({next(iter(v)) for v in kinds.values()}) == len(kinds)


@pytest.mark.parametrize("size", [(62, 64), (64, 30)])
def test_stride_divisibility(size):
    with pytest.raises(ConfigError, match=f"{size[0]}x{size[1]}"):
        generate_dataset(DataConfig(num_samples=1, image_size=size), 0)


@pytest.mark.parametrize("L", [1, 9])
def test_class_count_range(L):
    with pytest.raises(ConfigError):
        generate_dataset(small(1, num_classes=L), 0)


def test_split_sizes():
    ds = generate_dataset(small(10), 0)
    assert tuple(map(len, split(ds, 0.8))) == (8, 2)
    one = generate_dataset(small(1), 0)
    assert tuple(map(len, split(one, 0.5))) == (1, 0)


def test_split_is_order_preserving_partition():
    ds = generate_dataset(small(200), 0)
    a, b = split(ds, 0.9)
    assert [id(s) for s in a.samples + b.samples] == [id(s) for s in ds.samples]
    ids_a, ids_b = {id(s) for s in a.samples}, {id(s) for s in b.samples}
    assert not ids_a & ids_b and len(ids_a | ids_b) == 200


@pytest.mark.parametrize("f", [0.0, 1.0, -0.2])
def test_split_fraction_range(f):
    with pytest.raises(ConfigError):
        split(generate_dataset(small(2), 0), f)


def test_disk_round_trip(tmp_path):
    ds = generate_dataset(small(6), seed=4)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.seed == 4 and back.class_names == ds.class_names and back.config == ds.config
    for sa, sb in zip(ds.samples, back.samples):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.gt_mask, sb.gt_mask)
        assert np.array_equal(sa.y_img, sb.y_img)
    manifest = (tmp_path / "d" / "manifest.txt").read_text()
    assert "config_hash = " in manifest and "seed = 4" in manifest

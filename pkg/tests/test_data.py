import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiedseg.data import (
    Sample,
    SynthSpec,
    augment,
    center_crop,
    generate_synthetic,
    load_image,
    make_label_vector,
    mirror,
    rasterize,
    read_dataset,
    read_pnm,
    save_image,
    shape_area,
    write_dataset,
    write_pnm,
)
from tiedseg.errors import ConfigError, ImageFormatError, InputError


def test_label_vectors():
    np.testing.assert_array_equal(make_label_vector([], "multi-label", 4), [1, 0, 0, 0])
    np.testing.assert_array_equal(make_label_vector([3, 1], "multi-label", 4), [1, 1, 0, 1])
    np.testing.assert_array_equal(make_label_vector([1], "binary", 2), [0, 1])
    with pytest.raises(InputError):
        make_label_vector([4], "multi-label", 4)
    with pytest.raises(InputError):
        make_label_vector([0, 1], "binary", 2)


@pytest.mark.parametrize("shape", ["disk", "square", "triangle", "ring"])
def test_rasterized_area_matches_continuous_area(shape):
    r = 20.0
    fp = rasterize(shape, 48.3, 47.6, r, 96)
    assert abs(fp.sum() - shape_area(shape, r)) / shape_area(shape, r) < 0.05


def test_area_formulas():
    assert shape_area("disk", 2.0) == pytest.approx(4 * math.pi)
    assert shape_area("square", 2.0) == pytest.approx(16.0)
    # equilateral triangle with circumradius r has side r*sqrt(3)
    side = 2.0 * math.sqrt(3)
    assert shape_area("triangle", 2.0) == pytest.approx(math.sqrt(3) / 4 * side**2)


def test_unknown_shape():
    with pytest.raises(ConfigError):
        rasterize("hexagon", 5, 5, 3, 10)


def test_synthetic_labels_match_masks():
    spec = SynthSpec(count=40, seed=3, image_size=64, scale=(6, 12))
    samples = generate_synthetic(spec)
    assert len({s.id for s in samples}) == 40
    for s in samples:
        assert s.image.shape == (1, 1, 64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        present = set(np.unique(s.mask).tolist()) - {0}
        np.testing.assert_array_equal(np.flatnonzero(s.label[1:]) + 1, sorted(present))
        assert s.label[0] == 1


def test_synthetic_is_deterministic():
    a = generate_synthetic(SynthSpec(count=5, seed=11, image_size=48, scale=(5, 9)))
    b = generate_synthetic(SynthSpec(count=5, seed=11, image_size=48, scale=(5, 9)))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


def test_binary_synthetic():
    spec = SynthSpec(count=30, seed=2, image_size=48, scale=(5, 9), shapes=["ring"], task="binary")
    for s in generate_synthetic(spec):
        assert s.label.sum() == 1
        assert s.label[1] == (s.mask.max() > 0)


def test_class_intensity_bands():
    spec = SynthSpec(count=20, seed=4, image_size=64, scale=(8, 12), noise=0.0, background=0.1,
                     class_intensity=[(0.3, 0.4), (0.6, 0.7), (0.9, 1.0)])
    for s in generate_synthetic(spec):
        for c, (lo, hi) in enumerate(spec.class_intensity, 1):
            vals = s.image[0, 0][s.mask == c]
            if vals.size:
                assert lo - 1 / 255 <= vals.min() and vals.max() <= hi + 1 / 255


def test_separation_allows_overlap():
    def touching(spec):
        n = 0
        for s in generate_synthetic(spec):
            m = s.mask
            # neighbouring pixels of two different foreground classes
            edge = (m[:, 1:] != m[:, :-1]) & (m[:, 1:] > 0) & (m[:, :-1] > 0)
            n += int(edge.any())
        return n

    base = dict(count=30, seed=9, image_size=96, scale=(12, 16), shapes=["disk", "disk", "disk"], objects_per_class=(1, 1), p_present=1.0)
    assert touching(SynthSpec(**base)) == 0
    close = SynthSpec(**base, separation=0.4)
    assert touching(close) > 0
    for s in generate_synthetic(close):
        np.testing.assert_array_equal(np.flatnonzero(s.label[1:]) + 1, sorted(set(np.unique(s.mask).tolist()) - {0}))


def test_bad_synth_spec():
    with pytest.raises(ConfigError):
        SynthSpec(class_intensity=[(0.1, 0.2)])
    with pytest.raises(ConfigError):
        SynthSpec(task="binary")
    with pytest.raises(ConfigError, match="cannot place"):
        generate_synthetic(SynthSpec(count=1, image_size=40, scale=(14, 15), p_present=1.0))
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            SynthSpec(separation=bad)


# ---- PNM ------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.booleans(), st.integers(0, 2**32 - 1))
def test_pnm_round_trip(tmp_path_factory, h, w, color, seed):
    px = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3) if color else (h, w), dtype=np.uint8)
    p = tmp_path_factory.mktemp("pnm") / "x.pnm"
    write_pnm(p, px)
    back = read_pnm(p)
    assert back.dtype == np.uint8 and back.tobytes() == px.tobytes() and back.shape == px.shape


def test_pnm_comment_header(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(read_pnm(p), [[7, 9]])


@pytest.mark.parametrize(
    "blob,offset",
    [
        (b"P2\n1 1\n255\n1", 0),
        (b"P5\n2 2\n65535\n" + b"\x00" * 8, None),
        (b"P5\n2 2\n255\n\x00\x00", None),
        (b"P5\nx 2\n255\n", 2),
    ],
)
def test_pnm_errors(tmp_path, blob, offset):
    p = tmp_path / "bad.pgm"
    p.write_bytes(blob)
    with pytest.raises(ImageFormatError) as err:
        read_pnm(p)
    if offset is not None:
        assert err.value.offset == offset


def test_write_pnm_rejects_float(tmp_path):
    with pytest.raises(InputError):
        write_pnm(tmp_path / "f.pgm", np.zeros((2, 2)))


def test_image_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).random((1, 3, 5, 6)) * 255) / 255
    save_image(tmp_path / "i.ppm", img)
    np.testing.assert_array_equal(load_image(tmp_path / "i.ppm"), img)


def test_dataset_round_trip(tmp_path):
    spec = SynthSpec(count=6, seed=5, image_size=32, scale=(4, 7))
    samples = generate_synthetic(spec)
    write_dataset(tmp_path, samples, spec.to_dict())
    back = read_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert a.id == b.id
        np.testing.assert_array_equal(a.label, b.label)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
    assert all(s.mask is None for s in read_dataset(tmp_path, with_masks=False))


# ---- augmentation -----------------------------------------------------------


def _sample(rng):
    return Sample(rng.random((1, 1, 6, 8)), np.array([1.0, 0.0]), rng.integers(0, 2, (6, 8)).astype(np.uint8), "s")


def test_augment_identities(rng):
    s = _sample(rng)
    same = augment(s, rng, crop_margin=0, allow_mirror=False)
    np.testing.assert_array_equal(same.image, s.image)
    twice = mirror(mirror(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)
    m = augment(s, rng, force_mirror=True)
    np.testing.assert_array_equal(m.image[0, 0], s.image[0, 0, :, ::-1])
    np.testing.assert_array_equal(m.mask, s.mask[:, ::-1])


def test_augment_crop_stays_aligned(rng):
    s = _sample(rng)
    s.mask = (s.image[0, 0] * 255).astype(np.uint8)
    for _ in range(20):
        out = augment(s, rng, crop_margin=2, allow_mirror=True)
        assert out.image.shape == (1, 1, 4, 6)
        np.testing.assert_array_equal((out.image[0, 0] * 255).astype(np.uint8), out.mask)


def test_center_crop(rng):
    s = _sample(rng)
    c = center_crop(s, 4, 4)
    np.testing.assert_array_equal(c.image, s.image[:, :, 1:5, 2:6])
    with pytest.raises(InputError):
        center_crop(s, 7, 4)
    with pytest.raises(InputError):
        augment(s, rng, crop_margin=6)

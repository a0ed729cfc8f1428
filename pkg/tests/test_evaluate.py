import hashlib

import numpy as np
import pytest

from oracles import tiny_config
from tiedseg.data import Sample, read_pnm
from tiedseg.errors import InputError
from tiedseg.evaluate import (
    IoUAccumulator,
    blend_heatmap,
    evaluate_dataset,
    export_heatmap,
    heat_ramp,
    iou,
    masks_from_maps,
    predict_mask,
    profile_from_activations,
    topk_activation_profile,
    write_profiles_csv,
)
from tiedseg import layers as L
from tiedseg.model import build, save_checkpoint
from tiedseg.tensor import make_rng


def _squares():
    a = np.zeros((8, 8), int)
    b = np.zeros((8, 8), int)
    a[0:4, 0:4] = 1
    b[0:4, 2:6] = 1
    return a, b


def test_iou_examples():
    a, b = _squares()
    assert iou(a, a, 2).per_class.tolist() == [1.0, 1.0]
    # half overlap of equal areas: 8 / (16 + 16 - 8)
    assert iou(a, b, 2).per_class[1] == pytest.approx(1 / 3)
    c = np.zeros((8, 8), int)
    c[4:8, 4:8] = 1
    assert iou(a, c, 2).per_class[1] == 0.0
    with pytest.raises(InputError):
        iou(a, np.zeros((4, 4), int), 2)


def test_iou_excludes_absent_classes():
    a, b = _squares()
    r = iou(a, b, 4)
    assert np.isnan(r.per_class[2]) and np.isnan(r.per_class[3])
    assert r.mean_iou == pytest.approx(np.mean(r.per_class[:2]))


def test_iou_symmetric(rng):
    for _ in range(20):
        p = rng.integers(0, 4, (10, 10))
        t = rng.integers(0, 4, (10, 10))
        np.testing.assert_array_equal(iou(p, t, 4).per_class, iou(t, p, 4).per_class)


def test_accumulator_pools_counts(rng):
    acc = IoUAccumulator(3)
    preds = [rng.integers(0, 3, (5, 5)) for _ in range(4)]
    truths = [rng.integers(0, 3, (5, 5)) for _ in range(4)]
    for p, t in zip(preds, truths):
        acc.add(p, t)
    whole = iou(np.stack(preds), np.stack(truths), 3)
    np.testing.assert_array_equal(acc.result().per_class, whole.per_class)
    r = acc.result()
    assert np.all(r.union >= r.intersection)


def test_masks_from_maps():
    assert not masks_from_maps(np.zeros((1, 2, 4, 4)), "binary").any()
    hot = np.zeros((1, 3, 2, 2))
    hot[0, 2, 0, 1] = hot[0, 1, 1, 0] = hot[0, 0, 0, 0] = hot[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(masks_from_maps(hot, "multi-label")[0], [[0, 2], [1, 0]])


def test_checker_pattern_from_logits():
    logits = np.zeros((1, 3, 4, 4))
    checker = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
    logits[0, 1][checker] = 8.0
    logits[0, 2][~checker] = 8.0
    grid = masks_from_maps(L.channel_softmax(logits), "multi-label")[0]
    np.testing.assert_array_equal(grid, np.where(checker, 1, 2))
    # a per-pixel constant across channels does not change the decision
    shifted = logits + np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    np.testing.assert_array_equal(masks_from_maps(L.channel_softmax(shifted), "multi-label")[0], grid)


def test_predict_mask_shapes_and_errors():
    net = build(tiny_config(), 2, make_rng(0))
    grid, maps, y = predict_mask(net, np.random.default_rng(1).random((2, 3, 16, 16)))
    assert grid.shape == (2, 16, 16) and maps.shape == (2, 3, 16, 16) and y.shape == (2, 3)
    with pytest.raises(InputError):
        predict_mask(net, np.zeros((1, 3, 8, 8)))


def test_eval_is_repeatable_and_read_only(tmp_path):
    net = build(tiny_config(), 1, make_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(net.store, path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    r = np.random.default_rng(2)
    samples = [Sample(r.random((1, 3, 16, 16)), np.array([1.0, 1.0, 0.0]), r.integers(0, 3, (16, 16)), f"s{i}") for i in range(3)]
    a = evaluate_dataset(net, samples)
    b = evaluate_dataset(net, samples)
    a.seg.write_csv(tmp_path / "a.csv")
    b.seg.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "id,class,intersection,union,iou"


def test_profiles():
    p = profile_from_activations(np.full((1, 2, 3, 3), 0.7), "x", 5)
    assert p.values.tolist() == [1.0] * 5
    p = profile_from_activations(np.arange(4.0), "x", 10)
    np.testing.assert_allclose(p.values, [1, 2 / 3, 1 / 3, 0])
    net = build(tiny_config(), 2, make_rng(0))
    img = np.random.default_rng(3).random((1, 3, 16, 16))
    prof = topk_activation_profile(net, img, "conv3", 20)
    assert len(prof.values) == 20 and np.all(np.diff(prof.values) <= 0)
    assert prof.values.min() >= 0 and prof.values.max() <= 1
    with pytest.raises(InputError):
        topk_activation_profile(net, img, "conv9", 5)


def test_profiles_csv(tmp_path):
    a = profile_from_activations(np.arange(5.0), "conv3", 3)
    b = profile_from_activations(np.arange(2.0), "deconv3", 3)
    write_profiles_csv(tmp_path / "p.csv", [a, b])
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "rank,conv3,deconv3" and len(rows) == 4


def test_heatmap_blend():
    gray = np.linspace(0, 1, 12).reshape(3, 4)
    zero = blend_heatmap(np.zeros_like(gray), gray)
    np.testing.assert_allclose(zero, np.repeat(gray[..., None], 3, axis=-1))
    one = blend_heatmap(np.ones_like(gray), gray)
    np.testing.assert_allclose(one, 0.5 * np.repeat(gray[..., None], 3, axis=-1) + 0.5 * np.array([1.0, 1.0, 0.0]))
    np.testing.assert_allclose(heat_ramp(np.array([0.0, 0.5, 1.0])), [[0, 0, 0], [1, 0, 0], [1, 1, 0]])


def test_export_heatmap_is_deterministic(tmp_path):
    r = np.random.default_rng(5)
    heat, gray = r.random((6, 7)), r.random((6, 7))
    export_heatmap(heat, gray, tmp_path / "a.ppm")
    export_heatmap(heat, gray, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert read_pnm(tmp_path / "a.ppm").shape == (6, 7, 3)

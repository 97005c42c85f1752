import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from fccdn.data import ChannelStats, DatasetManifest, ImagePair, compute_stats, gen_synthetic, write_pairs
from fccdn.exceptions import ConfigurationError, ShapeError
from fccdn.inference import (
    CLASS_PALETTE,
    ERROR_COLORS,
    FN,
    FP,
    TN,
    TP,
    Prediction,
    category_counts,
    error_categories,
    export_segmentations,
    predict,
    predict_manifest,
    predict_tiled,
    render_error_mask,
)
from fccdn.metrics import confusion
from fccdn.network import ModelOutputs, NetworkConfig, build_model

TINY = dict(width_multiplier=0.125, stage_depths=(1, 1, 1, 1))


class _Constant(nn.Module):
    """Translation-invariant model with constant outputs."""

    def __init__(self):
        super().__init__()
        self.cfg = NetworkConfig.fccdn(**TINY)

    def forward(self, t1, t2):
        full = torch.full_like(t1[:, :1], 0.25)
        return ModelOutputs(full + 0.5, full, full * 3)


class _Pointwise(nn.Module):
    """Per-pixel (1x1) model: exact under any tiling."""

    def __init__(self):
        super().__init__()
        self.cfg = NetworkConfig(backbone="ded", use_nl_fpn=False, **TINY)
        self.conv = nn.Conv2d(6, 3, 1)

    def forward(self, t1, t2):
        s = torch.sigmoid(self.conv(torch.cat([t1, t2], 1)))
        return ModelOutputs(s[:, :1], s[:, 1:2], s[:, 2:])


def _pair(size=64, seed=0):
    return gen_synthetic(1, size, seed=seed)[0]


def test_predict_shapes_and_threshold(tiny_model):
    pair = _pair()
    pred = predict(tiny_model, pair, compute_stats([pair]))
    assert pred.change_score.shape == (64, 64)
    s1, s2 = pred.seg_masks()
    assert s1.shape == s2.shape == (64, 64) and s1.dtype == bool


def test_threshold_boundary_positive():
    p = Prediction(np.array([[0.5, 0.4999]]), np.array([[0.5, 0.2]]), np.array([[0.7, 0.5]]))
    assert p.change_mask.tolist() == [[True, False]]
    assert [m.tolist() for m in p.seg_masks()] == [[[True, False]], [[True, True]]]


def test_identical_pair_identical_segmentations(tiny_model):
    pair = _pair()
    same = ImagePair(pair.t1, pair.t1.copy(), id="same")
    pred = predict(tiny_model, same, compute_stats([pair]))
    a, b = pred.seg_masks()
    assert np.array_equal(a, b)


def test_predict_deterministic(tiny_model):
    pair = _pair()
    stats = compute_stats([pair])
    a, b = predict(tiny_model, pair, stats), predict(tiny_model, pair, stats)
    assert np.array_equal(a.change_score, b.change_score)


def test_large_input(tiny_model):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (1024, 1024, 3)).astype(np.uint8)
    pred = predict(tiny_model, ImagePair(img, img.copy(), id="big"), ChannelStats((128.0,) * 3, (64.0,) * 3))
    assert pred.change_mask.shape == (1024, 1024)


def test_non_divisible_size_routes_to_tiling(tiny_model):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (72, 88, 3)).astype(np.uint8)
    pred = predict(tiny_model, ImagePair(img, img.copy()), ChannelStats.identity())
    assert pred.change_score.shape == (72, 88)


def test_tiled_single_tile_equals_whole(tiny_model):
    pair = _pair()
    stats = compute_stats([pair])
    whole = predict(tiny_model, pair, stats)
    tiled = predict_tiled(tiny_model, pair, stats, tile=64, overlap=0)
    assert np.array_equal(whole.change_score, tiled.change_score)


def test_tile_larger_than_image_falls_back(tiny_model):
    pair = _pair()
    stats = compute_stats([pair])
    assert np.array_equal(predict_tiled(tiny_model, pair, stats, tile=128).change_score,
                          predict(tiny_model, pair, stats).change_score)


def test_tile_must_divide_16(tiny_model):
    with pytest.raises(ConfigurationError):
        predict_tiled(tiny_model, _pair(), ChannelStats.identity(), tile=40)


def test_constant_model_tiling_exact():
    pair = _pair(96)
    stats = ChannelStats.identity()
    whole = predict(_Constant(), pair, stats)
    tiled = predict_tiled(_Constant(), pair, stats, tile=64, overlap=32)
    for name in ("change_score", "seg1_score", "seg2_score"):
        assert np.array_equal(getattr(whole, name), getattr(tiled, name))


def test_pointwise_model_tiling_exact():
    torch.manual_seed(0)
    pair = _pair(96)
    stats = compute_stats([pair])
    m = _Pointwise().eval()
    whole, tiled = predict(m, pair, stats), predict_tiled(m, pair, stats, tile=64, overlap=32)
    assert np.abs(whole.change_score - tiled.change_score).max() <= 1e-6


# ---------------------------------------------------------------- error masks

def test_error_mask_colours(tmp_path):
    ones, zeros = np.ones((4, 4), np.uint8), np.zeros((4, 4), np.uint8)
    assert (render_error_mask(ones, ones) == [255, 255, 255]).all()
    assert (render_error_mask(ones, zeros) == [255, 0, 0]).all()
    assert (render_error_mask(zeros, ones) == [0, 0, 255]).all()
    assert (render_error_mask(zeros, zeros) == [0, 0, 0]).all()
    render_error_mask(ones, zeros, tmp_path / "e.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "e.png")), np.full((4, 4, 3), [255, 0, 0], np.uint8))


def test_error_colours_bijective():
    assert len({tuple(c) for c in ERROR_COLORS}) == 4
    assert {TN, TP, FP, FN} == {0, 1, 2, 3}


def test_error_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        render_error_mask(np.ones((2, 2)), np.ones((3, 2)))


def test_categories_match_confusion(rng):
    for _ in range(100):
        p, t = rng.integers(0, 2, (17, 23)), rng.integers(0, 2, (17, 23))
        assert category_counts(error_categories(p, t)) == confusion(p, t)


# ---------------------------------------------------------------- export

def test_export_binary(tmp_path, tiny_model):
    pair = _pair()
    pred = predict(tiny_model, pair, compute_stats([pair]))
    paths = export_segmentations(pred, tmp_path, "abc")
    assert {p.name for p in paths.values()} == {"abc_change.png", "abc_seg1.png", "abc_seg2.png"}
    with Image.open(paths["seg1"]) as im:
        assert im.mode == "1"
        assert np.array_equal(np.asarray(im), pred.seg_masks()[0])


def test_export_multiclass(tmp_path):
    rng = np.random.default_rng(0)
    scores = rng.dirichlet(np.ones(4), (8, 8)).transpose(2, 0, 1)
    pred = Prediction(rng.random((8, 8)), scores, scores[::-1].copy())
    paths = export_segmentations(pred, tmp_path, "m")
    with Image.open(paths["seg1"]) as im:
        assert im.mode == "P"
        assert np.array_equal(np.asarray(im), scores.argmax(0))
        assert im.getpalette()[:6] == list(CLASS_PALETTE[0]) + list(CLASS_PALETTE[1])


def test_export_without_heads(tmp_path):
    with pytest.raises(ValueError):
        export_segmentations(Prediction(np.zeros((4, 4))), tmp_path, "x")


def test_predict_manifest(tmp_path, tiny_model):
    pairs = gen_synthetic(3, 32, seed=0)
    manifest = write_pairs(pairs, tmp_path / "data")
    report = predict_manifest(tiny_model, DatasetManifest.load(tmp_path / "data" / "manifest.jsonl"),
                              compute_stats(pairs), tmp_path / "out", render_errors=True)
    assert report is not None and 0 <= report.f1 <= 1
    for p in pairs:
        for suffix in ("change", "seg1", "seg2", "errors"):
            assert (tmp_path / "out" / f"{p.id}_{suffix}.png").exists()
    assert len(manifest) == 3

"""Whole-image and tiled prediction, error-mask rendering, mask export."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from PIL import Image

from .data import ChannelStats, DatasetManifest, ImagePair, load_pair, normalize_image, tile_windows, to_tensor
from .exceptions import ConfigurationError, ShapeError
from .losses import threshold
from .metrics import ConfusionCounts, MetricsReport, accumulate, compute_metrics
from .network import ChangeDetectionNet

TN, TP, FP, FN = 0, 1, 2, 3
ERROR_COLORS = np.array(
    [
        (0, 0, 0),        # TN black
        (255, 255, 255),  # TP white
        (255, 0, 0),      # FP red
        (0, 0, 255),      # FN blue
    ],
    dtype=np.uint8,
)

# Palette for multiclass segmentation PNGs: class k -> CLASS_PALETTE[k % len].
CLASS_PALETTE = np.array(
    [
        (255, 255, 255), (0, 0, 255), (128, 128, 128), (0, 128, 0),
        (0, 255, 0), (128, 0, 0), (255, 0, 0), (255, 255, 0),
    ],
    dtype=np.uint8,
)


@dataclass
class Prediction:
    """Score maps ``(H, W)`` (or ``(K, H, W)`` for multiclass seg) and masks."""

    change_score: np.ndarray
    seg1_score: Optional[np.ndarray] = None
    seg2_score: Optional[np.ndarray] = None

    @property
    def change_mask(self) -> np.ndarray:
        return self.change_score >= 0.5

    def seg_masks(self):
        if self.seg1_score is None:
            raise ValueError("model has no segmentation heads")
        if self.seg1_score.ndim == 2:
            return self.seg1_score >= 0.5, self.seg2_score >= 0.5
        return self.seg1_score.argmax(0), self.seg2_score.argmax(0)


def _forward(model: ChangeDetectionNet, t1: np.ndarray, t2: np.ndarray) -> Prediction:
    model.eval()
    with torch.no_grad():
        out = model(to_tensor(t1)[None], to_tensor(t2)[None])

    def np_(x, squeeze=True):
        if x is None:
            return None
        a = x[0].numpy().astype(np.float64)
        return a[0] if (squeeze and a.shape[0] == 1) else a

    return Prediction(np_(out.change), np_(out.seg1), np_(out.seg2))


def _needs_tiling(model: ChangeDetectionNet, h: int, w: int) -> bool:
    if h % 16 or w % 16:
        return True
    cfg = model.cfg
    if cfg.use_nl_fpn and cfg.nl_strides:
        s = min(cfg.nl_strides)
        return (h // s) * (w // s) > cfg.nl_max_positions
    return False


def _max_tile(model: ChangeDetectionNet) -> int:
    cfg = model.cfg
    if not (cfg.use_nl_fpn and cfg.nl_strides):
        return 512
    s = min(cfg.nl_strides)
    side = int(np.sqrt(cfg.nl_max_positions)) * s
    return max(16, min(512, side - side % 16))


def predict(model: ChangeDetectionNet, pair: ImagePair, stats: ChannelStats) -> Prediction:
    """Normalise and run the network on a whole pair.

    Sizes not divisible by 16, or too large for the non-local blocks, are
    routed to ``predict_tiled``.
    """
    h, w = pair.size
    if _needs_tiling(model, h, w):
        tile = min(_max_tile(model), h - h % 16, w - w % 16)
        if tile < 16:
            raise ShapeError(f"image {h}x{w} is smaller than the 16 px network granularity")
        return predict_tiled(model, pair, stats, tile=tile, overlap=tile // 2)
    return _forward(model, normalize_image(pair.t1, stats), normalize_image(pair.t2, stats))


def predict_tiled(model: ChangeDetectionNet, pair: ImagePair, stats: ChannelStats,
                  tile: int = 256, overlap: int = 64) -> Prediction:
    """Overlapping-window inference; scores in overlaps are averaged before thresholding."""
    if tile % 16:
        raise ConfigurationError(f"tile size {tile} is not divisible by 16")
    h, w = pair.size
    if tile > h or tile > w:
        return predict(model, pair, stats) if not _needs_tiling(model, h, w) else _raise_small(h, w, tile)
    t1 = normalize_image(pair.t1, stats)
    t2 = normalize_image(pair.t2, stats)
    sums: Dict[str, np.ndarray] = {}
    counts = np.zeros((h, w))
    for y, x in tile_windows(h, w, tile, overlap):
        p = _forward(model, t1[y:y + tile, x:x + tile], t2[y:y + tile, x:x + tile])
        for name in ("change_score", "seg1_score", "seg2_score"):
            s = getattr(p, name)
            if s is None:
                continue
            if name not in sums:
                sums[name] = np.zeros(s.shape[:-2] + (h, w))
            sums[name][..., y:y + tile, x:x + tile] += s
        counts[y:y + tile, x:x + tile] += 1
    return Prediction(**{k: v / counts for k, v in sums.items()})


def _raise_small(h, w, tile):
    raise ShapeError(f"tile {tile} does not fit image {h}x{w}")


def error_categories(pred, label) -> np.ndarray:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(label).astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and label {t.shape} differ")
    cat = np.full(p.shape, TN, dtype=np.uint8)
    cat[p & t] = TP
    cat[p & ~t] = FP
    cat[~p & t] = FN
    return cat


def render_error_mask(pred, label, path=None) -> np.ndarray:
    """RGB image: TP white, TN black, FP red, FN blue. Written as PNG when ``path`` is given."""
    rgb = ERROR_COLORS[error_categories(pred, label)]
    if path is not None:
        Image.fromarray(rgb).save(path, optimize=False)
    return rgb


def category_counts(categories: np.ndarray) -> ConfusionCounts:
    c = np.bincount(categories.ravel(), minlength=4)
    return ConfusionCounts(tp=int(c[TP]), fp=int(c[FP]), fn=int(c[FN]), tn=int(c[TN]))


def _save_mask(path: Path, mask: np.ndarray) -> None:
    if mask.dtype == bool:
        Image.fromarray(mask).convert("1").save(path, optimize=False)
    else:
        im = Image.fromarray(mask.astype(np.uint8), mode="P")
        im.putpalette(np.resize(CLASS_PALETTE, (256, 3)).ravel().tolist())
        im.save(path, optimize=False)


def export_segmentations(pred: Prediction, out_dir, pair_id: str) -> Dict[str, Path]:
    """Write ``{id}_change.png``, ``{id}_seg1.png`` and ``{id}_seg2.png``.

    Binary heads give 1-bit PNGs; multiclass heads give palette PNGs whose
    pixel values are class indices (colours from ``CLASS_PALETTE``).
    """
    if pred.seg1_score is None:
        raise ValueError("cannot export segmentations: model has no segmentation heads")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s1, s2 = pred.seg_masks()
    paths = {
        "change": out_dir / f"{pair_id}_change.png",
        "seg1": out_dir / f"{pair_id}_seg1.png",
        "seg2": out_dir / f"{pair_id}_seg2.png",
    }
    _save_mask(paths["change"], pred.change_mask)
    _save_mask(paths["seg1"], s1)
    _save_mask(paths["seg2"], s2)
    return paths


def predict_manifest(model: ChangeDetectionNet, manifest: DatasetManifest, stats: ChannelStats, out_dir,
                     render_errors: bool = False, tile: Optional[int] = None,
                     overlap: int = 32) -> Optional[MetricsReport]:
    """Predict every entry, write masks, and return change metrics when labels exist."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = ConfusionCounts()
    labelled = 0
    for entry in manifest.entries:
        pair = load_pair(entry, manifest.root)
        pred = predict_tiled(model, pair, stats, tile, overlap) if tile else predict(model, pair, stats)
        if pred.seg1_score is not None:
            export_segmentations(pred, out_dir, pair.id)
        else:
            _save_mask(out_dir / f"{pair.id}_change.png", pred.change_mask)
        if pair.change is not None:
            labelled += 1
            counts = accumulate(pred.change_mask, pair.change.astype(bool), counts)
            if render_errors:
                render_error_mask(pred.change_mask, pair.change, out_dir / f"{pair.id}_errors.png")
    return compute_metrics(counts) if labelled else None


def evaluate_segmentation(model: ChangeDetectionNet, pairs, stats: ChannelStats) -> MetricsReport:
    """Segmentation-branch metrics against ground-truth per-temporal masks,
    pooled over both branches, taking the better of the two global label flips."""
    same, flipped = ConfusionCounts(), ConfusionCounts()
    for pair in pairs:
        pred = predict(model, pair, stats)
        for mask, truth in zip(pred.seg_masks(), (pair.seg1, pair.seg2)):
            truth = truth.astype(bool)
            same = accumulate(mask, truth, same)
            flipped = accumulate(~mask, truth, flipped)
    a, b = compute_metrics(same), compute_metrics(flipped)
    return a if a.f1 >= b.f1 else b

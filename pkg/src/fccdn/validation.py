"""Input checks shared by the estimator and the CLI."""
from typing import List, Optional, Sequence

import numpy as np

from .data import ImagePair


def check_pairs(X, copy: bool = False) -> List[ImagePair]:
    """Coerce ``X`` to a list of :class:`ImagePair`.

    Accepts a sequence of ``ImagePair`` or an array ``(n, 2, H, W, C)``.
    Images must be 8-bit or convertible without loss.
    """
    if isinstance(X, ImagePair):
        X = [X]
    if isinstance(X, (list, tuple)) and all(isinstance(p, ImagePair) for p in X):
        pairs = list(X)
    else:
        arr = np.asarray(X)
        if arr.ndim == 4:
            arr = arr[..., None]
        if arr.ndim != 5 or arr.shape[1] != 2:
            raise ValueError(f"expected pairs of shape (n, 2, H, W, C), got {arr.shape}")
        pairs = [ImagePair(a[0], a[1], id=f"sample{i:05d}") for i, a in enumerate(arr)]
    if not pairs:
        raise ValueError("no image pairs given")
    for p in pairs:
        for img in (p.t1, p.t2):
            if img.ndim != 3:
                raise ValueError(f"{p.id}: images must be (H, W, C), got {img.shape}")
            if not np.all(np.isfinite(img)):
                raise ValueError(f"{p.id}: non-finite pixel values")
    if copy:
        pairs = [ImagePair(p.t1.copy(), p.t2.copy(), p.change, p.seg1, p.seg2, p.id) for p in pairs]
    return pairs


def check_label_maps(y, pairs: Sequence[ImagePair], name: str = "y", binary: bool = True) -> List[np.ndarray]:
    if len(y) != len(pairs):
        raise ValueError(f"{name} has {len(y)} maps for {len(pairs)} pairs")
    out = []
    for lab, p in zip(y, pairs):
        lab = np.asarray(lab)
        if lab.ndim == 3 and lab.shape[-1] == 1:
            lab = lab[..., 0]
        if lab.shape != p.size:
            raise ValueError(f"{name} map {lab.shape} does not match image size {p.size}")
        if binary and not np.isin(lab, (0, 1)).all():
            raise ValueError(f"{name} must contain only 0 and 1")
        out.append(lab.astype(np.uint8 if binary else np.int64))
    return out


def attach_labels(pairs: Sequence[ImagePair], y, seg_labels: Optional[Sequence] = None) -> List[ImagePair]:
    changes = check_label_maps(y, pairs)
    segs = (None, None)
    if seg_labels is not None:
        if len(seg_labels) != 2:
            raise ValueError("seg_labels must be a pair (labels_t1, labels_t2)")
        segs = tuple(check_label_maps(s, pairs, "seg_labels", binary=False) for s in seg_labels)
    out = []
    for i, (p, c) in enumerate(zip(pairs, changes)):
        out.append(ImagePair(p.t1, p.t2, c,
                             None if segs[0] is None else segs[0][i],
                             None if segs[1] is None else segs[1][i], p.id))
    return out

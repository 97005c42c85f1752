"""Image pairs, manifests, tiling, normalisation, augmentation, synthetic data."""
import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

SPLITS = ("train", "validation", "test")


@dataclass
class ImagePair:
    """Co-registered bitemporal images ``(H, W, C)`` plus optional labels ``(H, W)``."""

    t1: np.ndarray
    t2: np.ndarray
    change: Optional[np.ndarray] = None
    seg1: Optional[np.ndarray] = None
    seg2: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise ValueError(f"{self.id}: t1 {self.t1.shape} and t2 {self.t2.shape} differ")
        hw = self.t1.shape[:2]
        for name in ("change", "seg1", "seg2"):
            a = getattr(self, name)
            if a is not None and a.shape[:2] != hw:
                raise ValueError(f"{self.id}: {name} shape {a.shape} does not match images {hw}")

    @property
    def size(self) -> Tuple[int, int]:
        return self.t1.shape[0], self.t1.shape[1]

    def swapped(self) -> "ImagePair":
        return replace(self, t1=self.t2, t2=self.t1, seg1=self.seg2, seg2=self.seg1)


# --------------------------------------------------------------------------- stats

@dataclass
class ChannelStats:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def save(self, path) -> None:
        Path(path).write_text(
            "mean " + " ".join(repr(float(m)) for m in self.mean) + "\n"
            + "std " + " ".join(repr(float(s)) for s in self.std) + "\n"
        )

    @classmethod
    def load(cls, path) -> "ChannelStats":
        rows = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                key, *vals = line.split()
                rows[key] = tuple(float(v) for v in vals)
        return cls(rows["mean"], rows["std"])

    @classmethod
    def identity(cls, channels: int = 3) -> "ChannelStats":
        return cls((0.0,) * channels, (1.0,) * channels)


def compute_stats(pairs: Iterable[ImagePair]) -> ChannelStats:
    """Per-channel mean/std over both temporal images of every pair."""
    total = sq = None
    n = 0
    for p in pairs:
        for img in (p.t1, p.t2):
            x = img.reshape(-1, img.shape[-1]).astype(np.float64)
            total = x.sum(0) if total is None else total + x.sum(0)
            sq = (x**2).sum(0) if sq is None else sq + (x**2).sum(0)
            n += x.shape[0]
    if not n:
        raise ValueError("cannot compute statistics of an empty split")
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean**2, 0.0))
    return ChannelStats(tuple(mean.tolist()), tuple(std.tolist()))


def normalize_image(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("channel std must be positive")
    mean = np.asarray(stats.mean, dtype=np.float64)
    return ((img.astype(np.float64) - mean) / std).astype(np.float32)


def normalize(pair: ImagePair, stats: ChannelStats) -> ImagePair:
    return replace(pair, t1=normalize_image(pair.t1, stats), t2=normalize_image(pair.t2, stats))


# --------------------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    t1: str
    t2: str
    label: Optional[str] = None
    split: str = "train"
    seg1: Optional[str] = None
    seg2: Optional[str] = None
    window: Optional[Tuple[int, int, int]] = None  # (y, x, size)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.window is not None:
            d["window"] = list(self.window)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        if "window" in d:
            d["window"] = tuple(d["window"])
        return cls(**d)


@dataclass
class DatasetManifest:
    """Entries with paths relative to ``root``; one JSON record per line on disk."""

    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name], self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        Path(path).write_text("".join(e.to_json() + "\n" for e in self.entries))

    @classmethod
    def load(cls, path, root=None) -> "DatasetManifest":
        path = Path(path)
        entries = [ManifestEntry.from_json(l) for l in path.read_text().splitlines() if l.strip()]
        return cls(entries, Path(root) if root is not None else path.parent)

    def check_disjoint(self) -> None:
        seen: Dict[str, str] = {}
        for e in self.entries:
            if e.id in seen and seen[e.id] != e.split:
                raise ValueError(f"id {e.id} appears in splits {seen[e.id]} and {e.split}")
            seen[e.id] = e.split


def tile_origins(length: int, size: int, overlap: int) -> List[int]:
    """Window starts along one axis; the last window is anchored to the edge."""
    if not 0 <= overlap < size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < size, got {overlap} for size {size}")
    if size > length:
        raise ValueError(f"tile size {size} exceeds image extent {length}")
    stride = size - overlap
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return starts


def tile_windows(h: int, w: int, size: int, overlap: int) -> List[Tuple[int, int]]:
    return [(y, x) for y in tile_origins(h, size, overlap) for x in tile_origins(w, size, overlap)]


def crop_dataset(manifest: DatasetManifest, size: int, overlap: int) -> DatasetManifest:
    """Tile every entry into ``size`` windows with stride ``size - overlap``.

    Tiles reference the source files through ``window``; ids carry the origin.
    """
    out = []
    for e in manifest.entries:
        with Image.open(manifest.root / e.t1) as im:
            w, h = im.size
        for y, x in tile_windows(h, w, size, overlap):
            out.append(replace(e, id=f"{e.id}_y{y}_x{x}", window=(y, x, size)))
    return DatasetManifest(out, manifest.root)


def assign_splits(ids: Sequence[str], ratios: Sequence[float] = (7, 1, 2), seed: int = 0) -> Dict[str, str]:
    """Random split of ids in the given train:validation:test proportions."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    order = np.random.default_rng(seed).permutation(len(ids))
    bounds = np.floor(np.cumsum(ratios / ratios.sum()) * len(ids) + 1e-9).astype(int)
    out = {}
    for rank, idx in enumerate(order):
        out[ids[idx]] = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]
    return out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return (a > 127).astype(np.uint8) if a.max() > 1 else a.astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(img)).save(path, optimize=False)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(mask.astype(bool))).convert("1").save(path, optimize=False)


def load_pair(entry: ManifestEntry, root) -> ImagePair:
    root = Path(root)

    def crop(a):
        if a is None or entry.window is None:
            return a
        y, x, s = entry.window
        return a[y:y + s, x:x + s]

    def opt(p, reader):
        return None if p is None else crop(reader(root / p))

    return ImagePair(
        t1=crop(read_image(root / entry.t1)),
        t2=crop(read_image(root / entry.t2)),
        change=opt(entry.label, read_mask),
        seg1=opt(entry.seg1, read_mask),
        seg2=opt(entry.seg2, read_mask),
        id=entry.id,
    )


# --------------------------------------------------------------------------- augmentation

@dataclass
class AugmentationConfig:
    flip_p: float = 0.5
    transpose_p: float = 0.5
    rotate_p: float = 0.3
    rotate_limit: float = 45.0
    zoom_p: float = 0.3
    zoom_limit: float = 0.1
    hsv_p: float = 0.3
    hue_shift: float = 10.0
    sat_shift: float = 5.0
    val_shift: float = 10.0
    noise_p: float = 0.3
    noise_var: Tuple[float, float] = (10.0, 50.0)
    swap_p: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        self.noise_var = tuple(self.noise_var)
        for name in ("flip_p", "transpose_p", "rotate_p", "zoom_p", "hsv_p", "noise_p", "swap_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")

    @classmethod
    def disabled(cls, **kw) -> "AugmentationConfig":
        off = dict(flip_p=0, transpose_p=0, rotate_p=0, zoom_p=0, hsv_p=0, noise_p=0, swap_p=0)
        return cls(**{**off, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_var"] = list(self.noise_var)
        return d


@dataclass
class GeometricParams:
    flip: Optional[int] = None  # cv2 flip code: 0 vertical, 1 horizontal, -1 both
    transpose: bool = False
    angle: float = 0.0
    scale: float = 1.0

    @property
    def affine(self) -> bool:
        return self.angle != 0.0 or self.scale != 1.0


@dataclass
class PhotometricParams:
    hsv: Optional[Tuple[float, float, float]] = None
    noise_sigma: Optional[float] = None
    noise_seed: int = 0


@dataclass
class AugmentParams:
    geometric: GeometricParams
    photometric: Tuple[PhotometricParams, PhotometricParams]
    swap: bool = False


def sample_params(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    g = GeometricParams()
    if rng.random() < cfg.flip_p:
        g.flip = int(rng.choice([0, 1, -1]))
    if rng.random() < cfg.transpose_p:
        g.transpose = True
    if rng.random() < cfg.rotate_p:
        g.angle = float(rng.uniform(-cfg.rotate_limit, cfg.rotate_limit))
    if rng.random() < cfg.zoom_p:
        g.scale = float(rng.uniform(1 - cfg.zoom_limit, 1 + cfg.zoom_limit))
    photo = []
    for _ in range(2):
        p = PhotometricParams(noise_seed=int(rng.integers(2**31)))
        if rng.random() < cfg.hsv_p:
            p.hsv = (
                float(rng.uniform(-cfg.hue_shift, cfg.hue_shift)),
                float(rng.uniform(-cfg.sat_shift, cfg.sat_shift)),
                float(rng.uniform(-cfg.val_shift, cfg.val_shift)),
            )
        if rng.random() < cfg.noise_p:
            lo, hi = cfg.noise_var
            p.noise_sigma = math.sqrt(float(rng.uniform(lo, hi)))
        photo.append(p)
    return AugmentParams(g, (photo[0], photo[1]), swap=bool(rng.random() < cfg.swap_p))


def apply_geometric(a: np.ndarray, g: GeometricParams, is_label: bool = False) -> np.ndarray:
    """Apply flip, transpose, then rotation/zoom about the centre with reflect padding."""
    if a is None:
        return None
    out = a
    if g.flip is not None:
        out = cv2.flip(out, g.flip)
    if g.transpose:
        out = np.swapaxes(out, 0, 1)
    if g.affine:
        h, w = out.shape[:2]
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), g.angle, g.scale)
        interp = cv2.INTER_NEAREST if is_label else cv2.INTER_LINEAR
        out = cv2.warpAffine(np.ascontiguousarray(out), m, (w, h), flags=interp,
                             borderMode=cv2.BORDER_REFLECT_101)
    return np.ascontiguousarray(out)


def apply_photometric(img: np.ndarray, p: PhotometricParams) -> np.ndarray:
    out = img
    if p.hsv is not None:
        dh, ds, dv = p.hsv
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV).astype(np.float32)
        hsv[..., 0] = np.mod(hsv[..., 0] + dh, 180.0)
        hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0, 255)
        hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0, 255)
        out = cv2.cvtColor(np.rint(hsv).astype(np.uint8), cv2.COLOR_HSV2RGB)
    if p.noise_sigma is not None:
        noise = np.random.default_rng(p.noise_seed).normal(0.0, p.noise_sigma, out.shape)
        out = np.clip(np.rint(out.astype(np.float64) + noise), 0, 255).astype(np.uint8)
    return out


def augment(pair: ImagePair, cfg: AugmentationConfig, rng: np.random.Generator) -> ImagePair:
    """Random augmentation; geometry is shared by both images and all labels,
    colour and noise are drawn per temporal image."""
    params = sample_params(cfg, rng)
    return apply_params(pair, params)


def apply_params(pair: ImagePair, params: AugmentParams) -> ImagePair:
    g = params.geometric
    out = ImagePair(
        t1=apply_photometric(apply_geometric(pair.t1, g), params.photometric[0]),
        t2=apply_photometric(apply_geometric(pair.t2, g), params.photometric[1]),
        change=apply_geometric(pair.change, g, is_label=True),
        seg1=apply_geometric(pair.seg1, g, is_label=True),
        seg2=apply_geometric(pair.seg2, g, is_label=True),
        id=pair.id,
    )
    return out.swapped() if params.swap else out


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-sample generator independent of worker count and iteration order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


# --------------------------------------------------------------------------- torch dataset

def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


class PairDataset(Dataset):
    """Normalised tensors for training/evaluation, with optional augmentation."""

    def __init__(self, pairs: Sequence[ImagePair], stats: ChannelStats,
                 augmentation: Optional[AugmentationConfig] = None, seed: int = 0):
        self.pairs = list(pairs)
        self.stats = stats
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        pair = self.pairs[i]
        if self.augmentation is not None:
            pair = augment(pair, self.augmentation, sample_rng(self.seed, pair.id, self.epoch))
        item = {
            "t1": to_tensor(normalize_image(pair.t1, self.stats)),
            "t2": to_tensor(normalize_image(pair.t2, self.stats)),
            "index": torch.tensor(i),
        }
        for name in ("change", "seg1", "seg2"):
            a = getattr(pair, name)
            if a is not None:
                item[name] = torch.from_numpy(np.ascontiguousarray(a)).float().unsqueeze(0)
        return item


def load_pairs(manifest: DatasetManifest) -> List[ImagePair]:
    return [load_pair(e, manifest.root) for e in manifest.entries]


# --------------------------------------------------------------------------- synthetic data

def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([rng.uniform(60, 110), rng.uniform(90, 130), rng.uniform(50, 90)])
    tex = _smooth_field(rng, size, 6)[..., None] * 50 - 25
    fine = rng.normal(0, 6, (size, size, 1))
    return base + tex + fine


def gen_synthetic(n: int, size: int = 64, seed: int = 0) -> List[ImagePair]:
    """Textured ground with rectangular "buildings" that persist, appear or vanish.

    Returns pairs with change labels and the per-temporal building masks
    (the latter are ground truth for scoring segmentation only).
    """
    if size % 16:
        raise ValueError(f"size {size} is not divisible by 16")
    rng = np.random.default_rng(seed)
    pairs = []
    lo, hi = max(size // 10, 3), max(size // 3, 5)
    for i in range(n):
        ground = _background(rng, size)
        imgs = []
        masks = [np.zeros((size, size), np.uint8), np.zeros((size, size), np.uint8)]
        rects = []
        for _ in range(int(rng.integers(3, 7))):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, 2))
            y, x = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
            state = rng.choice(["both", "t1", "t2"], p=[0.4, 0.3, 0.3])
            roof = np.array([rng.uniform(170, 250)] * 3) + rng.uniform(-20, 20, 3)
            rects.append((y, x, h, w, str(state), roof))
        for t in range(2):
            img = ground + rng.uniform(-12, 12) + rng.normal(0, 4, ground.shape)
            for y, x, h, w, state, roof in rects:
                if state == "both" or state == f"t{t + 1}":
                    img[y:y + h, x:x + w] = roof + rng.normal(0, 5, (h, w, 3))
                    masks[t][y:y + h, x:x + w] = 1
            imgs.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        pairs.append(ImagePair(imgs[0], imgs[1], masks[0] ^ masks[1], masks[0], masks[1], id=f"syn{i:05d}"))
    return pairs


def dataset_digest(pairs: Sequence[ImagePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.id.encode())
        for a in (p.t1, p.t2, p.change, p.seg1, p.seg2):
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def write_pairs(pairs: Sequence[ImagePair], out_dir, splits: Optional[Dict[str, str]] = None) -> DatasetManifest:
    """Write ``<id>/{t1,t2,label,seg1,seg2}.png`` and return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        d = out_dir / p.id
        d.mkdir(exist_ok=True)
        write_image(d / "t1.png", p.t1)
        write_image(d / "t2.png", p.t2)
        e = ManifestEntry(p.id, f"{p.id}/t1.png", f"{p.id}/t2.png",
                          split=(splits or {}).get(p.id, "train"))
        if p.change is not None:
            write_mask(d / "label.png", p.change)
            e.label = f"{p.id}/label.png"
        if p.seg1 is not None:
            write_mask(d / "seg1.png", p.seg1)
            write_mask(d / "seg2.png", p.seg2)
            e.seg1, e.seg2 = f"{p.id}/seg1.png", f"{p.id}/seg2.png"
        entries.append(e)
    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest

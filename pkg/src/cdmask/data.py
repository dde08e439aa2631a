"""Bi-temporal dataset ingestion, tiling, augmentation and synthetic data.

On-disk layout::

    <root>/<split>/A/<name>.png       first epoch
    <root>/<split>/B/<name>.png       second epoch
    <root>/<split>/label/<name>.png   0/255 change mask

A flat ``<root>/{A,B,label}`` layout with ``<root>/<split>.txt`` name lists
is also accepted.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    t1: Path
    t2: Path
    label: Path
    split: str


class DatasetError(ValueError):
    pass


def _stems(folder: Path):
    return {p.stem: p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def _scan_dirs(base: Path, split: str, names=None):
    dirs = [base / "A", base / "B", base / "label"]
    missing = [d for d in dirs if not d.is_dir()]
    if missing:
        raise DatasetError(f"missing directories: {', '.join(map(str, missing))}")
    a, b, lab = (_stems(d) for d in dirs)
    wanted = sorted(names) if names is not None else sorted(set(a) | set(b) | set(lab))
    records, anomalies = [], []
    for name in wanted:
        absent = [kind for kind, table in (("A", a), ("B", b), ("label", lab)) if name not in table]
        if absent:
            anomalies.append(f"{split}/{name}: missing {', '.join(absent)}")
            continue
        records.append(SampleRecord(name, a[name], b[name], lab[name], split))
    return records, anomalies


def scan_dataset(root, split: str = "train") -> Tuple[List[SampleRecord], List[str]]:
    """List the samples of one split in lexicographic order.

    Returns ``(records, anomalies)``; incomplete triplets are reported in
    ``anomalies`` and skipped. Raises :class:`DatasetError` when nothing usable
    is found.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if (root / split / "A").is_dir():
        records, anomalies = _scan_dirs(root / split, split)
    elif (root / f"{split}.txt").is_file():
        names = [ln.strip() for ln in (root / f"{split}.txt").read_text().splitlines() if ln.strip()]
        records, anomalies = _scan_dirs(root, split, [Path(n).stem for n in names])
    else:
        raise DatasetError(f"no split {split!r} under {root}")
    for msg in anomalies:
        log.warning("dataset anomaly: %s", msg)
    if not records:
        raise DatasetError(f"split {split!r} under {root} has no complete samples")
    return records, anomalies


def read_image(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("RGB", "L"):
        img = img.convert("RGB")
    arr = np.array(img)
    return arr[..., None] if arr.ndim == 2 else arr


def binarize_label(label: np.ndarray) -> np.ndarray:
    """1 where the 8-bit luminance exceeds 127."""
    label = np.asarray(label)
    if label.ndim == 3 and label.shape[-1] == 1:
        label = label[..., 0]
    if label.ndim == 3:
        rgb = label[..., :3].astype(np.float64)
        # ITU-R 601 luma, as used by PIL's "L" conversion
        label = rgb @ np.array([0.299, 0.587, 0.114])
    return (label > 127).astype(np.uint8)


def load_sample(rec: SampleRecord):
    t1, t2 = read_image(rec.t1), read_image(rec.t2)
    label = binarize_label(read_image(rec.label))
    if not (t1.shape[:2] == t2.shape[:2] == label.shape):
        raise DatasetError(f"{rec.id}: image sizes differ {t1.shape[:2]}, {t2.shape[:2]}, {label.shape}")
    return t1, t2, label


def tile(t1, t2, label, size: int):
    """Non-overlapping ``size`` x ``size`` crops; partial edge tiles are dropped."""
    h, w = label.shape[:2]
    if size <= 0 or size > h or size > w:
        raise ValueError(f"tile size {size} does not fit a {h}x{w} image")
    out = []
    for y in range(0, h - size + 1, size):
        for x in range(0, w - size + 1, size):
            sl = (slice(y, y + size), slice(x, x + size))
            out.append((t1[sl], t2[sl], label[sl]))
    return out


def sample_seed(global_seed: int, sample_id: str, epoch: int = 0) -> int:
    digest = hashlib.sha256(f"{global_seed}:{sample_id}:{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def augment(t1, t2, label, seed: int):
    """Random joint flips (p=0.5 each axis) and Gaussian blur of both images (p=0.5).

    Geometric transforms are applied to the label too; blur never touches it.
    """
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        t1, t2, label = t1[:, ::-1], t2[:, ::-1], label[:, ::-1]
    if rng.random() < 0.5:
        t1, t2, label = t1[::-1], t2[::-1], label[::-1]
    if rng.random() < 0.5:
        sigma = rng.uniform(0.1, 2.0)
        t1 = _blur(t1, sigma)
        t2 = _blur(t2, sigma)
    return np.ascontiguousarray(t1), np.ascontiguousarray(t2), np.ascontiguousarray(label)


def _blur(img, sigma):
    out = gaussian_filter(img.astype(np.float32), sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 ``(H, W, C)`` -> float ``(C, H, W)`` normalized with mean 0.5, std 0.5."""
    x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).to(torch.float32) / 255.0
    return (x - 0.5) / 0.5


class ChangeDetectionDataset(torch.utils.data.Dataset):
    """Samples cached in memory; augmentation seeded per (seed, sample, epoch)."""

    def __init__(self, records: List[SampleRecord], train_augment=False, seed=0):
        self.records = list(records)
        self.train_augment = train_augment
        self.seed = seed
        self.epoch = 0
        self._cache = [load_sample(r) for r in self.records]

    def __len__(self):
        return len(self.records)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __getitem__(self, i):
        t1, t2, label = self._cache[i]
        rec = self.records[i]
        if self.train_augment:
            t1, t2, label = augment(t1, t2, label, sample_seed(self.seed, rec.id, self.epoch))
        return {
            "t1": to_tensor(t1),
            "t2": to_tensor(t2),
            "label": torch.from_numpy(np.ascontiguousarray(label)),
            "id": rec.id,
        }


def collate(items):
    return {
        "t1": torch.stack([it["t1"] for it in items]),
        "t2": torch.stack([it["t2"] for it in items]),
        "label": torch.stack([it["label"] for it in items]),
        "id": [it["id"] for it in items],
    }


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    size: int = 64
    counts: dict = field(default_factory=lambda: {"train": 64, "val": 16})
    min_shapes: int = 1
    max_shapes: int = 3
    kinds: Tuple[str, ...] = ("rectangle", "strip")
    jitter: float = 0.1
    grid: int = 4  # shape edges snap to multiples of this (the mask stride)
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if self.size < 16:
            raise ValueError("synthetic canvas must be at least 16 pixels")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        bad = set(self.kinds) - {"rectangle", "strip"}
        if bad or not self.kinds:
            raise ValueError(f"unsupported shape kinds: {sorted(bad) or 'none given'}")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        if self.grid < 1 or self.size % self.grid:
            raise ValueError("grid must be a positive divisor of size")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def random_shapes(spec: SyntheticSpec, rng: np.random.Generator) -> List[dict]:
    """Axis-aligned boxes ``{kind, y, x, h, w, mode}`` fully inside the canvas."""
    s = spec.size
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    g = spec.grid
    span = lambda lo, hi: g * int(rng.integers(-(-lo // g), max(-(-lo // g), hi // g) + 1))
    for _ in range(n):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        if kind == "rectangle":
            h = span(s // 8, s // 3)
            w = span(s // 8, s // 3)
        else:
            length = span(s // 2, s - 4)
            thick = span(max(4, s // 16), max(6, s // 8))
            h, w = (thick, length) if rng.random() < 0.5 else (length, thick)
        y = span(0, s - h)
        x = span(0, s - w)
        mode = "insert" if rng.random() < 0.5 else "delete"
        shapes.append({"kind": kind, "y": y, "x": x, "h": h, "w": w, "mode": mode})
    return shapes


def rasterize(shapes, size: int) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.uint8)
    for sh in shapes:
        label[sh["y"] : sh["y"] + sh["h"], sh["x"] : sh["x"] + sh["w"]] = 1
    return label


def _texture(rng, size, smooth):
    noise = rng.normal(size=(size, size, 3))
    field_ = gaussian_filter(noise, sigma=(smooth, smooth, 0))
    field_ /= field_.std() + 1e-12
    return field_


def generate_pair(spec: SyntheticSpec, rng: np.random.Generator):
    """One synthetic sample: ``(t1, t2, label, shapes)`` with uint8 images."""
    s = spec.size
    base = rng.uniform(60, 190, size=3)
    bg = base + 25 * _texture(rng, s, s / 10) + 6 * rng.normal(size=(s, s, 3))
    t1 = bg.copy()
    t2 = bg.copy()
    shapes = random_shapes(spec, rng)
    for sh in shapes:
        sl = (slice(sh["y"], sh["y"] + sh["h"]), slice(sh["x"], sh["x"] + sh["w"]))
        color = rng.uniform(0, 255, size=3)
        # keep the object visibly different from the local background
        while np.abs(color - base).max() < 70:
            color = rng.uniform(0, 255, size=3)
        patch = color + 8 * rng.normal(size=(sh["h"], sh["w"], 3))
        target = t2 if sh["mode"] == "insert" else t1
        target[sl] = patch
    gain = 1 + rng.uniform(-spec.jitter, spec.jitter)
    offset = 255 * rng.uniform(-spec.jitter, spec.jitter) / 2
    t2 = t2 * gain + offset
    label = rasterize(shapes, s)
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return to8(t1), to8(t2), label, shapes


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write the dataset in the A/B/label layout; returns a manifest dict."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    manifest = {"spec": asdict(spec), "samples": {}}
    for split in SPLITS:
        count = int(spec.counts.get(split, 0))
        if count <= 0:
            continue
        for sub in ("A", "B", "label"):
            (out_dir / split / sub).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            name = f"{split}_{i:05d}"
            t1, t2, label, shapes = generate_pair(spec, rng)
            Image.fromarray(t1).save(out_dir / split / "A" / f"{name}.png")
            Image.fromarray(t2).save(out_dir / split / "B" / f"{name}.png")
            Image.fromarray(label * 255).save(out_dir / split / "label" / f"{name}.png")
            entries.append({"id": name, "shapes": shapes})
        manifest["samples"][split] = entries
    manifest["spec"]["kinds"] = list(spec.kinds)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest

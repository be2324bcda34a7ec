"""Datasets: seeded synthetic shapes, directory ingestion and export."""

from __future__ import annotations

import colorsys
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from bannoise.errors import IngestionError, InputError
from bannoise.model import Batch

SPLITS = ("train", "val", "test")
RECORD_MAGIC = b"BANDS001"
# Record file layout: magic(8) | uint32 n, c, h, w, num_classes (little endian)
# followed by n records of uint8 label + c*h*w uint8 pixels in CHW order.
RECORD_HEADER = struct.Struct("<8s5I")


@dataclass
class DatasetHandle:
    """Disjoint train / val / test splits of [0,1] images.

    ``val`` is the defender's held-out clean pool and is never used to train
    models. ``ids`` records the global sample index of every row.
    """

    source: str
    num_classes: int
    image_shape: tuple[int, int, int]
    splits: dict[str, Batch]
    ids: dict[str, torch.Tensor]
    seed: int = 0
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.mean and len(self.splits.get("train", ())):
            x = self.splits["train"].inputs
            self.mean = x.mean(dim=(0, 2, 3)).tolist()
            self.std = x.std(dim=(0, 2, 3)).tolist()
        seen: set[int] = set()
        for name, ids in self.ids.items():
            s = set(ids.tolist())
            if seen & s:
                raise InputError(f"split {name} overlaps another split")
            seen |= s

    @property
    def train(self) -> Batch:
        return self.splits["train"]

    @property
    def val(self) -> Batch:
        return self.splits["val"]

    @property
    def test(self) -> Batch:
        return self.splits["test"]

    def defender_subset(self, count: int, seed: int) -> tuple[Batch, torch.Tensor]:
        """Sample ``count`` held-out clean samples; returns the batch and their global ids."""
        pool = self.val
        if count > len(pool):
            raise InputError(f"requested {count} defender samples, held-out pool has {len(pool)}")
        idx = torch.randperm(len(pool), generator=torch.Generator().manual_seed(seed))[:count]
        idx = idx.sort().values
        return pool.subset(idx), self.ids["val"][idx]

    def fraction_count(self, fraction: float) -> int:
        """Number of samples matching ``fraction`` of the training set, capped by the held-out pool."""
        return max(1, min(len(self.val), int(round(fraction * len(self.train)))))


# -- synthetic --------------------------------------------------------------


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    a, b = np.abs(u), np.abs(v)
    r = np.sqrt(u ** 2 + v ** 2)
    box = np.maximum(a, b)
    k = kind % 10
    if k == 0:
        return r <= 1
    if k == 1:
        return box <= 0.8
    if k == 2:
        return (v <= 0.8) & (v >= -0.9) & (a <= (v + 0.9) / 1.9)
    if k == 3:
        return ((a <= 0.3) & (b <= 1)) | ((b <= 0.3) & (a <= 1))
    if k == 4:
        return (r >= 0.55) & (r <= 1)
    if k == 5:
        return (b <= 0.35) & (a <= 1)
    if k == 6:
        return (a <= 0.35) & (b <= 1)
    if k == 7:
        return a + b <= 1
    if k == 8:
        return ((np.abs(u - v) <= 0.45) | (np.abs(u + v) <= 0.45)) & (box <= 1)
    return (box <= 1) & (box >= 0.6)


def _render(rng: np.random.Generator, labels: np.ndarray, num_classes: int, size: int,
            channels: int, hue_jitter: float) -> np.ndarray:
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = np.empty((n, channels, size, size))
    for i, y in enumerate(labels):
        bg = rng.uniform(0.05, 0.35, size=channels)
        img = bg[:, None, None] + rng.normal(0, 0.06, size=(channels, size, size))
        radius = rng.uniform(0.25, 0.36) * size
        cy, cx = rng.uniform(radius * 0.8, size - radius * 0.8, size=2)
        mask = _shape_mask(int(y), (xx - cx) / radius, (yy - cy) / radius)
        hue = (y / num_classes + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0)))
        colour = rgb[:channels] if channels == 3 else rgb.mean(keepdims=True)
        img = np.where(mask[None], colour[:, None, None] + rng.normal(0, 0.03, size=(channels, size, size)), img)
        out[i] = img
    return np.round(np.clip(out, 0, 1) * 255) / 255


def make_synthetic_dataset(classes: int = 10, per_class: int = 200, image_size: int = 16, seed: int = 0,
                           val_per_class: int | None = None, test_per_class: int | None = None,
                           channels: int = 3, hue_jitter: float = 0.02) -> DatasetHandle:
    """Coloured parametric shapes on noisy backgrounds, balanced across classes.

    Pixel values are 8-bit quantised so PNG export round-trips exactly.
    """
    if per_class < 50:
        raise InputError("per_class must be at least 50")
    if classes < 2:
        raise InputError("need at least two classes")
    val_per_class = val_per_class if val_per_class is not None else max(10, per_class // 4)
    test_per_class = test_per_class if test_per_class is not None else max(10, per_class // 4)
    rng = np.random.default_rng(seed)
    splits, ids = {}, {}
    offset = 0
    for name, count in zip(SPLITS, (per_class, val_per_class, test_per_class)):
        labels = np.repeat(np.arange(classes), count)
        rng.shuffle(labels)
        pixels = _render(rng, labels, classes, image_size, channels, hue_jitter)
        splits[name] = Batch(torch.from_numpy(pixels).float(), torch.from_numpy(labels).long())
        ids[name] = torch.arange(offset, offset + len(labels))
        offset += len(labels)
    return DatasetHandle("synthetic", classes, (channels, image_size, image_size), splits, ids, seed)


# -- directory ingestion ----------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError("cannot decode image", path) from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def _read_class_tree(root: Path) -> tuple[list[np.ndarray], list[int], list[str]]:
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            images.append(_read_png(f))
            labels.append(label)
    return images, labels, classes


def _stack(images: list[np.ndarray], labels: list[int], where: Path) -> Batch:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise IngestionError(f"inconsistent image shapes {sorted(shapes)}", where)
    return Batch(torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long))


def read_record_file(path: Path) -> tuple[Batch, int]:
    raw = path.read_bytes()
    if len(raw) < RECORD_HEADER.size:
        raise IngestionError("truncated record header", path)
    magic, n, c, h, w, num_classes = RECORD_HEADER.unpack_from(raw)
    if magic != RECORD_MAGIC:
        raise IngestionError("bad record magic", path)
    rec = 1 + c * h * w
    body = np.frombuffer(raw, dtype=np.uint8, offset=RECORD_HEADER.size)
    if body.size != n * rec:
        raise IngestionError(f"record file holds {body.size} bytes, expected {n * rec}", path)
    body = body.reshape(n, rec)
    labels = torch.from_numpy(body[:, 0].astype(np.int64))
    if n and int(labels.max()) >= num_classes:
        raise IngestionError(f"label {int(labels.max())} outside {num_classes} classes", path)
    x = torch.from_numpy(body[:, 1:].reshape(n, c, h, w).astype(np.float32) / 255.0)
    return Batch(x, labels), num_classes


def write_record_file(path: Path, data: Batch, num_classes: int) -> None:
    if num_classes > 256:
        raise InputError("record files store labels in one byte (at most 256 classes)")
    n, c, h, w = data.inputs.shape
    pixels = np.round(data.inputs.numpy() * 255).astype(np.uint8).reshape(n, -1)
    body = np.concatenate([data.labels.numpy().astype(np.uint8)[:, None], pixels], axis=1)
    path.write_bytes(RECORD_HEADER.pack(RECORD_MAGIC, n, c, h, w, num_classes) + body.tobytes())


def _random_splits(data: Batch, fractions, seed: int) -> dict[str, Batch]:
    perm = torch.randperm(len(data), generator=torch.Generator().manual_seed(seed))
    n_val = int(round(fractions[1] * len(data)))
    n_test = int(round(fractions[2] * len(data)))
    n_train = len(data) - n_val - n_test
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return {name: data.subset(p.sort().values) for name, p in zip(SPLITS, parts)}


def load_directory_dataset(path: str | Path, layout: str = "folders", seed: int = 0,
                           fractions=(0.8, 0.1, 0.1)) -> DatasetHandle:
    """Load class-subfolder PNGs or ``.bin`` record files.

    If ``path`` holds ``train/``, ``val/`` and ``test/`` (subfolders or
    ``<split>.bin`` records), those splits are used as-is; otherwise all
    samples are split by ``fractions`` under ``seed``.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError("dataset directory not found", root)
    if layout not in ("folders", "records"):
        raise InputError(f"unknown dataset layout {layout!r}")
    splits: dict[str, Batch] = {}
    num_classes = 0
    if layout == "folders":
        if all((root / s).is_dir() for s in SPLITS):
            for s in SPLITS:
                images, labels, classes = _read_class_tree(root / s)
                if not images:
                    raise IngestionError("no PNG images found", root / s)
                splits[s] = _stack(images, labels, root / s)
                num_classes = max(num_classes, len(classes))
        else:
            images, labels, classes = _read_class_tree(root)
            if not images:
                raise IngestionError("no PNG images found", root)
            num_classes = len(classes)
            splits = _random_splits(_stack(images, labels, root), fractions, seed)
    else:
        files = {s: root / f"{s}.bin" for s in SPLITS}
        if all(f.exists() for f in files.values()):
            for s, f in files.items():
                splits[s], num_classes = read_record_file(f)
        else:
            recs = sorted(root.glob("*.bin"))
            if not recs:
                raise IngestionError("no record files found", root)
            parts = [read_record_file(f) for f in recs]
            num_classes = max(k for _, k in parts)
            data = Batch(torch.cat([b.inputs for b, _ in parts]), torch.cat([b.labels for b, _ in parts]))
            splits = _random_splits(data, fractions, seed)
    shape = tuple(splits["train"].inputs.shape[1:])
    ids, offset = {}, 0
    for s in SPLITS:
        ids[s] = torch.arange(offset, offset + len(splits[s]))
        offset += len(splits[s])
    return DatasetHandle("directory", num_classes, shape, splits, ids, seed)


def export_directory(handle: DatasetHandle, path: str | Path, layout: str = "folders") -> Path:
    """Write all splits to disk in a layout ``load_directory_dataset`` reads back exactly."""
    from PIL import Image

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    width = len(str(handle.num_classes - 1))
    for s in SPLITS:
        data = handle.splits[s]
        if layout == "records":
            write_record_file(root / f"{s}.bin", data, handle.num_classes)
            continue
        for c in range(handle.num_classes):
            (root / s / f"class_{c:0{width}d}").mkdir(parents=True, exist_ok=True)
        pixels = np.round(data.inputs.numpy() * 255).astype(np.uint8)
        for i, (img, y) in enumerate(zip(pixels, data.labels.tolist())):
            arr = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
            Image.fromarray(arr).save(root / s / f"class_{y:0{width}d}" / f"{i:06d}.png")
    return root


def dataset_from_path_or_synthetic(spec: str | os.PathLike, **synthetic) -> DatasetHandle:
    """``synthetic`` or ``synthetic:<seed>`` builds shapes; anything else is a directory."""
    text = str(spec)
    if text.startswith("synthetic"):
        seed = int(text.split(":", 1)[1]) if ":" in text else synthetic.pop("seed", 0)
        return make_synthetic_dataset(seed=seed, **synthetic)
    root = Path(text)
    layout = "records" if any(root.glob("*.bin")) else "folders"
    return load_directory_dataset(root, layout)

"""Datasets, open-set splits, rotation augmentation and evaluation streams.

Pixels are float32 in ``[0, 1]`` with layout ``(N, C, H, W)``.  Known-class
labels are contiguous integers ``0..C-1``; open-set samples carry the
sentinel label ``C`` (the extra "unknown" slot of a ``C+1`` way problem).
"""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

DATASETS = ("SVHN", "CIFAR10", "TinyImageNet", "toy")
IMAGE_SIZES = {"SVHN": 32, "CIFAR10": 32, "TinyImageNet": 64, "toy": 16}
CHANNELS = {"SVHN": 3, "CIFAR10": 3, "TinyImageNet": 3, "toy": 1}
PIXEL_RANGE = (0.0, 1.0)


def _split_table() -> dict:
    text = resources.files("osad").joinpath("resources/splits.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class OpenSetSplit:
    dataset_id: str
    split_index: int
    known_classes: tuple[int, ...]
    open_classes: tuple[int, ...]
    num_dataset_classes: int

    def __post_init__(self):
        known, unknown = set(self.known_classes), set(self.open_classes)
        if known & unknown:
            raise ConfigError(f"known and open classes overlap: {sorted(known & unknown)}")
        if len(known) != len(self.known_classes):
            raise ConfigError("duplicate known classes")
        universe = set(range(self.num_dataset_classes))
        if not (known | unknown) <= universe:
            raise ConfigError("split references classes outside the dataset")

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def open_label(self) -> int:
        return self.num_known

    @property
    def label_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.known_classes)}

    @property
    def inverse_label_map(self) -> dict[int, int]:
        return dict(enumerate(self.known_classes))

    def relabel(self, original: np.ndarray) -> np.ndarray:
        """Map original class ids to known labels, open classes to the sentinel."""
        lut = np.full(self.num_dataset_classes, self.open_label, dtype=np.int64)
        for c, i in self.label_map.items():
            lut[c] = i
        return lut[np.asarray(original, dtype=np.int64)]


def load_split(dataset_id: str, split_index: int) -> OpenSetSplit:
    """Return the published known/open partition for ``dataset_id``."""
    table = _split_table()["datasets"]
    if dataset_id not in table:
        raise ConfigError(f"unknown dataset {dataset_id!r}; valid options: {', '.join(DATASETS)}")
    entry = table[dataset_id]
    key = str(split_index)
    if key not in entry["known"]:
        raise ConfigError(
            f"unknown split {split_index!r} for {dataset_id}; valid options: "
            f"{', '.join(sorted(entry['known']))}"
        )
    known = tuple(entry["known"][key])
    n = entry["num_classes"]
    unknown = tuple(c for c in range(n) if c not in set(known))
    return OpenSetSplit(dataset_id, int(split_index), known, unknown, n)


def class_names(dataset_id: str) -> list[str] | None:
    return _split_table()["datasets"][dataset_id].get("class_names")


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor
    labels: torch.Tensor
    rotation_labels: torch.Tensor | None = None
    pixel_range: tuple[float, float] = PIXEL_RANGE

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ShapeError(f"expected (batch, channels, height, width), got {tuple(self.pixels.shape)}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ShapeError("labels length must equal the batch dimension")
        lo, hi = self.pixel_range
        if self.pixels.numel() and (self.pixels.min() < lo or self.pixels.max() > hi):
            raise DataError(f"pixel values outside {self.pixel_range}")
        if self.rotation_labels is not None:
            r = self.rotation_labels
            if r.shape != self.labels.shape or (r.numel() and (r.min() < 0 or r.max() > 3)):
                raise DataError("rotation labels must be in {0,1,2,3}, one per item")

    def __len__(self) -> int:
        return self.pixels.shape[0]


def rotate_images(pixels: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Rotate each image counter-clockwise by ``90 * r[i]`` degrees."""
    if pixels.shape[-1] != pixels.shape[-2]:
        raise ShapeError(f"rotation needs square images, got {tuple(pixels.shape[-2:])}")
    r = torch.as_tensor(r, dtype=torch.long).reshape(-1)
    if r.numel() != pixels.shape[0]:
        raise ShapeError("one rotation per image is required")
    if r.numel() and (r.min() < 0 or r.max() > 3):
        raise DataError("rotations must be in {0,1,2,3}")
    out = pixels.clone()
    for k in range(1, 4):
        idx = (r == k).nonzero(as_tuple=True)[0]
        if idx.numel():
            out[idx] = torch.rot90(pixels[idx], k, dims=(-2, -1))
    return out


def rotate_batch(batch: ImageBatch, r_vector) -> ImageBatch:
    r = torch.as_tensor(r_vector, dtype=torch.long).reshape(-1)
    return ImageBatch(rotate_images(batch.pixels, r), batch.labels, r, batch.pixel_range)


# -- toy data ----------------------------------------------------------------

_GLYPHS = {
    0: ["X.....", "X.....", "X.....", "X.....", "X.....", "XXXXX."],
    1: ["XXXXXX", "..X...", "..X...", "..X...", "..X...", "..X..."],
    2: ["XXXXX.", "X.....", "XXXX..", "X.....", "X.....", "X....."],
    3: ["XXXX..", "X...X.", "XXXX..", "X.....", "X.....", "X....."],
}
TOY_SIZE = 16


def _glyph(cls: int) -> np.ndarray:
    return np.array([[ch == "X" for ch in row] for row in _GLYPHS[cls]], dtype=np.float32)


def make_toy_images(n_per_class: int, seed: int, size: int = TOY_SIZE,
                    contrast=(0.25, 0.45), noise: float = 0.06):
    """Synthesize the 4-class glyph set: random offset, scale, brightness and noise."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(len(_GLYPHS)):
        g = _glyph(cls)
        for _ in range(n_per_class):
            scale = rng.integers(1, 3)
            glyph = np.kron(g, np.ones((scale, scale), dtype=np.float32))
            h = glyph.shape[0]
            top, left = rng.integers(0, size - h + 1, size=2)
            background = rng.uniform(0.15, 0.4)
            img = np.full((size, size), background, dtype=np.float32)
            img[top:top + h, left:left + h] += glyph * rng.uniform(*contrast)
            img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    order = rng.permutation(len(labels))
    x = np.stack(images)[order][:, None]
    return x.astype(np.float32), np.asarray(labels, dtype=np.int64)[order]


def make_ood_fixture(n: int, seed: int, size: int = TOY_SIZE, channels: int = 1) -> np.ndarray:
    """Smooth random blobs: a stand-in out-of-distribution source with no glyph structure."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(n, channels, 4, 4)).astype(np.float32)
    x = torch.nn.functional.interpolate(torch.from_numpy(coarse), size=(size, size),
                                        mode="bilinear", align_corners=False)
    x = x.numpy() * 0.5 + 0.15
    x += rng.normal(0.0, 0.06, size=x.shape).astype(np.float32)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# -- on-disk datasets ----------------------------------------------------------

def _load_cifar10(root: Path, train: bool):
    base = root / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        path = base / name
        if not path.exists():
            raise DataError(f"CIFAR10 batch not found: {path}")
        with open(path, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d["labels"], dtype=np.int64))
    return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys)


def _load_svhn(root: Path, train: bool):
    from scipy.io import loadmat

    path = root / "svhn" / ("train_32x32.mat" if train else "test_32x32.mat")
    if not path.exists():
        raise DataError(f"SVHN file not found: {path}")
    d = loadmat(path)
    x = np.transpose(d["X"], (3, 2, 0, 1)).astype(np.float32) / 255.0
    y = d["y"].reshape(-1).astype(np.int64)
    y[y == 10] = 0
    return x, y


def _read_image(path: Path, size: int, mode: str = "resize") -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if mode == "crop":
            w, h = im.size
            left, top = max(0, (w - size) // 2), max(0, (h - size) // 2)
            im = im.crop((left, top, left + size, top + size))
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
        elif mode == "resize":
            im = im.resize((size, size), Image.BILINEAR)
        else:
            raise ConfigError(f"unknown preprocessing mode {mode!r}; valid options: crop, resize")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _load_tiny_imagenet(root: Path, train: bool):
    base = root / "tiny-imagenet-200"
    wnids_file = base / "wnids.txt"
    if not wnids_file.exists():
        raise DataError(f"TinyImageNet index not found: {wnids_file}")
    wnids = sorted(wnids_file.read_text().split())
    index = {w: i for i, w in enumerate(wnids)}
    items: list[tuple[Path, int]] = []
    if train:
        for w in wnids:
            items += [(p, index[w]) for p in sorted((base / "train" / w / "images").glob("*.JPEG"))]
    else:
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            parts = line.split("\t")
            if len(parts) >= 2:
                items.append((base / "val" / "images" / parts[0], index[parts[1]]))
    if not items:
        raise DataError(f"no TinyImageNet images under {base}")
    x = np.stack([_read_image(p, 64) for p, _ in items])
    return x, np.asarray([c for _, c in items], dtype=np.int64)


def load_image_folder(path, size: int, mode: str = "resize", channels: int = 3,
                      limit: int | None = None) -> np.ndarray:
    """Read every image under ``path`` (sorted, recursive) with crop or resize preprocessing."""
    path = Path(path)
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}
    files = sorted(p for p in path.rglob("*") if p.suffix.lower() in exts)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise DataError(f"no images found under {path}")
    x = np.stack([_read_image(p, size, mode) for p in files])
    if channels == 1:
        x = x.mean(axis=1, keepdims=True)
    return x.astype(np.float32)


@dataclass
class DataConfig:
    dataset: str = "toy"
    split: int = 1
    root: str | None = None
    cache_dir: str = ".osad_cache"
    val_fraction: float = 0.1
    seed: int = 0
    toy_train_per_class: int = 300
    toy_test_per_class: int = 100


def load_dataset(cfg: DataConfig, train: bool):
    """Raw ``(pixels, original_labels)`` for one partition of ``cfg.dataset``."""
    if cfg.dataset == "toy":
        n = cfg.toy_train_per_class if train else cfg.toy_test_per_class
        seed = 1000 + (0 if train else 1)
        cache = Path(cfg.cache_dir) / f"toy_{'train' if train else 'test'}_{n}_{seed}.npz"
        if cache.exists():
            with np.load(cache) as z:
                return z["x"], z["y"]
        x, y = make_toy_images(n, seed)
        try:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.savez(cache, x=x, y=y)
        except OSError as exc:
            logger.warning("could not cache toy data at %s: %s", cache, exc)
        return x, y
    if cfg.root is None:
        raise ConfigError("missing required key data.root")
    root = Path(cfg.root)
    loaders = {"CIFAR10": _load_cifar10, "SVHN": _load_svhn, "TinyImageNet": _load_tiny_imagenet}
    if cfg.dataset not in loaders:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; valid options: {', '.join(DATASETS)}")
    return loaders[cfg.dataset](root, train)


@dataclass
class OpenSetData:
    """Materialized partitions for one split; labels already relabeled."""

    split: OpenSetSplit
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_known(self) -> int:
        return self.split.num_known

    def partition(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown partition {name!r}; valid options: train, val, test")
        return getattr(self, f"{name}_x"), getattr(self, f"{name}_y")


def prepare_data(cfg: DataConfig) -> OpenSetData:
    """Load a dataset, apply its split, and carve a seeded validation hold-out.

    The training partition keeps known classes only.  Validation holds
    ``val_fraction`` of every class's training images, including open
    classes, so open-set validation streams are available.
    """
    split = load_split(cfg.dataset, cfg.split)
    x, y = load_dataset(cfg, train=True)
    tx, ty = load_dataset(cfg, train=False)
    rng = np.random.default_rng(cfg.seed)
    val_mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n_val = int(round(cfg.val_fraction * len(idx)))
        val_mask[rng.permutation(idx)[:n_val]] = True
    y_rel, ty_rel = split.relabel(y), split.relabel(ty)
    known = y_rel < split.open_label
    tr = ~val_mask & known
    return OpenSetData(
        split=split,
        train_x=x[tr], train_y=y_rel[tr],
        val_x=x[val_mask], val_y=y_rel[val_mask],
        test_x=tx, test_y=ty_rel,
        meta={"dataset": cfg.dataset, "split": cfg.split, "seed": cfg.seed},
    )


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int, shuffle: bool = False,
                    seed: int = 0) -> Iterator[ImageBatch]:
    order = np.random.default_rng(seed).permutation(len(y)) if shuffle else np.arange(len(y))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(torch.from_numpy(np.ascontiguousarray(x[idx])),
                         torch.from_numpy(np.ascontiguousarray(y[idx])))


def make_eval_stream(data: OpenSetData, partition: str, include_open: bool,
                     batch_size: int = 256, seed: int = 0, shuffle: bool = False) -> list[ImageBatch]:
    """Deterministic list of evaluation batches; open-set items carry the sentinel label."""
    if partition not in ("val", "test"):
        raise ConfigError(f"unknown partition {partition!r}; valid options: val, test")
    x, y = data.partition(partition)
    if not include_open:
        keep = y < data.split.open_label
        x, y = x[keep], y[keep]
    if len(y) == 0:
        raise DataError(f"partition {partition!r} is empty")
    return list(iterate_batches(x, y, batch_size, shuffle=shuffle, seed=seed))


def concat_batches(batches: Sequence[ImageBatch]) -> ImageBatch:
    return ImageBatch(torch.cat([b.pixels for b in batches]), torch.cat([b.labels for b in batches]))

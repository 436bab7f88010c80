"""Dataset ingestion, small-sample splits and standard augmentation.

Images are kept as uint8 ``(n, C, H, W)`` arrays in a :class:`DatasetManifest`
and converted to float tensors in [-1, 1] on demand.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .errors import (
    BindingError,
    CapacityError,
    ConfigurationError,
    IntegrityError,
    ValidationError,
)

log = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}
BUILTIN_DATASETS = ("digits32",)


@dataclass
class DatasetManifest:
    dataset_id: str
    images: np.ndarray
    labels: np.ndarray
    source: str = ""
    class_names: list[str] | None = None
    mean: tuple[float, ...] = field(init=False)
    std: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValidationError("images must be a uint8 array of shape (n, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ValidationError("one label per image required")
        present = np.unique(self.labels)
        if len(present) and (present[0] != 0 or present[-1] != len(present) - 1):
            raise ValidationError("label ids must be dense in [0, C)")
        scaled = self.images.astype(np.float64) / 255.0
        self.mean = tuple(scaled.mean(axis=(0, 2, 3)).round(6).tolist()) if len(scaled) else ()
        self.std = tuple(scaled.std(axis=(0, 2, 3)).round(6).tolist()) if len(scaled) else ()

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def tensor(self, indices=None) -> torch.Tensor:
        imgs = self.images if indices is None else self.images[np.asarray(indices)]
        return torch.from_numpy(imgs).float() / 127.5 - 1

    def subset_labels(self, indices) -> np.ndarray:
        return self.labels[np.asarray(indices)]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.dataset_id.encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ ingestion


def save_packed(manifest: DatasetManifest, path) -> None:
    np.savez_compressed(path, images=manifest.images, labels=manifest.labels,
                        dataset_id=np.array(manifest.dataset_id))


def load_packed(path, dataset_id: str | None = None) -> DatasetManifest:
    with np.load(path) as data:
        if "images" not in data or "labels" not in data:
            raise ValidationError(f"{path}: packed datasets need 'images' and 'labels' arrays")
        ds_id = dataset_id or (str(data["dataset_id"]) if "dataset_id" in data else Path(path).stem)
        return DatasetManifest(ds_id, data["images"], data["labels"], source=str(path))


def load_image_folder(root, size: int | None = None, dataset_id: str | None = None) -> DatasetManifest:
    """One sub-directory per class (sorted names -> ids 0..C-1)."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValidationError(f"{root} has no class sub-directories")
    images, labels = [], []
    for cid, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = Image.open(f).convert("RGB")
            if size is not None:
                img = img.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(img).transpose(2, 0, 1))
            labels.append(cid)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"images in {root} differ in size; pass size= to resize")
    return DatasetManifest(dataset_id or root.name, np.stack(images), np.array(labels),
                           source=str(root), class_names=classes)


def _digits32(part: str) -> DatasetManifest:
    """sklearn's 8x8 handwritten digits, upsampled to 3x32x32.

    Train/test halves come from a fixed stratified 50/50 partition.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.from_numpy(d.images / 16.0).float().unsqueeze(1)
    x = F.interpolate(x, size=(32, 32), mode="bilinear", align_corners=False)
    imgs = (x.clamp(0, 1) * 255).round().to(torch.uint8).repeat(1, 3, 1, 1).numpy()
    rng = np.random.default_rng(20200607)
    test = np.zeros(len(d.target), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(d.target == c)
        test[rng.choice(idx, len(idx) // 2, replace=False)] = True
    keep = test if part == "test" else ~test
    return DatasetManifest(f"digits32-{part}", imgs[keep], d.target[keep], source="sklearn.datasets.load_digits")


def load_dataset(source: str, part: str = "train") -> DatasetManifest:
    """Resolve a builtin id, a packed ``.npz`` file or an image folder."""
    if source in BUILTIN_DATASETS:
        if part not in ("train", "test"):
            raise ConfigurationError(f"unknown dataset part {part!r}")
        return _digits32(part)
    path = Path(source)
    if path.is_dir():
        return load_image_folder(path)
    if path.suffix == ".npz" and path.exists():
        return load_packed(path)
    raise ConfigurationError(f"cannot load dataset {source!r}: not a builtin ({', '.join(BUILTIN_DATASETS)}), "
                             "an existing .npz file, or a class-per-folder directory")


# ---------------------------------------------------------------------- splits


@dataclass
class SmallSampleSplit:
    dataset_id: str
    spc: int
    seed: int
    train_indices: np.ndarray
    class_histogram: dict[int, int]
    method: str = "seeded-stratified"

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)

    def body(self) -> dict:
        return {
            "version": SPLIT_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "spc": int(self.spc),
            "seed": int(self.seed),
            "method": self.method,
            "class_histogram": {str(k): int(v) for k, v in sorted(self.class_histogram.items())},
            "train_indices": [int(i) for i in self.train_indices],
        }

    @property
    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.body(), sort_keys=True).encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, SmallSampleSplit) and self.body() == other.body()


def _histogram(labels) -> dict[int, int]:
    vals, counts = np.unique(labels, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


def make_split(manifest: DatasetManifest, spc: int, seed: int, holdout=None) -> SmallSampleSplit:
    """Stratified sample of ``spc`` indices per class, without replacement.

    ``holdout`` indices (e.g. an evaluation set living in the same array)
    are never selected.
    """
    if spc < 1:
        raise ValidationError("spc must be >= 1")
    excluded = np.zeros(len(manifest), dtype=bool)
    if holdout is not None:
        excluded[np.asarray(holdout, dtype=np.int64)] = True
    chosen = []
    for c in range(manifest.num_classes):
        pool = np.flatnonzero((manifest.labels == c) & ~excluded)
        if len(pool) < spc:
            raise CapacityError(f"class {c} has {len(pool)} examples, fewer than spc={spc}")
        rng = rngs.numpy_stream(seed, f"split:{manifest.dataset_id}", c)
        chosen.append(rng.choice(pool, spc, replace=False))
    idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    return SmallSampleSplit(manifest.dataset_id, spc, seed, idx, _histogram(manifest.labels[idx]))


def import_split(manifest: DatasetManifest, indices, spc: int, seed: int = -1) -> SmallSampleSplit:
    """Wrap a published index list; validated like a loaded split."""
    split = SmallSampleSplit(manifest.dataset_id, spc, seed, np.sort(np.asarray(indices)),
                             _histogram(manifest.labels[np.asarray(indices)]), method="imported")
    validate_split(split, manifest)
    return split


def validate_split(split: SmallSampleSplit, manifest: DatasetManifest | None = None) -> None:
    idx = split.train_indices
    if len(np.unique(idx)) != len(idx):
        raise ValidationError("split contains duplicate indices")
    if any(v != split.spc for v in split.class_histogram.values()):
        raise ValidationError("split histogram is not flat at spc")
    if sum(split.class_histogram.values()) != len(idx):
        raise ValidationError("split histogram disagrees with the index count")
    if manifest is not None:
        if manifest.dataset_id != split.dataset_id:
            raise BindingError(f"split belongs to {split.dataset_id!r}, not {manifest.dataset_id!r}")
        if len(idx) and (idx.min() < 0 or idx.max() >= len(manifest)):
            raise ValidationError("split indices fall outside the dataset")
        if _histogram(manifest.labels[idx]) != split.class_histogram:
            raise ValidationError("split histogram disagrees with the dataset labels")


def save_split(split: SmallSampleSplit, path) -> None:
    body = split.body()
    body["checksum"] = split.checksum
    Path(path).write_text(json.dumps(body, indent=1) + "\n")


def load_split(path, manifest: DatasetManifest | None = None) -> SmallSampleSplit:
    try:
        body = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read split file {path}: {exc}") from exc
    if body.get("version") != SPLIT_FORMAT_VERSION:
        raise IntegrityError(f"split format version {body.get('version')!r} is not {SPLIT_FORMAT_VERSION}")
    try:
        split = SmallSampleSplit(
            body["dataset_id"], body["spc"], body["seed"], body["train_indices"],
            {int(k): v for k, v in body["class_histogram"].items()}, body.get("method", "seeded-stratified"),
        )
        stored = body["checksum"]
    except KeyError as exc:
        raise IntegrityError(f"split file {path} lacks field {exc}") from exc
    validate_split(split)
    if split.checksum != stored:
        raise IntegrityError(f"split file {path} failed its checksum")
    if manifest is not None:
        validate_split(split, manifest)
    return split


# ---------------------------------------------------------------- augmentation


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def standard_augment(image: torch.Tensor, rng: np.random.Generator, *, pad: int = 4,
                     crop_size: int | None = None, high_res: bool = False, flip: bool | None = None,
                     fill: float = -1.0) -> torch.Tensor:
    """Random horizontal flip (p=0.5) plus random crop.

    Small images: pad by ``pad`` then crop back to the native size.
    ``high_res``: resize the short side to 256, then crop ``crop_size``
    (default 224).  ``flip`` forces the flip decision when not ``None``.
    """
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    if do_flip:
        image = hflip(image)
    if high_res:
        crop = crop_size or 224
        h, w = image.shape[-2:]
        scale = 256 / min(h, w)
        size = (max(crop, round(h * scale)), max(crop, round(w * scale)))
        image = F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)[0]
    else:
        crop = crop_size or image.shape[-1]
        if pad:
            image = F.pad(image, (pad, pad, pad, pad), value=fill)
    h, w = image.shape[-2:]
    top = int(rng.integers(h - crop + 1))
    left = int(rng.integers(w - crop + 1))
    return image[..., top:top + crop, left:left + crop]


def standard_augment_batch(images: torch.Tensor, rng: np.random.Generator, **kwargs) -> torch.Tensor:
    return torch.stack([standard_augment(im, rng, **kwargs) for im in images])

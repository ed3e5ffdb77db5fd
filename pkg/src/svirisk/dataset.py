"""Labeled image manifests, train/val/test splitting and image preprocessing."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224
SOURCE_SIZE = 512
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValidationError("normalization std must be positive")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0
    stratify: bool = False
    by_neighborhood: bool = False

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split fractions {fracs} must be non-negative and sum to 1")


@dataclass
class ManifestEntry:
    image_path: str
    label: int
    code: str
    lat: float
    lon: float
    capture_month: int | None = None
    split: str | None = None
    pano_id: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Manifest:
    entries: list
    class_counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)


def build_manifest(acquisition_log, records) -> Manifest:
    """One entry per fetched image, labeled with its neighborhood's risk class.

    ``acquisition_log`` rows need ``code``, ``image_path``, ``lat``, ``lon``
    and ``status``; only rows with status ``fetched`` become entries.
    """
    classes = {r.code: r.risk_class for r in records}
    entries = []
    for row in acquisition_log:
        if row.get("status") != "fetched":
            continue
        code = row["code"]
        if code not in classes:
            raise ValidationError(f"image {row.get('image_path')} references unknown neighborhood {code!r}")
        month = row.get("capture_month")
        if month is None and row.get("capture_date"):
            month = int(str(row["capture_date"]).split("-")[1])
        entries.append(ManifestEntry(
            image_path=row["image_path"], label=classes[code], code=code,
            lat=float(row["lat"]), lon=float(row["lon"]), capture_month=month, pano_id=row.get("pano_id"),
        ))
    counts = Counter(e.label for e in entries)
    return Manifest(entries, {c: counts.get(c, 0) for c in range(4)})


def split_sizes(n: int, spec: SplitSpec) -> tuple:
    n_val = math.floor(n * spec.val_frac)
    n_test = math.floor(n * spec.test_frac)
    return n - n_val - n_test, n_val, n_test


def _assign(indices, spec, rng):
    perm = np.asarray(indices)[rng.permutation(len(indices))]
    n_train, n_val, _ = split_sizes(len(perm), spec)
    out = {}
    for pos, i in enumerate(perm):
        out[int(i)] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
    return out


def split_manifest(entries, spec: SplitSpec = SplitSpec()) -> list:
    """Return copies of ``entries`` with ``split`` set.

    Default is a uniform image-level partition with floor-sized val/test sets
    and the remainder in train. ``stratify`` applies the same rule within each
    class; ``by_neighborhood`` keeps all images of a neighborhood together
    (sizes then follow the group boundaries approximately).
    """
    entries = list(entries)
    rng = np.random.default_rng(spec.seed)
    if spec.by_neighborhood:
        codes = sorted({e.code for e in entries})
        group_split = _assign(range(len(codes)), spec, rng)
        by_code = {c: group_split[i] for i, c in enumerate(codes)}
        return [replace(e, split=by_code[e.code]) for e in entries]
    if spec.stratify:
        assign = {}
        for label in sorted({e.label for e in entries}):
            idx = [i for i, e in enumerate(entries) if e.label == label]
            assign.update(_assign(idx, spec, rng))
    else:
        assign = _assign(range(len(entries)), spec, rng)
    return [replace(e, split=assign[i]) for i, e in enumerate(entries)]


def tuning_subsets(entries, seed: int, train_frac: float = 0.30, val_frac: float = 0.10) -> tuple:
    """Disjoint random subsets (default 30% / 10%) of ``entries`` for hyperparameter search."""
    entries = list(entries)
    perm = np.random.default_rng(seed).permutation(len(entries))
    n_tr = math.floor(len(entries) * train_frac)
    n_va = math.floor(len(entries) * val_frac)
    return [entries[i] for i in perm[:n_tr]], [entries[i] for i in perm[n_tr:n_tr + n_va]]


def _to_float(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def normalize(chw: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return (chw - mean) / std


def denormalize(chw, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return np.asarray(chw, dtype=np.float64) * std + mean


def crop_offsets(rng: np.random.Generator, source: int = SOURCE_SIZE, size: int = INPUT_SIZE) -> tuple:
    top, left = rng.integers(0, source - size + 1, size=2)
    return int(top), int(left)


def preprocess_train(image, rng: np.random.Generator, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Random 224x224 crop of a 512x512 image, scaled to [0, 1] and normalized; returns CHW float32."""
    arr = _to_float(image)
    if arr.shape[:2] != (SOURCE_SIZE, SOURCE_SIZE):
        raise ValidationError(f"training images must be {SOURCE_SIZE}x{SOURCE_SIZE}, got {arr.shape[:2]}")
    top, left = crop_offsets(rng)
    crop = arr[top:top + INPUT_SIZE, left:left + INPUT_SIZE].transpose(2, 0, 1)
    return normalize(crop, spec).astype(np.float32)


def resize_bilinear(chw: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    if chw.shape[1:] == (size, size):
        return chw
    t = torch.from_numpy(np.ascontiguousarray(chw))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].numpy()


def preprocess_eval(image, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Bilinear resize of the full image to 224x224, then normalization; returns CHW float32."""
    chw = _to_float(image).transpose(2, 0, 1)
    return normalize(resize_bilinear(chw), spec).astype(np.float32)


class ManifestDataset(torch.utils.data.Dataset):
    """Torch dataset over manifest entries; images are loaded from ``root / image_path``.

    Training mode draws crop offsets from a generator seeded per (epoch, index)
    so runs are reproducible regardless of worker scheduling.
    """

    def __init__(self, entries, root, train: bool = False, seed: int = 0, cache: bool = False):
        self.entries = list(entries)
        self.root = Path(root)
        self.train = train
        self.seed = seed
        self.epoch = 0
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _image(self, i):
        from .svi_client import load_image

        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = load_image(self.root / self.entries[i].image_path)
        if self._cache is not None:
            self._cache[i] = img
        return img

    def __getitem__(self, i):
        img = self._image(i)
        if self.train:
            rng = np.random.default_rng([self.seed, self.epoch, i])
            x = preprocess_train(img, rng)
        else:
            x = preprocess_eval(img)
        return torch.from_numpy(x), int(self.entries[i].label)


def read_manifest(path) -> list:
    from .artifacts import read_jsonl

    return [ManifestEntry.from_dict(r) for r in read_jsonl(path)[1]]


def write_manifest(entries, path, meta=None) -> None:
    from .artifacts import write_jsonl

    write_jsonl(path, (e.to_dict() for e in entries), meta=meta)

"""Corpus ingestion, stratified splits, normalization and geometric augmentation.

The corpus is a directory of class folders (``<root>/<ClassName>/*.jpg``).
Generated images live in the same layout as PNG files and are merged into the
training split only, so validation accuracy is always measured on real images.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .validation import (
    CLASSIFIER_IMAGE_SIZE,
    GAN_IMAGE_SIZE,
    check_fraction,
    check_uint8_images,
)

logger = logging.getLogger(__name__)

EUROSAT_CLASSES: tuple[str, ...] = (
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
)

SOURCES = ("real", "gan_dcgan", "gan_wgan_gp")
SPLITS = ("train", "val")
IMAGE_SUFFIXES = {".jpg": "jpg", ".jpeg": "jpg", ".png": "png"}

# ImageNet channel statistics used by the torchvision pretrained backbones.
BACKBONE_MEAN = (0.485, 0.456, 0.406)
BACKBONE_STD = (0.229, 0.224, 0.225)

_GENERATED_NAME = re.compile(r"^(?P<label>.+)_(?P<kind>dcgan|wgan_gp)_\d+$")


def source_for_kind(gan_kind: str) -> str:
    kind = gan_kind.replace("-", "_")
    tag = f"gan_{kind}"
    if tag not in SOURCES:
        raise ValueError(f"unknown GAN kind {gan_kind!r}")
    return tag


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: str
    source: str = "real"
    format: str = "jpg"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        expected = "jpg" if self.source == "real" else "png"
        if self.format != expected:
            raise ValueError(
                f"{self.path}: source {self.source!r} requires {expected} files, "
                f"got {self.format}"
            )


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable catalogue of labelled images and their split membership.

    ``split_assignment`` maps record paths to ``"train"`` or ``"val"``; it is
    empty until :func:`split` has been applied.
    """

    records: tuple[ImageRecord, ...]
    class_set: tuple[str, ...] = EUROSAT_CLASSES
    split_assignment: Mapping[str, str] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_set", tuple(self.class_set))
        object.__setattr__(
            self, "split_assignment", MappingProxyType(dict(self.split_assignment))
        )
        unknown = {r.label for r in self.records} - set(self.class_set)
        if unknown:
            raise ValueError(f"labels outside the class set: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.label] = counts.get(r.label, 0) + 1
        return counts

    @property
    def classes(self) -> list[str]:
        """Class names present in the index, in class-set order."""
        present = self.class_counts
        return [c for c in self.class_set if c in present]

    @property
    def is_split(self) -> bool:
        return bool(self.split_assignment)

    def split_of(self, record: ImageRecord) -> str:
        return self.split_assignment[record.path]

    def records_in(self, split_name: str) -> list[ImageRecord]:
        if split_name not in SPLITS:
            raise ValueError(f"unknown split {split_name!r}")
        if not self.is_split:
            raise ValueError("index has not been split yet")
        return [r for r in self.records if self.split_assignment[r.path] == split_name]

    def with_label(self, label: str) -> list[ImageRecord]:
        return [r for r in self.records if r.label == label]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for split_name in self.split_assignment.values():
            counts[split_name] += 1
        return counts

    def label_indices(self, records: Iterable[ImageRecord]) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_set)}
        return np.array([lookup[r.label] for r in records], dtype=np.int64)


def _label_from_filename(stem: str, class_set: Sequence[str]) -> str | None:
    # longest match first so "PermanentCrop" never resolves to a shorter prefix
    for name in sorted(class_set, key=len, reverse=True):
        if stem.startswith(name):
            return name
    return None


def _make_record(path: Path, label: str) -> ImageRecord:
    fmt = IMAGE_SUFFIXES[path.suffix.lower()]
    if fmt == "jpg":
        return ImageRecord(str(path), label, "real", "jpg")
    match = _GENERATED_NAME.match(path.stem)
    if match is None:
        raise ValueError(
            f"{path}: PNG files must be generated images named "
            "<class>_<gan_kind>_<index>.png"
        )
    return ImageRecord(str(path), label, source_for_kind(match["kind"]), "png")


def _is_decodable(path: str) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError):
        return False


def scan_dataset(
    root: str | Path,
    class_set: Sequence[str] = EUROSAT_CLASSES,
    verify: bool = True,
    n_jobs: int = 1,
) -> DatasetIndex:
    """Build a :class:`DatasetIndex` from a class-foldered image directory.

    Labels come from the parent folder name. A flat directory of files is
    also accepted, in which case the label is parsed from the filename prefix
    (``AnnualCrop_123.jpg``). Records are ordered lexicographically by path.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_set = tuple(class_set)

    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    pairs: list[tuple[Path, str]] = []
    if subdirs:
        unknown = [d.name for d in subdirs if d.name not in class_set]
        if unknown:
            raise ValueError(f"directories not in the class set: {', '.join(unknown)}")
        for d in subdirs:
            files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise ValueError(f"class folder {d} contains no images")
            pairs.extend((f, d.name) for f in files)
    else:
        for f in sorted(root.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            label = _label_from_filename(f.stem, class_set)
            if label is None:
                raise ValueError(f"cannot infer a class label from filename {f.name}")
            pairs.append((f, label))
        if not pairs:
            raise ValueError(f"no images found under {root}")

    pairs.sort(key=lambda p: str(p[0]))
    records = [_make_record(path, label) for path, label in pairs]

    if verify:
        paths = [r.path for r in records]
        if n_jobs > 1:
            with ThreadPoolExecutor(n_jobs) as pool:
                ok = list(pool.map(_is_decodable, paths))
        else:
            ok = [_is_decodable(p) for p in paths]
        bad = [p for p, good in zip(paths, ok) if not good]
        if bad:
            raise ValueError(f"undecodable image files: {', '.join(bad)}")

    logger.info("indexed %d images under %s", len(records), root)
    return DatasetIndex(tuple(records), class_set)


def split(index: DatasetIndex, ratio: float = 0.75, seed: int = 0) -> DatasetIndex:
    """Stratified train/validation assignment.

    Each class keeps ``round(ratio * n)`` records for training (clamped so both
    splits are non-empty). The permutation for a class depends only on the
    seed, the class name and that class's records.
    """
    check_fraction(ratio, "ratio")
    assignment: dict[str, str] = {}
    for label in index.classes:
        members = sorted(index.with_label(label), key=lambda r: r.path)
        n = len(members)
        if n < 2:
            raise ValueError(f"class {label!r} has {n} record(s); cannot stratify")
        n_train = min(max(math.floor(ratio * n + 0.5), 1), n - 1)
        rng = np.random.default_rng([seed, zlib.crc32(label.encode())])
        order = rng.permutation(n)
        for rank, i in enumerate(order):
            assignment[members[i].path] = "train" if rank < n_train else "val"
    return replace(index, split_assignment=assignment, seed=seed)


def subset_index(
    index: DatasetIndex, classes: Sequence[str], per_class: int, seed: int = 0
) -> DatasetIndex:
    """Draw ``per_class`` records from each of ``classes`` (desk-scale corpora)."""
    keep: list[ImageRecord] = []
    for label in classes:
        members = sorted(index.with_label(label), key=lambda r: r.path)
        if len(members) < per_class:
            raise ValueError(f"class {label!r} has only {len(members)} records")
        rng = np.random.default_rng([seed, zlib.crc32(label.encode())])
        chosen = sorted(rng.choice(len(members), per_class, replace=False))
        keep.extend(members[i] for i in chosen)
    keep.sort(key=lambda r: r.path)
    return DatasetIndex(tuple(keep), index.class_set)


def merge_generated(
    index: DatasetIndex,
    generated_dir: str | Path,
    source_tag: str,
    classes: Sequence[str] | None = None,
) -> DatasetIndex:
    """Append generated PNGs from ``generated_dir/<Class>/`` to the train split.

    ``classes`` restricts the merge to a subset of the class set (folders for
    other known classes are skipped); by default every folder is merged.
    """
    if source_tag not in SOURCES or source_tag == "real":
        source_tag = source_for_kind(source_tag)
    if not index.is_split:
        raise ValueError("split the index before merging generated images")
    generated_dir = Path(generated_dir)
    if not generated_dir.is_dir():
        raise FileNotFoundError(f"generated image directory {generated_dir} does not exist")

    new: list[ImageRecord] = []
    for d in sorted(p for p in generated_dir.iterdir() if p.is_dir()):
        if d.name not in index.class_set:
            raise ValueError(f"generated folder {d.name!r} does not match any class")
        if classes is not None and d.name not in classes:
            continue
        for f in sorted(d.iterdir()):
            if f.suffix.lower() != ".png":
                raise ValueError(f"{f}: generated images must be PNG files")
            with Image.open(f) as img:
                if img.size != (GAN_IMAGE_SIZE, GAN_IMAGE_SIZE):
                    raise ValueError(
                        f"{f}: expected {GAN_IMAGE_SIZE}x{GAN_IMAGE_SIZE}, got {img.size}"
                    )
            new.append(ImageRecord(str(f), d.name, source_tag, "png"))

    if not new:
        return index
    existing = set(index.split_assignment)
    clash = [r.path for r in new if r.path in existing]
    if clash:
        raise ValueError(f"generated images already indexed: {clash[:3]}")
    assignment = dict(index.split_assignment)
    assignment.update((r.path, "train") for r in new)
    return replace(index, records=index.records + tuple(new), split_assignment=assignment)


def write_manifest(index: DatasetIndex, path: str | Path) -> Path:
    """One ``path,label,split,source`` line per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split", "source"])
        for r in index.records:
            writer.writerow([r.path, r.label, index.split_assignment.get(r.path, ""), r.source])
    return path


def read_manifest(path: str | Path, class_set: Sequence[str] = EUROSAT_CLASSES) -> DatasetIndex:
    records, assignment, seed = [], {}, None
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            fmt = "jpg" if row["source"] == "real" else "png"
            records.append(ImageRecord(row["path"], row["label"], row["source"], fmt))
            if row["split"]:
                assignment[row["path"]] = row["split"]
    return DatasetIndex(tuple(records), class_set, assignment, seed)


# --------------------------------------------------------------------------
# pixel transforms


@dataclass
class ImageBatch:
    data: torch.Tensor
    range_tag: str = "unit_signed"
    labels: torch.Tensor | None = None

    def __post_init__(self):
        if self.range_tag not in ("unit_signed", "backbone_normalized"):
            raise ValueError(f"unknown range tag {self.range_tag!r}")
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W), got {tuple(self.data.shape)}")
        if self.range_tag == "unit_signed" and self.data.numel():
            if self.data.min() < -1 or self.data.max() > 1:
                raise ValueError("unit_signed batch has values outside [-1, 1]")
        if self.labels is not None and len(self.labels) != len(self.data):
            raise ValueError("labels and data have different lengths")

    def __len__(self) -> int:
        return len(self.data)


def _uint8_to_unit_signed(arr: np.ndarray) -> torch.Tensor:
    t = torch.tensor(arr, dtype=torch.float32)
    return (t / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


def normalize_gan(raw) -> torch.Tensor:
    """Map 8-bit ``(64, 64, 3)`` image(s) to ``[-1, 1]`` channels-first floats.

    A single image gives a ``(3, 64, 64)`` tensor, a stack of ``n`` gives
    ``(n, 3, 64, 64)``.
    """
    single = np.ndim(raw) == 3
    arr = check_uint8_images(raw, size=GAN_IMAGE_SIZE)
    out = _uint8_to_unit_signed(arr)
    return out[0] if single else out


def denormalize(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize_gan`: round, clamp and return uint8 HWC."""
    x = torch.as_tensor(x).detach().to(torch.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    vals = torch.clamp(torch.round((x + 1.0) * 127.5), 0, 255).to(torch.uint8)
    out = vals.permute(0, 2, 3, 1).cpu().numpy()
    return out[0] if single else out


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    max_rotation: float = 90.0

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0)


def _rotate(img: torch.Tensor, degrees: float) -> torch.Tensor:
    # reflection padding keeps corners filled with plausible texture
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    affine = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=img.dtype)[None]
    grid = F.affine_grid(affine, [1, *img.shape], align_corners=False)
    out = F.grid_sample(
        img[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False
    )
    return out[0]


def geometric_augment(
    batch: ImageBatch, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()
) -> ImageBatch:
    """Random horizontal/vertical flips and rotation, drawn independently per image.

    Three variates are consumed per image whatever the policy, so the random
    stream stays aligned across policies.
    """
    out = []
    for img in batch.data:
        u_h, u_v = rng.random(2)
        angle = rng.uniform(-policy.max_rotation, policy.max_rotation) if policy.max_rotation else 0.0
        if u_h < policy.p_hflip:
            img = torch.flip(img, dims=[2])
        if u_v < policy.p_vflip:
            img = torch.flip(img, dims=[1])
        if angle != 0.0:
            img = _rotate(img, angle)
            if batch.range_tag == "unit_signed":
                img = img.clamp(-1.0, 1.0)
        out.append(img)
    data = torch.stack(out) if out else batch.data.clone()
    return ImageBatch(data, batch.range_tag, batch.labels)


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def load_images(records: Sequence[ImageRecord], n_jobs: int = 1) -> list[np.ndarray]:
    paths = [r.path for r in records]
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(load_image, paths))
    return [load_image(p) for p in paths]


def load_gan_images(records: Sequence[ImageRecord]) -> torch.Tensor:
    """Decode 64x64 records into a unit-signed ``(n, 3, 64, 64)`` tensor."""
    if not records:
        return torch.empty(0, 3, GAN_IMAGE_SIZE, GAN_IMAGE_SIZE)
    return normalize_gan(np.stack(load_images(records)))


def to_backbone_input(unit_signed: torch.Tensor, size: int = CLASSIFIER_IMAGE_SIZE) -> torch.Tensor:
    """Resize to ``size`` (bilinear) and apply the backbone's channel statistics."""
    x = (unit_signed + 1.0) / 2.0
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    mean = torch.tensor(BACKBONE_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(BACKBONE_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def prepare_classifier_batch(
    records: Sequence[ImageRecord],
    rng: np.random.Generator | None = None,
    use_geometric: bool = False,
    policy: AugmentPolicy = AugmentPolicy(),
    class_set: Sequence[str] = EUROSAT_CLASSES,
    size: int = CLASSIFIER_IMAGE_SIZE,
) -> ImageBatch:
    """Decode, optionally augment, resize and normalize records for a backbone.

    Callers set ``use_geometric`` only for training batches.
    """
    if not records:
        raise ValueError("cannot build a batch from zero records")
    images = load_images(records)
    return batch_from_arrays(
        images,
        [class_set.index(r.label) for r in records],
        rng=rng,
        use_geometric=use_geometric,
        policy=policy,
        size=size,
    )


def batch_from_arrays(
    images: Sequence[np.ndarray] | np.ndarray,
    labels: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
    use_geometric: bool = False,
    policy: AugmentPolicy = AugmentPolicy(),
    size: int = CLASSIFIER_IMAGE_SIZE,
) -> ImageBatch:
    if use_geometric and rng is None:
        raise ValueError("geometric augmentation needs a seeded generator")
    tensors = []
    for img in images:
        unit = ImageBatch(_uint8_to_unit_signed(check_uint8_images(img, size=None)))
        if use_geometric:
            unit = geometric_augment(unit, rng, policy)
        tensors.append(to_backbone_input(unit.data, size))
    y = None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return ImageBatch(torch.cat(tensors), "backbone_normalized", y)

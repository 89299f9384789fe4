"""Dataset discovery, the 50/50 stratified split and low-data train subsets.

All sampling goes through :func:`class_rng`, a numpy ``PCG64`` generator
seeded with ``[seed, class_id]``. The algorithm name is written into every
manifest header so a manifest can be regenerated elsewhere.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")

MANIFEST_FORMAT_VERSION = 1
RNG_ALGORITHM = "numpy.PCG64(seed=[seed, class_id]).permutation"

# Train images per class at each canonical percentage of a 312-per-class split.
CANONICAL_PERCENTAGES = (1, 3, 5, 10, 20, 30, 40, 50, 75, 100)
LOW_DATA_COUNTS = {1: 3, 3: 9, 5: 15, 10: 30, 20: 62, 30: 93, 40: 124, 50: 156, 75: 234, 100: 312}
LOW_DATA_BASE = 312

Entry = Tuple[str, int]


class ManifestError(ValueError):
    """Raised for invalid datasets, manifests or sampling requests."""


def class_rng(seed: int, class_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([int(seed), int(class_id)]))


@dataclass(frozen=True)
class DatasetIndex:
    root_path: Path
    classes: Tuple[str, ...]
    samples: Tuple[Entry, ...]
    image_size_hint: Optional[Tuple[int, int]] = None
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if list(self.classes) != sorted(set(self.classes)):
            raise ManifestError("class names must be unique and sorted")
        seen = set()
        for path, cid in self.samples:
            if not 0 <= cid < len(self.classes):
                raise ManifestError(f"sample {path!r} has invalid class id {cid}")
            if path in seen:
                raise ManifestError(f"duplicate sample path {path!r}")
            seen.add(path)

    @property
    def dataset_id(self) -> str:
        return Path(self.root_path).name

    def counts(self) -> Dict[int, int]:
        c = Counter(cid for _, cid in self.samples)
        return {cid: c.get(cid, 0) for cid in range(len(self.classes))}

    def by_class(self) -> Dict[int, List[str]]:
        out: Dict[int, List[str]] = {cid: [] for cid in range(len(self.classes))}
        for path, cid in self.samples:
            out[cid].append(path)
        return out


@dataclass(frozen=True)
class SplitManifest:
    dataset_id: str
    role: str
    percentage: int
    seed: int
    classes: Tuple[str, ...]
    entries: Tuple[Entry, ...]
    per_class_count: int
    split_seed: Optional[int] = None
    root: Optional[str] = None

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ManifestError(f"role must be 'train' or 'test', got {self.role!r}")
        if not 1 <= self.percentage <= 100:
            raise ManifestError(f"percentage must be in 1..100, got {self.percentage}")
        seen = set()
        counts = Counter()
        for path, cid in self.entries:
            if not 0 <= cid < len(self.classes):
                raise ManifestError(f"entry {path!r} has unknown class id {cid}")
            if path in seen:
                raise ManifestError(f"duplicated entry {path!r}")
            seen.add(path)
            counts[cid] += 1
        for cid, name in enumerate(self.classes):
            if counts.get(cid, 0) != self.per_class_count:
                raise ManifestError(
                    f"class {name!r} has {counts.get(cid, 0)} entries, expected {self.per_class_count}"
                )

    @property
    def labels(self) -> List[int]:
        return [cid for _, cid in self.entries]

    @property
    def paths(self) -> List[str]:
        return [p for p, _ in self.entries]


def _image_size(path: Path) -> Tuple[int, int]:
    with Image.open(path) as im:
        im.verify()
    with Image.open(path) as im:
        return im.height, im.width


def scan_dataset(root_path, verify_images: bool = True) -> DatasetIndex:
    """Index a class-per-folder image dataset.

    Unreadable images are excluded and reported through ``index.warnings``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise ManifestError(f"no class folders under {root}")

    classes = tuple(d.name for d in class_dirs)
    samples: List[Entry] = []
    warnings: List[str] = []
    sizes = Counter()
    for cid, d in enumerate(class_dirs):
        files = sorted(
            p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        kept = 0
        for f in files:
            rel = f.relative_to(root).as_posix()
            if verify_images:
                try:
                    sizes[_image_size(f)] += 1
                except Exception as exc:  # PIL raises a zoo of types
                    warnings.append(f"{rel}: {exc}")
                    continue
            samples.append((rel, cid))
            kept += 1
        if kept == 0:
            raise ManifestError(f"class folder {d.name!r} contains no readable images")

    for w in warnings:
        logger.warning("skipping unreadable image %s", w)
    samples.sort()
    hint = sizes.most_common(1)[0][0] if sizes else None
    return DatasetIndex(root, classes, tuple(samples), hint, tuple(warnings))


def subsample_balanced(index: DatasetIndex, n_per_class: int, seed: int) -> DatasetIndex:
    """Draw exactly ``n_per_class`` samples per class without replacement."""
    if n_per_class < 1:
        raise ManifestError("n_per_class must be positive")
    groups = index.by_class()
    for cid, paths in groups.items():
        if len(paths) < n_per_class:
            raise ManifestError(
                f"class {index.classes[cid]!r} has {len(paths)} samples, {n_per_class} requested"
            )
    picked: List[Entry] = []
    for cid, paths in groups.items():
        order = class_rng(seed, cid).permutation(len(paths))[:n_per_class]
        picked.extend((paths[i], cid) for i in order)
    picked.sort()
    return replace(index, samples=tuple(picked))


def stratified_split(index: DatasetIndex, seed: int) -> Tuple[SplitManifest, SplitManifest]:
    """Per class: shuffle, floor(n/2) to train, the rest to test.

    Raises if class sizes differ, since the manifests are class-balanced.
    """
    if not index.samples:
        raise ManifestError("cannot split an empty index")
    groups = index.by_class()
    sizes = {len(v) for v in groups.values()}
    if len(sizes) != 1:
        counts = {index.classes[c]: len(v) for c, v in groups.items()}
        raise ManifestError(f"stratified split needs equal class sizes, got {counts}")
    train: List[Entry] = []
    test: List[Entry] = []
    for cid, paths in groups.items():
        order = class_rng(seed, cid).permutation(len(paths))
        n_train = len(paths) // 2
        train.extend((paths[i], cid) for i in order[:n_train])
        test.extend((paths[i], cid) for i in order[n_train:])
    n = sizes.pop()
    common = dict(
        dataset_id=index.dataset_id,
        percentage=100,
        seed=seed,
        classes=index.classes,
        split_seed=seed,
        root=str(index.root_path),
    )
    return (
        SplitManifest(role="train", entries=tuple(sorted(train)), per_class_count=n // 2, **common),
        SplitManifest(role="test", entries=tuple(sorted(test)), per_class_count=n - n // 2, **common),
    )


def low_data_count(base: int, percentage: int) -> int:
    """Per-class train count for ``percentage`` of a ``base``-per-class split."""
    if not 1 <= percentage <= 100:
        raise ManifestError(f"percentage must be in 1..100, got {percentage}")
    if base == LOW_DATA_BASE and percentage in LOW_DATA_COUNTS:
        return LOW_DATA_COUNTS[percentage]
    if percentage in LOW_DATA_COUNTS:
        # table entry rescaled to this base, rounded half up
        count = (2 * LOW_DATA_COUNTS[percentage] * base + LOW_DATA_BASE) // (2 * LOW_DATA_BASE)
    else:
        count = base * percentage // 100
    return max(1, count)


def sample_low_data(train: SplitManifest, percentage: int, seed: int) -> SplitManifest:
    """Class-balanced draw of ``percentage`` percent of a full train split."""
    if train.role != "train" or train.percentage != 100:
        raise ManifestError("sample_low_data expects a full (100%) train manifest")
    count = low_data_count(train.per_class_count, percentage)
    if count > train.per_class_count:
        raise ManifestError(f"requested {count} per class, only {train.per_class_count} available")
    groups: Dict[int, List[str]] = {cid: [] for cid in range(len(train.classes))}
    for path, cid in train.entries:
        groups[cid].append(path)
    picked: List[Entry] = []
    for cid, paths in groups.items():
        order = class_rng(seed, cid).permutation(len(paths))[:count]
        picked.extend((paths[i], cid) for i in order)
    return replace(
        train,
        percentage=percentage,
        seed=seed,
        entries=tuple(sorted(picked)),
        per_class_count=count,
        split_seed=train.split_seed if train.split_seed is not None else train.seed,
    )


_HEADER_KEYS = (
    "format_version",
    "dataset_id",
    "role",
    "percentage",
    "seed",
    "split_seed",
    "per_class_count",
    "rng",
    "root",
    "classes",
)


def format_manifest(manifest: SplitManifest) -> str:
    values = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "dataset_id": manifest.dataset_id,
        "role": manifest.role,
        "percentage": manifest.percentage,
        "seed": manifest.seed,
        "split_seed": "" if manifest.split_seed is None else manifest.split_seed,
        "per_class_count": manifest.per_class_count,
        "rng": RNG_ALGORITHM,
        "root": manifest.root or "",
        "classes": "\t".join(manifest.classes),
    }
    lines = [f"#{k}={values[k]}" for k in _HEADER_KEYS]
    lines += [f"{path}\t{cid}" for path, cid in manifest.entries]
    return "\n".join(lines) + "\n"


def write_manifest(manifest: SplitManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_manifest(manifest))


def _parse_int(value: str, key: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ManifestError(f"line {lineno}: field {key!r} is not an integer: {value!r}") from None


def read_manifest(path) -> SplitManifest:
    header: Dict[str, str] = {}
    entries: List[Entry] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if entries:
                    raise ManifestError(f"line {lineno}: header line after records")
                key, sep, value = line[1:].partition("=")
                if not sep:
                    raise ManifestError(f"line {lineno}: malformed header {line!r}")
                header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(f"line {lineno}: expected 'path<TAB>class_id', got {line!r}")
            entries.append((parts[0], _parse_int(parts[1], "class_id", lineno)))

    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ManifestError(f"{path}: missing header fields {missing}")
    version = _parse_int(header["format_version"], "format_version", 1)
    if version != MANIFEST_FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported manifest format_version {version}")
    classes = tuple(header["classes"].split("\t")) if header["classes"] else ()
    return SplitManifest(
        dataset_id=header["dataset_id"],
        role=header["role"],
        percentage=_parse_int(header["percentage"], "percentage", 0),
        seed=_parse_int(header["seed"], "seed", 0),
        classes=classes,
        entries=tuple(entries),
        per_class_count=_parse_int(header["per_class_count"], "per_class_count", 0),
        split_seed=_parse_int(header["split_seed"], "split_seed", 0) if header["split_seed"] else None,
        root=header["root"] or None,
    )


def prepare_splits(
    root,
    out_dir,
    percentages: Sequence[int] = CANONICAL_PERCENTAGES,
    seeds: Sequence[int] = (0, 1, 2),
    split_seed: int = 0,
    subsample_per_class: Optional[int] = None,
) -> Dict[str, Path]:
    """Write the test split and every (percentage, seed) train manifest.

    Returns a mapping of manifest name to written path. 100% is written once.
    """
    index = scan_dataset(root)
    if subsample_per_class is not None:
        index = subsample_balanced(index, subsample_per_class, split_seed)
    train, test = stratified_split(index, split_seed)
    out = Path(out_dir)
    written = {"test": out / "test.tsv", "train_full": out / "train_100.tsv"}
    write_manifest(test, written["test"])
    write_manifest(train, written["train_full"])
    for pct in percentages:
        if pct == 100:
            continue
        for s in seeds:
            name = f"train_{pct}_s{s}"
            written[name] = out / f"{name}.tsv"
            write_manifest(sample_low_data(train, pct, s), written[name])
    return written

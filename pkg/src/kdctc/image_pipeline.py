"""Global and local views of an image, with flips as the only augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

GLOBAL_SIZE = 192
LOCAL_SIZE = 96
PATCH_FRACTION_RANGE = (0.1, 0.5)

# ImageNet channel statistics, matching the pretrained backbone.
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(RuntimeError):
    pass


class PatchError(ValueError):
    pass


class BatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    fraction: float
    top: int
    left: int
    side: int

    def as_line(self) -> str:
        return f"{self.fraction:.6f}\t{self.top}\t{self.left}\t{self.side}"


def load_image(path) -> np.ndarray:
    """Decode to an HxWx3 uint8 array; grayscale is promoted to RGB."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageDecodeError(f"empty image {path}")
    return arr


def to_tensor(raw: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 (or float in [0, 1]) array to a 3xHxW float32 tensor in [0, 1]."""
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageDecodeError(f"expected a 3-channel image, got shape {arr.shape}")
    t = torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1)
    if t.dtype == torch.uint8:
        return t.float().div_(255.0)
    return t.float()


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(img[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def normalize(img: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(NORM_MEAN, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(NORM_STD, dtype=img.dtype).view(3, 1, 1)
    return (img - mean) / std


def random_flips(img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    # two draws always, so the rng stream does not depend on the outcome
    hflip, vflip = rng.random(2) < 0.5
    if hflip:
        img = img.flip(-1)
    if vflip:
        img = img.flip(-2)
    return img


def _as_tensor(raw) -> torch.Tensor:
    return raw if isinstance(raw, torch.Tensor) else to_tensor(raw)


def preprocess_global(
    raw, train_mode: bool, rng: Optional[np.random.Generator], size: int = GLOBAL_SIZE
) -> torch.Tensor:
    img = resize(_as_tensor(raw), size)
    if train_mode:
        img = random_flips(img, rng)
    return normalize(img)


def draw_patch(height: int, width: int, rng: np.random.Generator) -> PatchSpec:
    short = min(height, width)
    if short < 10:
        raise PatchError(f"image {height}x{width} is too small for local sampling (min side 10)")
    lo, hi = PATCH_FRACTION_RANGE
    fraction = float(rng.uniform(lo, hi))
    side = max(1, min(short, int(math.floor(fraction * short + 0.5))))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return PatchSpec(fraction, top, left, side)


def sample_local_patch(
    raw, train_mode: bool, rng: np.random.Generator, size: int = LOCAL_SIZE
) -> Tuple[torch.Tensor, PatchSpec]:
    """Random square crop of 10-50% of the shorter side, resized to ``size``."""
    img = _as_tensor(raw)
    spec = draw_patch(img.shape[1], img.shape[2], rng)
    crop = img[:, spec.top : spec.top + spec.side, spec.left : spec.left + spec.side]
    out = resize(crop, size)
    if train_mode:
        out = random_flips(out, rng)
    return normalize(out), spec


@dataclass
class Batch:
    global_views: torch.Tensor
    local_views: torch.Tensor
    labels: torch.Tensor
    paths: List[str]
    patches: List[PatchSpec]
    train_mode: bool

    @property
    def local_used(self) -> bool:
        # evaluation reads the global branch only
        return self.train_mode

    def __len__(self) -> int:
        return len(self.paths)


class ImageLoader:
    """Resolve manifest paths under ``root`` and cache decoded tensors."""

    def __init__(self, root, cache: bool = True):
        self.root = Path(root)
        self.cache = cache
        self._store = {}

    def __call__(self, rel_path: str) -> torch.Tensor:
        if rel_path in self._store:
            return self._store[rel_path]
        img = to_tensor(load_image(self.root / rel_path))
        if self.cache:
            self._store[rel_path] = img
        return img


def make_batch(
    entries: Sequence[Tuple[str, int]],
    loader: Callable[[str], object],
    train_mode: bool,
    rng: np.random.Generator,
    global_size: int = GLOBAL_SIZE,
    local_size: int = LOCAL_SIZE,
) -> Batch:
    """One global view and one local patch per entry, in entry order.

    Per entry the rng is consumed as: global flips, patch geometry, local flips.
    """
    if not entries:
        raise BatchError("cannot build an empty batch")
    globals_, locals_, patches = [], [], []
    for path, _ in entries:
        try:
            img = _as_tensor(loader(path))
        except Exception as exc:
            raise BatchError(f"failed to load entry {path!r}: {exc}") from exc
        globals_.append(preprocess_global(img, train_mode, rng, global_size))
        local, spec = sample_local_patch(img, train_mode, rng, local_size)
        locals_.append(local)
        patches.append(spec)
    return Batch(
        global_views=torch.stack(globals_),
        local_views=torch.stack(locals_),
        labels=torch.tensor([cid for _, cid in entries], dtype=torch.long),
        paths=[p for p, _ in entries],
        patches=patches,
        train_mode=train_mode,
    )

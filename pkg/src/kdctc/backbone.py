"""Shared-weight classifier used by both the global and the local branch."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn

ARCHS = ("resnet50", "tiny_cnn")
CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"KDCTC-CKPT\n"


class ConfigError(ValueError):
    pass


class WeightLoadError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def _conv_bn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def tiny_cnn_features(blocks: int = 4, width: int = 8) -> Tuple[nn.Module, int, int]:
    """Stem (stride 2) plus ``blocks`` conv/pool stages.

    Returns (module, feature_dim, downsample factor = 2 ** (blocks + 1)).
    """
    layers = [_conv_bn(3, width, stride=2)]
    cin = width
    for i in range(blocks):
        cout = width * 2 ** min(i, 2)
        layers += [_conv_bn(cin, cout), nn.MaxPool2d(2)]
        cin = cout
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), cin, 2 ** (blocks + 1)


def resnet50_features() -> Tuple[nn.Module, int, int]:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.fc = nn.Identity()
    return net, 2048, 32


class Classifier(nn.Module):
    """Feature extractor ending in global average pooling, plus a linear head.

    One instance serves both branches; calling it on a 192px batch and then on
    a 96px batch reads the same parameters.
    """

    def __init__(
        self,
        arch_id: str,
        num_classes: int,
        class_names: Optional[Sequence[str]] = None,
        blocks: int = 4,
        width: int = 8,
    ):
        super().__init__()
        if arch_id == "tiny_cnn":
            self.features, dim, self.downsample = tiny_cnn_features(blocks, width)
        elif arch_id == "resnet50":
            self.features, dim, self.downsample = resnet50_features()
        else:
            raise ConfigError(f"unknown arch {arch_id!r}; supported: {ARCHS}")
        self.head = nn.Linear(dim, num_classes)
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.class_names = tuple(class_names) if class_names else tuple(str(i) for i in range(num_classes))
        if len(self.class_names) != num_classes:
            raise ConfigError("class_names length must equal num_classes")
        self.arch_kwargs = {"blocks": blocks, "width": width} if arch_id == "tiny_cnn" else {}

    def reset_head(self) -> None:
        nn.init.uniform_(self.head.weight, -0.01, 0.01)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(
                f"input {h}x{w} is not divisible by the downsample factor {self.downsample}"
            )
        return self.head(self.features(images))


def _load_backbone(model: Classifier, path) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    # accept full-model dumps (features.* / head.*) and bare torchvision dumps
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    state = {k: v for k, v in state.items() if not k.startswith(("fc.", "head."))}
    own = model.features.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = [
        f"{k}: file {tuple(state[k].shape)} vs model {tuple(own[k].shape)}"
        for k in sorted(set(own) & set(state))
        if state[k].shape != own[k].shape
    ]
    if missing or unexpected or mismatched:
        lines = [f"weights in {path} do not match arch {model.arch_id!r}"]
        if mismatched:
            lines.append("mismatched shapes: " + "; ".join(mismatched[:20]))
        if missing:
            lines.append(f"missing keys ({len(missing)}): {', '.join(missing[:10])}")
        if unexpected:
            lines.append(f"unexpected keys ({len(unexpected)}): {', '.join(unexpected[:10])}")
        raise WeightLoadError("\n".join(lines))
    model.features.load_state_dict(state)


def build_model(
    arch_id: str,
    num_classes: int,
    pretrained: Optional[str] = None,
    seed: int = 0,
    class_names: Optional[Sequence[str]] = None,
    dtype: torch.dtype = torch.float32,
    **arch_kwargs,
) -> Classifier:
    """Build a model; ``pretrained`` is a path to backbone weights, else random init.

    Initialization always runs under ``seed``, so the head is reproducible in
    both modes. Every layer stays trainable.
    """
    if arch_id not in ARCHS:
        raise ConfigError(f"unknown arch {arch_id!r}; supported: {ARCHS}")
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(arch_id, num_classes, class_names, **arch_kwargs)
        model.reset_head()
    if pretrained is not None:
        if not Path(pretrained).is_file():
            raise WeightLoadError(f"pretrained weights not found: {pretrained}")
        _load_backbone(model, pretrained)
    for p in model.parameters():
        p.requires_grad_(True)
    return model.to(dtype)


def save_checkpoint(model: Classifier, path, extra: Optional[Dict] = None) -> None:
    buf = io.BytesIO()
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save(state, buf)
    payload = buf.getvalue()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch_id": model.arch_id,
        "num_classes": model.num_classes,
        "class_names": list(model.class_names),
        "arch_kwargs": model.arch_kwargs,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        f.write(payload)
    tmp.replace(path)


def read_checkpoint_meta(path) -> Tuple[Dict, bytes]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        try:
            meta = json.loads(f.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
        payload = f.read()
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {meta.get('format_version')} "
            f"unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return meta, payload


def load_checkpoint(path) -> Classifier:
    meta, payload = read_checkpoint_meta(path)
    model = Classifier(
        meta["arch_id"], meta["num_classes"], meta["class_names"], **meta["arch_kwargs"]
    )
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict(torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True))
    return model

"""Evaluation protocol, multi-seed experiments, aggregation and reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from PIL import Image

from .backbone import Classifier, build_model
from .data_manifest import (
    SplitManifest,
    sample_low_data,
    scan_dataset,
    stratified_split,
    subsample_balanced,
    write_manifest,
)
from .image_pipeline import GLOBAL_SIZE, ImageLoader, preprocess_global
from .trainer import METHODS, TrainConfig, train

logger = logging.getLogger(__name__)


class ReportError(RuntimeError):
    pass


@dataclass
class RunResult:
    percentage: int
    seed: int
    method: str
    test_accuracy: float
    per_class_accuracy: List[float]
    confusion: List[List[int]]
    config_snapshot: dict
    classes: List[str]

    @property
    def run_id(self) -> str:
        return run_id(self.method, self.percentage, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class AggregateRow:
    percentage: int
    method: str
    mean_accuracy: float
    std_accuracy: float
    n_seeds: int


def run_id(method: str, percentage: int, seed: int) -> str:
    return f"{method}_p{percentage:03d}_s{seed}"


def confusion_matrix(labels: Sequence[int], preds: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Tuple[float, List[float]]:
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    rows = cm.sum(axis=1)
    per_class = [float(cm[i, i] / rows[i]) if rows[i] else 0.0 for i in range(cm.shape[0])]
    return acc, per_class


@torch.no_grad()
def predict(
    model: Classifier,
    entries: Sequence[Tuple[str, int]],
    loader,
    image_size: int = GLOBAL_SIZE,
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode global-branch predictions, in entry order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start : start + batch_size]
        x = torch.stack([preprocess_global(loader(p), False, None, image_size) for p, _ in chunk])
        preds.append(model(x.to(dtype)).argmax(dim=1).numpy())
    return np.concatenate(preds)


def evaluate(
    model: Classifier,
    test_manifest: SplitManifest,
    loader=None,
    image_size: int = GLOBAL_SIZE,
) -> dict:
    """Top-1 accuracy, per-class accuracy and confusion matrix on ``test_manifest``."""
    if tuple(model.class_names) != tuple(test_manifest.classes):
        raise ValueError(
            f"class order mismatch: model {model.class_names} vs manifest {test_manifest.classes}"
        )
    loader = loader or ImageLoader(test_manifest.root)
    preds = predict(model, list(test_manifest.entries), loader, image_size)
    cm = confusion_matrix(test_manifest.labels, preds, model.num_classes)
    acc, per_class = metrics_from_confusion(cm)
    return {"test_accuracy": acc, "per_class_accuracy": per_class, "confusion": cm.tolist()}


def aggregate(results: Iterable[RunResult]) -> List[AggregateRow]:
    """Mean and sample std (ddof=1) of accuracy per (method, percentage).

    A single run reports std 0.
    """
    groups: Dict[Tuple[str, int], List[float]] = {}
    for r in results:
        groups.setdefault((r.method, r.percentage), []).append(r.test_accuracy)
    rows = []
    for (method, pct), accs in sorted(groups.items(), key=lambda kv: (_method_rank(kv[0][0]), kv[0][1])):
        arr = np.asarray(accs, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(AggregateRow(pct, method, float(arr.mean()), std, len(arr)))
    return rows


def _method_rank(method: str) -> Tuple[int, str]:
    return (METHODS.index(method) if method in METHODS else len(METHODS), method)


def load_config(path=None, overrides: Optional[dict] = None) -> TrainConfig:
    """Flat YAML key/value file, then overrides (None values are ignored)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict) or any(isinstance(v, (dict, list)) for v in loaded.values()):
            raise ValueError(f"{path}: config must be a flat key/value mapping")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    tmp.replace(path)


def _append_index(results_dir: Path, record: dict) -> None:
    index = results_dir / "index.jsonl"
    old = index.read_text(encoding="utf-8") if index.exists() else ""
    _atomic_write(index, old + json.dumps(record, sort_keys=True) + "\n")


def load_results(results_dir) -> List[RunResult]:
    runs = Path(results_dir) / "runs"
    if not runs.is_dir():
        return []
    return [RunResult.from_json(p.read_text(encoding="utf-8")) for p in sorted(runs.glob("*.json"))]


def build_for_config(cfg: TrainConfig, classes: Sequence[str], seed: int) -> Classifier:
    kwargs = {"blocks": cfg.tiny_blocks, "width": cfg.tiny_width} if cfg.arch == "tiny_cnn" else {}
    return build_model(
        cfg.arch, len(classes), pretrained=cfg.pretrained, seed=seed, class_names=classes, **kwargs
    )


def run_single(
    train_manifest: SplitManifest,
    test_manifest: SplitManifest,
    cfg: TrainConfig,
    loader=None,
    out_dir=None,
) -> RunResult:
    """Train one model from scratch (or pretrained backbone) and evaluate it."""
    model = build_for_config(cfg, train_manifest.classes, cfg.seed)
    model, _ = train(train_manifest, cfg, model, loader=loader, out_dir=out_dir)
    metrics = evaluate(model, test_manifest, loader=loader, image_size=cfg.global_size)
    return RunResult(
        percentage=train_manifest.percentage,
        seed=train_manifest.seed,
        method=cfg.method,
        config_snapshot=cfg.resolved().to_dict(),
        classes=list(train_manifest.classes),
        **metrics,
    )


def run_experiment(
    dataset_root,
    percentages: Sequence[int],
    seeds: Sequence[int],
    methods: Sequence[str],
    cfg: TrainConfig,
    results_dir,
    split_seed: int = 0,
    subsample_per_class: Optional[int] = None,
) -> Tuple[List[RunResult], List[AggregateRow]]:
    """Train and evaluate every (method, percentage, seed) on one fixed test split.

    100% uses only the first seed. Existing run records are reused, so an
    interrupted experiment resumes where it stopped. Failed runs are logged,
    recorded in the index and left out of the aggregates.
    """
    results_dir = Path(results_dir)
    (results_dir / "runs").mkdir(parents=True, exist_ok=True)
    index = scan_dataset(dataset_root)
    if subsample_per_class is not None:
        index = subsample_balanced(index, subsample_per_class, split_seed)
    train_full, test = stratified_split(index, split_seed)
    write_manifest(test, results_dir / "manifests" / "test.tsv")
    write_manifest(train_full, results_dir / "manifests" / "train_100.tsv")
    loader = ImageLoader(index.root_path)

    results = []
    for method in methods:
        for pct in percentages:
            for seed in (seeds if pct < 100 else list(seeds)[:1]):
                rid = run_id(method, pct, seed)
                record = results_dir / "runs" / f"{rid}.json"
                if record.exists():
                    results.append(RunResult.from_json(record.read_text(encoding="utf-8")))
                    continue
                train_m = sample_low_data(train_full, pct, seed)
                write_manifest(train_m, results_dir / "manifests" / f"train_{pct}_s{seed}.tsv")
                run_cfg = replace(cfg, method=method, seed=seed)
                try:
                    res = run_single(train_m, test, run_cfg, loader, results_dir / "checkpoints" / rid)
                except Exception as exc:
                    logger.warning("run %s failed: %s", rid, exc)
                    _append_index(results_dir, {"run_id": rid, "status": "failed", "error": str(exc)})
                    continue
                _atomic_write(record, res.to_json())
                _append_index(
                    results_dir,
                    {"run_id": rid, "status": "ok", "test_accuracy": res.test_accuracy},
                )
                logger.info("%s: accuracy %.4f", rid, res.test_accuracy)
                results.append(res)
    return results, aggregate(results)


def generate_synthetic_texture_dataset(
    n_classes: int, n_per_class: int, image_size: int, seed: int, out_root
) -> Path:
    """Class-per-folder PNG textures: per class, an oriented sinusoidal grating.

    Each class has its own orientation, spatial frequency and a faint stain
    tint; phase, contrast and orientation are jittered per image and
    Gaussian noise is added.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise OSError(f"output root is not writable: {root}")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    pink = np.array([0.85, 0.55, 0.75])
    purple = np.array([0.45, 0.25, 0.60])
    width = len(str(n_per_class - 1))
    for k in range(n_classes):
        rng = np.random.default_rng([seed, k])
        theta = math.pi * k / n_classes
        freq = (0.05 + 0.03 * (k % 3)) * 150 / image_size  # cycles per pixel
        tint = np.array([0.04 * math.cos(2 * math.pi * k / n_classes), 0.0, 0.04 * math.sin(2 * math.pi * k / n_classes)])
        d = root / f"class_{k:02d}"
        d.mkdir(exist_ok=True)
        for i in range(n_per_class):
            t = theta + rng.uniform(-0.08, 0.08)
            phase = rng.uniform(-math.pi / 3, math.pi / 3)
            contrast = rng.uniform(0.7, 1.0)
            wave = np.sin(2 * math.pi * freq * (xx * math.cos(t) + yy * math.sin(t)) + phase)
            mix = 0.5 + 0.5 * contrast * wave
            img = pink[None, None] * (1 - mix[..., None]) + purple[None, None] * mix[..., None] + tint
            img = img + rng.normal(0.0, 0.08, size=img.shape)
            px = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
            Image.fromarray(px, "RGB").save(d / f"img_{i:0{width}d}.png")
    return root


def _fmt_cell(row: AggregateRow) -> str:
    if row.n_seeds > 1:
        return f"{100 * row.mean_accuracy:.2f}±{100 * row.std_accuracy:.2f}"
    return f"{100 * row.mean_accuracy:.2f}"


def render_table(rows: Sequence[AggregateRow]) -> Tuple[str, str]:
    """(plain text, CSV) table of methods x percentages, accuracies in percent."""
    pcts = sorted({r.percentage for r in rows})
    methods = sorted({r.method for r in rows}, key=_method_rank)
    cell = {(r.method, r.percentage): r for r in rows}
    header = ["method"] + [f"{p}%" for p in pcts]
    body = [[m] + [_fmt_cell(cell[(m, p)]) if (m, p) in cell else "-" for p in pcts] for m in methods]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    text = "\n".join(
        " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
        for line in [header] + body
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "percentage", "mean_accuracy", "std_accuracy", "n_seeds"])
    for m in methods:
        for p in pcts:
            if (m, p) in cell:
                r = cell[(m, p)]
                w.writerow([m, p, f"{r.mean_accuracy:.6f}", f"{r.std_accuracy:.6f}", r.n_seeds])
    return text + "\n", buf.getvalue()


def plot_confusion(cm: np.ndarray, classes: Sequence[str], title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    n = len(classes)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n), dpi=100)
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xticks(range(n), classes, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(n), classes, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def report(results_dir, out_dir=None) -> Dict[str, Path]:
    """Write report.txt / report.csv and per-run confusion matrices (CSV + PNG)."""
    results = load_results(results_dir)
    if not results:
        raise ReportError(f"nothing to report: no run records under {results_dir}")
    out = Path(out_dir) if out_dir is not None else Path(results_dir) / "report"
    (out / "confusion").mkdir(parents=True, exist_ok=True)
    text, table_csv = render_table(aggregate(results))
    written = {"table_txt": out / "report.txt", "table_csv": out / "report.csv"}
    _atomic_write(written["table_txt"], text)
    _atomic_write(written["table_csv"], table_csv)
    for r in results:
        cm = np.asarray(r.confusion, dtype=np.int64)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + r.classes)
        for name, row in zip(r.classes, cm.tolist()):
            w.writerow([name] + row)
        csv_path = out / "confusion" / f"{r.run_id}.csv"
        _atomic_write(csv_path, buf.getvalue())
        png_path = out / "confusion" / f"{r.run_id}.png"
        plot_confusion(cm, r.classes, f"{r.method} {r.percentage}% seed {r.seed}", png_path)
        written[r.run_id] = png_path
    return written

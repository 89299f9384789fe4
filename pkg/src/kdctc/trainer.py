"""Training loop: global forward (teacher + main loss), local forward (student),
combined objective, one SGD-with-momentum update of the shared parameters."""

from __future__ import annotations

import logging
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import Classifier, save_checkpoint
from .data_manifest import SplitManifest
from .image_pipeline import GLOBAL_SIZE, LOCAL_SIZE, Batch, ImageLoader, make_batch
from .objectives import (
    CROSS_ENTROPY,
    FOCAL,
    LossConfig,
    LossReport,
    cross_entropy,
    distillation_loss,
    teacher_hard_label,
    total_loss,
    uses_focal,
)

logger = logging.getLogger(__name__)

METHODS = ("kd_ctcnet", "vanilla", "vanilla_plus_sampling")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "kd_ctcnet"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    total_steps: int = 3000
    alpha: float = 0.1
    n_min: int = 20
    focal_gamma: float = 2.0
    local_branch: bool = True
    mixed_precision: bool = False
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    dump_patches: bool = False
    arch: str = "resnet50"
    pretrained: Optional[str] = None
    tiny_blocks: int = 4
    tiny_width: int = 8
    global_size: int = GLOBAL_SIZE
    local_size: int = LOCAL_SIZE

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.loss_cfg  # validates alpha / n_min / gamma

    @property
    def loss_cfg(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, n_min=self.n_min, focal_gamma=self.focal_gamma)

    def resolved(self) -> "TrainConfig":
        """Apply what each method implies.

        ``vanilla``: no local branch and alpha = 0, so the loss is 0.5 * CE.
        ``vanilla_plus_sampling``: the local crop is scored against the ground
        truth with CE and weighted like the main term (alpha = 1).
        """
        if self.method == "vanilla":
            return replace(self, alpha=0.0, local_branch=False)
        if self.method == "vanilla_plus_sampling":
            return replace(self, alpha=1.0, local_branch=True)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**values)


@dataclass
class TrainState:
    model: Classifier
    moments: List[torch.Tensor]
    rng: np.random.Generator
    n_im_per_class: int
    step: int = 0
    history: List[LossReport] = field(default_factory=list)


def init_state(model: Classifier, n_im_per_class: int, seed: int) -> TrainState:
    moments = [torch.zeros_like(p) for p in model.parameters()]
    return TrainState(model, moments, np.random.default_rng(seed), n_im_per_class)


@torch.no_grad()
def sgd_momentum_update(params, grads, moments, lr: float, momentum: float):
    """v <- momentum * v + g;  p <- p - lr * v.  In place; no dampening or decay."""
    params, grads, moments = list(params), list(grads), list(moments)
    if not len(params) == len(grads) == len(moments):
        raise RuntimeError("params, grads and moments must align")
    for p, g, v in zip(params, grads, moments):
        if p.shape != g.shape or p.shape != v.shape:
            raise RuntimeError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        v.mul_(momentum).add_(g)
        p.sub_(lr * v)
    return params, moments


def compute_losses(
    model: Classifier,
    global_views: torch.Tensor,
    local_views: Optional[torch.Tensor],
    labels: torch.Tensor,
    n_im_per_class: int,
    cfg: TrainConfig,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, str]:
    """Return (total, l_main, l_dist, variant) for one batch; cfg must be resolved."""
    loss_cfg = cfg.loss_cfg
    autocast = (
        torch.autocast("cpu", dtype=torch.bfloat16) if cfg.mixed_precision else nullcontext()
    )
    with autocast:
        z_t = model(global_views)
    z_t = z_t.float() if cfg.mixed_precision else z_t
    l_main = cross_entropy(z_t, labels)

    variant = FOCAL if uses_focal(n_im_per_class, loss_cfg) else CROSS_ENTROPY
    if cfg.method == "vanilla_plus_sampling":
        variant = CROSS_ENTROPY
    if cfg.local_branch and local_views is not None:
        with autocast:
            z_s = model(local_views)
        z_s = z_s.float() if cfg.mixed_precision else z_s
        if cfg.method == "vanilla_plus_sampling":
            l_dist = cross_entropy(z_s, labels)
        else:
            l_dist, variant = distillation_loss(z_s, teacher_hard_label(z_t), n_im_per_class, loss_cfg)
    else:
        l_dist = torch.zeros((), dtype=l_main.dtype)
    return total_loss(l_main, l_dist, loss_cfg), l_main, l_dist, variant


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> Tuple[TrainState, LossReport]:
    cfg = cfg.resolved()
    model = state.model
    model.train()
    params = list(model.parameters())
    dtype = params[0].dtype
    total, l_main, l_dist, variant = compute_losses(
        model,
        batch.global_views.to(dtype),
        batch.local_views.to(dtype),
        batch.labels,
        state.n_im_per_class,
        cfg,
    )
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step} (l_main={l_main.item()}, "
            f"l_dist={l_dist.item()}); batch entries: {batch.paths}"
        )
    grads = torch.autograd.grad(total, params)
    sgd_momentum_update(params, grads, state.moments, cfg.lr, cfg.momentum)
    report = LossReport(
        l_main=l_main.item(),
        l_dist=l_dist.item(),
        total=total.item(),
        dist_variant=variant,
        n_im_per_class=state.n_im_per_class,
    )
    state.step += 1
    state.history.append(report)
    return state, report


def iterate_batches(entries: Sequence, batch_size: int, rng: np.random.Generator):
    """Endless seeded-shuffled epochs; the final partial batch is kept."""
    entries = list(entries)
    while True:
        order = rng.permutation(len(entries))
        for start in range(0, len(order), batch_size):
            yield [entries[i] for i in order[start : start + batch_size]]


def train(
    train_manifest: SplitManifest,
    cfg: TrainConfig,
    model: Classifier,
    loader: Optional[Callable] = None,
    val_manifest: Optional[SplitManifest] = None,
    out_dir=None,
) -> Tuple[Classifier, List[LossReport]]:
    """Train for ``cfg.total_steps`` steps and return (model, loss history).

    With ``out_dir`` set, step metrics go to ``steps.tsv`` and a checkpoint is
    written every ``checkpoint_every`` steps, on completion and on abort.
    """
    if not train_manifest.entries:
        raise ValueError("training manifest is empty")
    if tuple(model.class_names) != tuple(train_manifest.classes):
        raise ValueError(
            f"model classes {model.class_names} differ from manifest classes {train_manifest.classes}"
        )
    cfg = cfg.resolved()
    if loader is None:
        loader = ImageLoader(train_manifest.root)
    state = init_state(model, train_manifest.per_class_count, cfg.seed)
    batches = iterate_batches(train_manifest.entries, cfg.batch_size, state.rng)

    out = Path(out_dir) if out_dir is not None else None
    step_log = patch_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        step_log = open(out / "steps.tsv", "w", encoding="utf-8", newline="\n")
        step_log.write("step\tl_main\tl_dist\tvariant\ttotal\tlr\n")
        if cfg.dump_patches:
            patch_log = open(out / "patches.tsv", "w", encoding="utf-8", newline="\n")
            patch_log.write("step\tpath\tfraction\ttop\tleft\tside\n")
    try:
        while state.step < cfg.total_steps:
            entries = next(batches)
            batch = make_batch(entries, loader, True, state.rng, cfg.global_size, cfg.local_size)
            if patch_log is not None:
                for path, spec in zip(batch.paths, batch.patches):
                    patch_log.write(f"{state.step}\t{path}\t{spec.as_line()}\n")
            state, rep = train_step(state, batch, cfg)
            if step_log is not None:
                step_log.write(
                    f"{state.step}\t{rep.l_main:.6g}\t{rep.l_dist:.6g}\t{rep.dist_variant}"
                    f"\t{rep.total:.6g}\t{cfg.lr:g}\n"
                )
            if cfg.eval_every and val_manifest is not None and state.step % cfg.eval_every == 0:
                from .experiment import evaluate

                res = evaluate(model, val_manifest, loader=loader, image_size=cfg.global_size)
                logger.info("step %d: val accuracy %.4f", state.step, res["test_accuracy"])
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"step_{state.step}.ckpt")
    except Exception:
        if out is not None:
            save_checkpoint(model, out / "abort.ckpt", extra={"step": state.step})
        raise
    finally:
        for f in (step_log, patch_log):
            if f is not None:
                f.close()
    if out is not None:
        save_checkpoint(model, out / "final.ckpt", extra={"step": state.step})
    return model, state.history

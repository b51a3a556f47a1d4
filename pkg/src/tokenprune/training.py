"""Alternating dense/sparse training with optional token-level distillation.

One unified model is trained by alternating epochs: sparse epochs apply the
planned token mask after the prune layer (sentinel-masked attention, so batch
shapes stay uniform), dense epochs skip sparsification but still compute the
mask for logging. An optional teacher supplies a per-image target distribution
over patch tokens (its last-layer CLS attention row); the student's
head-softmaxed importance distribution at the prune layer is pulled toward it
with a KL term weighted by ``distill_weight``.

Epoch parity: by default epoch 1 is sparse and even epochs are dense;
``dense_first`` flips this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor, cross_entropy, kl_divergence, no_grad
from .errors import ContractError, IncompatibleError
from .model import VisionTransformer
from .optim import AdamW
from .rng import Rng
from .sparsify import PruneConfig, cls_row_scores, head_softmax_scores

LOG_FIELDS = ("epoch", "mode", "label_loss", "distill_loss", "density", "acc_dense", "acc_sparse")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 2
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    distill_weight: float = 0.0
    prune: PruneConfig | None = None
    seed: int = 0
    dense_first: bool = False
    eval_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.distill_weight < 0:
            raise ContractError("distill_weight must be >= 0")
        if self.distill_weight > 0 and self.prune is None:
            raise ContractError("distillation needs a prune config to define the prune layer")


@dataclass
class EpochLog:
    epoch: int
    mode: str
    label_loss: float
    distill_loss: float
    density: float
    acc_dense: float
    acc_sparse: float

    def line(self) -> str:
        """One log line; field order is LOG_FIELDS."""
        return (
            f"epoch={self.epoch} mode={self.mode} label_loss={self.label_loss:.6f} "
            f"distill_loss={self.distill_loss:.6f} density={self.density:.5f} "
            f"acc_dense={self.acc_dense:.4f} acc_sparse={self.acc_sparse:.4f}"
        )

    @staticmethod
    def parse(line: str) -> "EpochLog":
        kv = dict(item.split("=", 1) for item in line.split())
        return EpochLog(
            epoch=int(kv["epoch"]), mode=kv["mode"],
            label_loss=float(kv["label_loss"]), distill_loss=float(kv["distill_loss"]),
            density=float(kv["density"]), acc_dense=float(kv["acc_dense"]),
            acc_sparse=float(kv["acc_sparse"]),
        )


def epoch_mode(epoch: int, dense_first: bool = False) -> str:
    """Mode for a 1-based epoch index: odd epochs sparse unless dense_first."""
    odd = epoch % 2 == 1
    if dense_first:
        return "dense" if odd else "sparse"
    return "sparse" if odd else "dense"


def teacher_target(teacher: VisionTransformer, images) -> np.ndarray:
    """Per-sample target distribution over patch tokens: the teacher's
    last-layer CLS attention row, head-averaged and renormalized. No gradients."""
    last = teacher.config.num_layers - 1
    with no_grad():
        out = teacher.forward(images, capture_layers=(last,))
    return cls_row_scores(out.records[-1].probs.data).scores


def distill_loss(record_probs: Tensor, target: np.ndarray) -> Tensor:
    """KL from the student's head-softmaxed importance distribution to the target."""
    student = head_softmax_scores(record_probs)
    target = np.asarray(target, dtype=student.data.dtype)
    if student.shape != target.shape:
        raise IncompatibleError(f"teacher target shape {target.shape} does not match student {student.shape}")
    return kl_divergence(student, Tensor(target))


def total_loss(label_loss: Tensor, distill: Tensor | None, distill_weight: float) -> Tensor:
    if distill_weight < 0:
        raise ContractError("distill_weight must be >= 0")
    if distill is None or distill_weight == 0:
        return label_loss
    return label_loss + distill_weight * distill


def cosine_lr(step: int, total_steps: int, warmup_steps: int, lr: float, min_lr: float) -> float:
    if step < warmup_steps:
        return lr * (step + 1) / max(warmup_steps, 1)
    span = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * t))


def evaluate(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    prune: PruneConfig | None = None,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Top-1 accuracy and mean token density over a dataset (no gradients)."""
    if prune is not None and prune.strategy == "none":
        prune = None
    correct = 0
    dens_total = 0.0
    n = images.shape[0]
    with no_grad():
        for start in range(0, n, batch_size):
            xb = images[start:start + batch_size]
            yb = labels[start:start + batch_size]
            out = model.forward(xb, prune=prune)
            correct += int((out.logits.data.argmax(axis=1) == yb).sum())
            dens_total += float(out.densities.sum()) if out.densities is not None else float(len(yb))
    return correct / n, dens_total / n


def _teacher_targets_cached(teacher: VisionTransformer, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Targets for the whole (un-augmented) training set; the teacher is frozen,
    so one pass suffices and later epochs reuse the cache bit-identically."""
    n = images.shape[0]
    out = np.empty((n, teacher.config.num_patches), dtype=np.float32)
    for start in range(0, n, batch_size):
        out[start:start + batch_size] = teacher_target(teacher, images[start:start + batch_size])
    return out


def train_epoch(
    model: VisionTransformer,
    optimizer: AdamW,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    order: np.ndarray,
    teacher_targets: np.ndarray | None = None,
    lr_for_step=None,
    step_offset: int = 0,
) -> EpochLog:
    """One pass over the data in the epoch's mode; one optimizer step per batch."""
    mode = epoch_mode(epoch, cfg.dense_first)
    beta = cfg.distill_weight
    prune = cfg.prune
    sparsify_active = prune is not None and prune.strategy != "none"
    train_prune = replace(prune, exec_mode="masked") if sparsify_active else None

    label_sum = distill_sum = dens_sum = 0.0
    n_batches = 0
    n = images.shape[0]
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb, yb = images[idx], labels[idx]

        if sparsify_active:
            out = model.forward(xb, prune=train_prune, apply_sparsification=(mode == "sparse"))
            dens_sum += float(out.densities.mean())
        elif beta > 0:
            out = model.forward(xb, capture_layers=(prune.prune_layer,))
            dens_sum += 1.0
        else:
            out = model.forward(xb)
            dens_sum += 1.0

        l_label = cross_entropy(out.logits, yb)
        l_distill = None
        if beta > 0:
            rec = next(r for r in out.records if r.layer == prune.prune_layer)
            l_distill = distill_loss(rec.probs, teacher_targets[idx])
            distill_sum += float(l_distill.data)
        loss = total_loss(l_label, l_distill, beta)
        loss.backward()
        lr = lr_for_step(step_offset + n_batches) if lr_for_step else None
        optimizer.step(lr=lr)
        optimizer.zero_grad()
        label_sum += float(l_label.data)
        n_batches += 1

    return EpochLog(
        epoch=epoch, mode=mode,
        label_loss=label_sum / n_batches,
        distill_loss=distill_sum / n_batches,
        density=dens_sum / n_batches,
        acc_dense=float("nan"), acc_sparse=float("nan"),
    )


def train(
    model: VisionTransformer,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    eval_images: np.ndarray,
    eval_labels: np.ndarray,
    cfg: TrainConfig,
    teacher: VisionTransformer | None = None,
    log_fn=None,
    checkpoint_path: str | None = None,
    start_epoch: int = 1,
    optimizer: AdamW | None = None,
    rng: Rng | None = None,
) -> list[EpochLog]:
    """Run the full schedule; returns one EpochLog per epoch.

    start_epoch/optimizer/rng allow resuming from a checkpoint: restoring the
    saved optimizer state and rng state reproduces the uninterrupted
    trajectory bit for bit.
    """
    from .checkpoint import Checkpoint, save_checkpoint  # local import, no cycle

    beta = cfg.distill_weight
    if beta > 0:
        if teacher is None:
            raise ContractError("distill_weight > 0 requires a teacher model")
        if teacher.config.num_patches != model.config.num_patches:
            raise IncompatibleError(
                f"teacher has {teacher.config.num_patches} patches, student {model.config.num_patches}"
            )
    if cfg.prune is not None and cfg.prune.prune_layer >= model.config.num_layers:
        raise ContractError("prune_layer outside the model's layers")

    rng = rng or Rng(cfg.seed)
    optimizer = optimizer or AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    targets = _teacher_targets_cached(teacher, train_images, cfg.batch_size) if beta > 0 else None

    steps_per_epoch = math.ceil(train_images.shape[0] / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    def lr_for_step(step: int) -> float:
        return cosine_lr(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr)

    def save(epoch: int, path: str) -> None:
        ckpt = Checkpoint(
            config=model.config,
            params={k: p.data for k, p in model.parameters().items()},
            opt_state=optimizer.state_dict(),
            epoch=epoch,
            rng_state=rng.state(),
            extra={"seed": cfg.seed},
        )
        save_checkpoint(path, ckpt)

    logs: list[EpochLog] = []
    if start_epoch > cfg.epochs:
        return logs
    for epoch in range(start_epoch, cfg.epochs + 1):
        expected = epoch_mode(epoch, cfg.dense_first)
        order = rng.permutation(train_images.shape[0])
        log = train_epoch(
            model, optimizer, train_images, train_labels, cfg, epoch, order,
            teacher_targets=targets, lr_for_step=lr_for_step,
            step_offset=(epoch - 1) * steps_per_epoch,
        )
        assert log.mode == expected, f"mode alternation violated at epoch {epoch}"

        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            acc_dense, _ = evaluate(model, eval_images, eval_labels)
            if cfg.prune is not None and cfg.prune.strategy != "none":
                acc_sparse, _ = evaluate(model, eval_images, eval_labels, prune=cfg.prune)
            else:
                acc_sparse = acc_dense
            log.acc_dense, log.acc_sparse = acc_dense, acc_sparse

        logs.append(log)
        if log_fn:
            log_fn(log)
        if checkpoint_path and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save(epoch, checkpoint_path)
    if checkpoint_path:
        save(cfg.epochs, checkpoint_path)
    return logs

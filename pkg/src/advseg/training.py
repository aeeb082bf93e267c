"""Mini-batch momentum-SGD training of stage networks, optionally with FGSM mixing."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig, mix_batch
from .autodiff import Tensor
from .cascade import MONOLITHIC, PLANS, StagePlan, ground_truth_boxes, relabel, stage_presence
from .evaluation import CascadeModel, MonolithicModel, StageSample
from .losses import combined_loss
from .metrics import dice_per_class, mean_dice, UndefinedMetricError
from .segnet import NetSpec, Params, forward, init_params, predict_labelmap, stack_size

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float | None = 5.0
    lr_schedule: str = "cosine"
    lambda_cls: float = 1.0
    defense: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    """Which model ingredients are switched on, plus network geometry."""

    class_head: bool = True
    cascade: bool = False
    bbox_margin: int = 4
    base_width: int = 16
    depth: int = 2

    def label(self, defense: bool) -> str:
        parts = ["base"]
        if self.class_head:
            parts.append("class")
        if defense:
            parts.append("defense")
        if self.cascade:
            parts.append("coarse2fine")
        return "+".join(parts)


LR_SCHEDULES = ("constant", "cosine")


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Rate for optimizer step ``step`` of ``total`` (0-based)."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
    raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def stage_samples(samples, plan: StagePlan, margin: int = 4, align: int = 4) -> list[StageSample]:
    """Teacher-forced training inputs for one plan (crops from ground-truth boxes)."""
    out = []
    for s in samples:
        if plan.stage in (0, 1):
            image, full = s.image, s.labels
        else:
            box2, box3 = ground_truth_boxes(s.labels, margin, align)
            box = box2 if plan.stage == 2 else box3
            if box is None:
                continue
            image, full = s.image[:, box.y0:box.y1, box.x0:box.x1], s.labels[box.slices]
        lab = relabel(plan, full)
        out.append(StageSample(np.ascontiguousarray(image), lab, stage_presence(plan, lab)))
    return out


def _chunks(samples):
    """Same-shape groups of samples, split into stacks of ``stack_size``."""
    groups = defaultdict(list)
    for s in samples:
        groups[s.image.shape].append(s)
    for shape, members in groups.items():
        size = stack_size(shape)
        for i in range(0, len(members), size):
            yield members[i:i + size]


def batch_gradients(params: Params, batch, lam: float):
    """Mean combined loss over ``batch`` and its GradMap."""
    n = len(batch)
    total = None
    with ad.Tape() as tape:
        for members in _chunks(batch):
            out = forward(params, Tensor(np.stack([s.image for s in members])))
            terms = combined_loss(
                out.seg_logits,
                np.stack([s.labels for s in members]),
                out.presence_logits,
                np.stack([s.presence for s in members]),
                lam,
            )
            part = ad.scale(terms.combined, len(members) / n)
            total = part if total is None else ad.add(total, part)
    return total.item(), ad.backward(total, tape)


def stage_mean_dice(params: Params, samples: list[StageSample], plan: StagePlan) -> float:
    """Sample-averaged Dice over the plan's foreground classes."""
    dices = []
    for part in _chunks(samples):
        with ad.no_tape():
            out = forward(params, Tensor(np.stack([s.image for s in part])))
        pred = predict_labelmap(out.seg_logits)
        dices.extend(dice_per_class(p, s.labels, plan.foreground) for p, s in zip(pred, part))
    try:
        return mean_dice(dices)
    except UndefinedMetricError:
        return float("nan")


def train_network(
    plan: StagePlan,
    train: list[StageSample],
    spec: NetSpec,
    cfg: TrainConfig,
    val: list[StageSample] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Params, list[dict]]:
    params = init_params(spec, derive_seed(cfg.seed, plan.stage, 0))
    rng = np.random.default_rng(derive_seed(cfg.seed, plan.stage, 1))
    velocity = None
    history = []
    n = len(train)
    per_epoch = -(-n // cfg.batch_size)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            if cfg.defense:
                try:
                    batch = mix_batch(batch, params, cfg.attack, rng, cfg.lambda_cls)
                except ad.NonFiniteGradientError as exc:
                    raise TrainingDivergedError(epoch, b, "input gradient") from exc
            loss, grads = batch_gradients(params, batch, cfg.lambda_cls)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            try:
                lr = learning_rate(cfg, step, per_epoch * cfg.epochs)
                velocity = ad.sgd_step(params, grads, lr, cfg.momentum, velocity, clip_norm=cfg.clip_norm)
            except ad.NonFiniteGradientError as exc:
                raise TrainingDivergedError(epoch, b, f"gradient ({exc.name})") from exc
            losses.append(loss)
            step += 1
        record = {
            "stage": plan.stage,
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "val_dice": stage_mean_dice(params, val, plan) if val else float("nan"),
        }
        history.append(record)
        logger.debug("stage %d epoch %d loss %.4f val %.4f", plan.stage, epoch, record["loss"], record["val_dice"])
        if on_epoch is not None:
            on_epoch(record)
    return params, history


def train_model(model_cfg: ModelConfig, train_cfg: TrainConfig, train, val=None, stages=(1, 2, 3),
                on_epoch=None):
    """Train the monolithic network or the requested cascade stages.

    Returns ``(model_or_None, {checkpoint_name: Params}, history)``; the model
    is None when only part of a cascade was trained.
    """
    lam = train_cfg.lambda_cls if model_cfg.class_head else 0.0
    cfg = TrainConfig(**{**train_cfg.__dict__, "lambda_cls": lam})
    align = 2 ** model_cfg.depth
    history: list[dict] = []
    if not model_cfg.cascade:
        plan = MONOLITHIC
        spec = NetSpec(stage_classes=plan.n_classes, base_width=model_cfg.base_width, depth=model_cfg.depth)
        params, hist = train_network(plan, stage_samples(train, plan), spec, cfg,
                                     stage_samples(val, plan) if val else None, on_epoch)
        return MonolithicModel(params), {"model": params}, hist
    trained = {}
    for stage in stages:
        plan = PLANS[stage - 1]
        spec = NetSpec(stage_classes=plan.n_classes, base_width=model_cfg.base_width, depth=model_cfg.depth)
        tr = stage_samples(train, plan, model_cfg.bbox_margin, align)
        va = stage_samples(val, plan, model_cfg.bbox_margin, align) if val else None
        params, hist = train_network(plan, tr, spec, cfg, va, on_epoch)
        trained[f"stage{stage}"] = params
        history.extend(hist)
    model = None
    if len(trained) == 3:
        model = CascadeModel(trained["stage1"], trained["stage2"], trained["stage3"], model_cfg.bbox_margin)
    return model, trained, history

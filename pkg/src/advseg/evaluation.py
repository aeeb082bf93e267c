"""Trained-model wrappers and evaluation over a sample list."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cascade import MONOLITHIC, STAGE1, CascadeTrace, cascade_predict, cascade_presence, params_predictor, relabel, stage_presence
from .metrics import EvalReport
from .segnet import Params, forward, predict_labelmap, predict_presence, stack_size


@dataclass(frozen=True)
class StageSample:
    """Image with labels and presence targets expressed in one stage's taxonomy."""

    image: np.ndarray
    labels: np.ndarray
    presence: np.ndarray


class MonolithicModel:
    """One network over the full 9-label taxonomy."""

    def __init__(self, params: Params):
        self.params = params

    @property
    def attack_params(self) -> Params:
        return self.params

    def attack_target(self, sample) -> StageSample:
        return StageSample(sample.image, sample.labels, sample.presence)

    def predict(self, images: np.ndarray):
        labels, presence = [], []
        batch_size = stack_size(images[0].shape) if len(images) else 1
        for i in range(0, len(images), batch_size):
            with ad.no_tape():
                out = forward(self.params, Tensor(np.stack(images[i:i + batch_size])))
            labels.append(predict_labelmap(out.seg_logits))
            presence.append(predict_presence(out.presence_logits))
        return np.concatenate(labels), np.concatenate(presence)


class CascadeModel:
    """Three stage networks run coarse to fine; attacks target the full-image stage."""

    def __init__(self, p1: Params, p2: Params, p3: Params, margin: int = 4):
        self.stages = (p1, p2, p3)
        self.margin = margin

    @property
    def attack_params(self) -> Params:
        return self.stages[0]

    def attack_target(self, sample) -> StageSample:
        lab = relabel(STAGE1, sample.labels)
        return StageSample(sample.image, lab, stage_presence(STAGE1, lab))

    def trace(self, image: np.ndarray) -> CascadeTrace:
        preds = [params_predictor(p) for p in self.stages]
        aligns = [p.spec.align for p in self.stages]
        return cascade_predict(preds, image, self.margin, aligns)

    def predict(self, images):
        traces = [self.trace(img) for img in images]
        return np.stack([t.labels for t in traces]), np.stack([cascade_presence(t) for t in traces])


def evaluate(model, samples, images=None, oracle: bool = False, presence: bool = True) -> EvalReport:
    """Score ``model`` on ``samples``; ``images`` optionally replaces the inputs."""
    report = EvalReport()
    if not samples:
        return report
    inputs = [s.image for s in samples] if images is None else list(images)
    if oracle:
        pred_labels = np.stack([s.labels for s in samples])
        pred_presence = np.stack([s.presence for s in samples])
    else:
        pred_labels, pred_presence = model.predict(inputs)
    for s, lab, pres in zip(samples, pred_labels, pred_presence):
        if presence:
            report.add(lab, s.labels, pres, s.presence)
        else:
            report.add(lab, s.labels)
    return report


__all__ = ["StageSample", "MonolithicModel", "CascadeModel", "evaluate", "MONOLITHIC"]

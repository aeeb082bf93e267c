"""FGSM adversarial examples, online clean/adversarial batch mixing, attack evaluation."""
from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import evaluate
from .losses import combined_loss
from .segnet import Params, forward, stack_size


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    mix_ratio: float = 0.5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be below clamp_hi")
        if self.epsilon > self.clamp_hi - self.clamp_lo:
            raise ValueError("epsilon exceeds the intensity range")
        if not 0 <= self.mix_ratio <= 1:
            raise ValueError("mix_ratio must lie in [0, 1]")


def input_gradient(params: Params, image: np.ndarray, labels, presence_truth, lam: float = 1.0) -> np.ndarray:
    """d(combined loss)/d(image); parameters are read, never differentiated."""
    x = Tensor(image, requires_grad=True)
    frozen = params.frozen()
    with ad.Tape() as tape:
        out = forward(frozen, x)
        loss = combined_loss(out.seg_logits, labels, out.presence_logits, presence_truth, lam).combined
    grad = ad.backward(loss, tape, wrt=[x])[x]
    if not np.all(np.isfinite(grad)):
        raise ad.NonFiniteGradientError("input")
    return grad


def perturbation(grad: np.ndarray, epsilon: float) -> np.ndarray:
    """The pre-clamp step epsilon * sign(grad), with sign(0) = 0, in float64."""
    return float(epsilon) * np.sign(grad).astype(np.float64)


def apply_perturbation(image: np.ndarray, step: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Add ``step`` and clamp, keeping |x_adv - x| <= epsilon after float32 rounding."""
    x = np.asarray(image, dtype=np.float32)
    adv = (x.astype(np.float64) + step).astype(np.float32)
    over = np.abs(adv.astype(np.float64) - x.astype(np.float64)) > cfg.epsilon
    if over.any():
        adv[over] = np.nextafter(adv[over], x[over])
    lo, hi = np.float32(cfg.clamp_lo), np.float32(cfg.clamp_hi)
    return np.clip(adv, lo, hi)


def fgsm(params: Params, image: np.ndarray, labels, presence_truth, cfg: AttackConfig,
         lam: float = 1.0) -> np.ndarray:
    """x_adv = clamp(x + eps * sign(grad_x L), lo, hi) against the combined loss.

    Works on one ``[C,H,W]`` image or a batch ``[N,C,H,W]`` with matching
    labels and presence targets.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.min() < cfg.clamp_lo or image.max() > cfg.clamp_hi:
        raise ValueError("image intensities outside the clamp range")
    if cfg.epsilon == 0:
        return image.copy()
    grad = input_gradient(params, image, labels, presence_truth, lam)
    return apply_perturbation(image, perturbation(grad, cfg.epsilon), cfg)


def fgsm_many(params: Params, samples, cfg: AttackConfig, lam: float = 1.0) -> list[np.ndarray]:
    """FGSM for a list of samples, batching those that share a shape."""
    out: list[np.ndarray | None] = [None] * len(samples)
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.image.shape].append(i)
    batches = [idx[j:j + stack_size(shape)] for shape, idx in groups.items()
               for j in range(0, len(idx), stack_size(shape))]
    for idx in batches:
        images = np.stack([samples[i].image for i in idx])
        labels = np.stack([samples[i].labels for i in idx])
        presence = np.stack([samples[i].presence for i in idx])
        adv = fgsm(params, images, labels, presence, cfg, lam)
        for j, i in enumerate(idx):
            out[i] = adv[j]
    return out


def n_adversarial(n: int, mix_ratio: float) -> int:
    return int(np.floor(mix_ratio * n + 0.5))


def mix_batch(clean, params: Params, cfg: AttackConfig, rng: np.random.Generator, lam: float = 1.0):
    """Replace round(mix_ratio * n) randomly chosen images by their FGSM versions."""
    if not clean:
        raise ValueError("empty batch")
    n = len(clean)
    m = n_adversarial(n, cfg.mix_ratio)
    if m == 0:
        return list(clean)
    chosen = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    adv = fgsm_many(params, [clean[i] for i in chosen], cfg, lam)
    mixed = list(clean)
    for i, img in zip(chosen, adv):
        mixed[i] = dataclasses.replace(clean[i], image=img)
    return mixed


def attack_eval(model, samples, cfg: AttackConfig, lam: float = 1.0):
    """(clean report, attacked report); every image is replaced by its FGSM counterpart."""
    clean = evaluate(model, samples)
    if cfg.epsilon == 0:
        return clean, evaluate(model, samples)
    targets = [model.attack_target(s) for s in samples]
    adv_images = fgsm_many(model.attack_params, targets, cfg, lam)
    return clean, evaluate(model, samples, images=adv_images)

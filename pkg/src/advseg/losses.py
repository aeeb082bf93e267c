"""Hybrid CE + soft-Dice segmentation loss and the presence BCE.

Every function accepts a single image (``[K,H,W]`` logits, ``[H,W]`` labels)
or a batch (``[N,K,H,W]``, ``[N,H,W]``).  Batched results are the mean of the
per-image values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LabelRangeError(ValueError):
    pass


@dataclass
class LossTerms:
    ce: Tensor
    soft_dice_mean: Tensor
    seg_total: Tensor
    presence_bce: Tensor | None = None
    combined: Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("ce", "soft_dice_mean", "seg_total", "presence_bce", "combined")
                if getattr(self, k) is not None}


def one_hot(labels: np.ndarray, k: int, dtype=None) -> np.ndarray:
    """``[..., H, W]`` integer labels -> ``[..., K, H, W]`` indicator array."""
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelRangeError(f"label {int(labels[where])} at {where} outside [0, {k})")
    out = np.zeros(labels.shape[:-2] + (k,) + labels.shape[-2:], dtype=dtype or ad._dtype())
    np.put_along_axis(out, np.expand_dims(labels.astype(np.intp), -3), 1, axis=-3)
    return out


def _check(logits: Tensor, labels: np.ndarray) -> None:
    if logits.ndim not in (3, 4):
        raise ad.ShapeError(f"logits must be [K,H,W] or [N,K,H,W], got {logits.shape}")
    want = logits.shape[:-3] + logits.shape[-2:]
    if tuple(np.shape(labels)) != want:
        raise ad.ShapeError(f"labels shape {np.shape(labels)} does not match logits {logits.shape}")


def pixel_ce(seg_logits: Tensor, labels, probs: Tensor | None = None) -> Tensor:
    """Mean over pixels of -log p(true class)."""
    _check(seg_logits, labels)
    k = seg_logits.shape[-3]
    target = Tensor(one_hot(labels, k, seg_logits.data.dtype))
    if probs is None:
        probs = ad.channel_softmax(seg_logits)
    picked = ad.sum(ad.elementwise_mul(ad.log(probs), target))
    n_pixels = int(np.prod(np.shape(labels)))
    return ad.scale(picked, -1.0 / n_pixels)


def soft_dice(seg_probs: Tensor, labels, smooth: float = 1e-5) -> Tensor:
    """Mean soft Dice over foreground channels (channel 0 excluded)."""
    _check(seg_probs, labels)
    k = seg_probs.shape[-3]
    dtype = seg_probs.data.dtype
    g = one_hot(labels, k, dtype)
    batched = seg_probs.ndim == 4
    probs = seg_probs if batched else ad.reshape(seg_probs, (1,) + seg_probs.shape)
    g4 = g if batched else g[None]
    n = g4.shape[0]
    inter = ad.sum(ad.elementwise_mul(probs, Tensor(g4)), axes=(2, 3))
    psum = ad.sum(probs, axes=(2, 3))
    gsum = g4.sum(axis=(2, 3))
    num = ad.add(ad.scale(inter, 2.0), Tensor(np.full((n, k), smooth, dtype=dtype)))
    den = ad.add(psum, Tensor((gsum + smooth).astype(dtype)))
    dice = ad.div(num, den)
    fg = np.ones((n, k), dtype=dtype)
    fg[:, 0] = 0
    return ad.scale(ad.sum(ad.elementwise_mul(dice, Tensor(fg))), 1.0 / (n * (k - 1)))


def seg_loss(seg_logits: Tensor, labels, smooth: float = 1e-5) -> LossTerms:
    probs = ad.channel_softmax(seg_logits)
    ce = pixel_ce(seg_logits, labels, probs=probs)
    dice = soft_dice(probs, labels, smooth)
    one = Tensor(np.ones(1, dtype=seg_logits.data.dtype))
    total = ad.add(ce, ad.sub(one, dice))
    return LossTerms(ce=ce, soft_dice_mean=dice, seg_total=total)


def presence_bce(presence_logits: Tensor, presence_truth) -> Tensor:
    """Mean over classes of softplus(z) - c*z, i.e. the logit-stable BCE."""
    truth = np.asarray(presence_truth, dtype=presence_logits.data.dtype)
    if truth.shape != presence_logits.shape:
        raise ad.ShapeError(f"presence truth {truth.shape} does not match logits {presence_logits.shape}")
    z = presence_logits
    total = ad.sub(ad.sum(ad.softplus(z)), ad.sum(ad.elementwise_mul(z, Tensor(truth))))
    return ad.scale(total, 1.0 / max(truth.size, 1))


def combined_loss(seg_logits, labels, presence_logits, presence_truth, lam: float = 1.0) -> LossTerms:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    terms = seg_loss(seg_logits, labels)
    bce = presence_bce(presence_logits, presence_truth)
    terms.presence_bce = bce
    terms.combined = ad.add(terms.seg_total, ad.scale(bce, lam))
    return terms

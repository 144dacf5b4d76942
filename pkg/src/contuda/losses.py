"""Losses and maps used by the continual adaptation objective.

Probability maps are channels-first: ``(C, H, W)`` for one image or
``(B, C, H, W)`` for a batch, so they plug straight into torch convolutions.
Every function accepts numpy arrays or tensors and keeps the input dtype;
float64 inputs give float64 results, which the gradient tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import NonFiniteComponent, ValidationError

EPS = 1e-7
NORMALIZATION_TOL = 1e-4
DEFAULT_POD_SCALES = (1, 2)


@dataclass(frozen=True)
class LossWeights:
    """Balancing factors of the model objective.

    ``lambda_prev`` weights the previous-model KL inside the distribution
    distillation term, which is itself weighted by ``lambda_dd``.
    """

    lambda_adv: float = 1e-3
    lambda_dd: float = 1e-5
    lambda_fd: float = 1e-2
    lambda_prev: float = 1e-5

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_dd", "lambda_fd", "lambda_prev"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def check_prob_map(p: torch.Tensor, tol: float = NORMALIZATION_TOL) -> None:
    """Raise if ``p`` is not a per-pixel distribution over its class axis."""
    if p.dim() not in (3, 4):
        raise ValidationError(f"probability map must be (C,H,W) or (B,C,H,W), got {tuple(p.shape)}")
    with torch.no_grad():
        if p.numel() == 0:
            raise ValidationError("empty probability map")
        if bool((p < -tol).any()) or bool((p > 1 + tol).any()):
            raise ValidationError("probabilities outside [0, 1]")
        dev = (p.sum(dim=-3) - 1).abs().max().item()
    if dev > tol:
        raise ValidationError(f"pixel probabilities sum to 1 +/- {dev:.3g} (tolerance {tol:g})")


def self_information_map(p, check: bool = True) -> torch.Tensor:
    """Weighted self-information ``-p * ln p`` per pixel and class.

    Zero probabilities map to zero. The log argument is clamped at ``EPS`` so
    the backward pass stays finite when a softmax underflows.
    """
    p = _tensor(p)
    if check:
        check_prob_map(p)
    return -p * torch.log(p.clamp_min(EPS))


def bce(prediction, label) -> torch.Tensor:
    """Elementwise binary cross-entropy on probabilities clamped to ``[EPS, 1-EPS]``."""
    prediction = _tensor(prediction)
    label = torch.as_tensor(label, dtype=prediction.dtype)
    q = prediction.clamp(EPS, 1 - EPS)
    return -(label * torch.log(q) + (1 - label) * torch.log1p(-q))


def _nonempty(scores, name: str) -> torch.Tensor:
    scores = _tensor(scores)
    if scores.numel() == 0:
        raise ValidationError(f"empty {name} batch")
    return scores


def discriminator_loss(d_source, d_target) -> torch.Tensor:
    """Source patches labelled 1, target patches labelled 0, batch means of each."""
    d_source = _nonempty(d_source, "source")
    d_target = _nonempty(d_target, "target")
    return bce(d_source, 1.0).mean() + bce(d_target, 0.0).mean()


def adversarial_fool_loss(d_target) -> torch.Tensor:
    """Target patches scored against the source label.

    Only the segmentation model should step on this loss; the discriminator
    parameters receive gradients but belong to another optimizer.
    """
    d_target = _nonempty(d_target, "target")
    return bce(d_target, 1.0).mean()


def segmentation_ce(p, y) -> torch.Tensor:
    """Pixel-mean cross-entropy of probability map ``p`` against labels ``y``."""
    p = _tensor(p)
    y = _tensor(y).long()
    if p.dim() != y.dim() + 1 or p.shape[-2:] != y.shape[-2:] or p.shape[:-3] != y.shape[:-2]:
        raise ValidationError(f"shape mismatch: probabilities {tuple(p.shape)}, labels {tuple(y.shape)}")
    n_classes = p.shape[-3]
    if y.numel() and (int(y.max()) >= n_classes or int(y.min()) < 0):
        raise ValidationError(f"label outside [0, {n_classes})")
    picked = p.gather(-3, y.unsqueeze(-3)).squeeze(-3)
    return -torch.log(picked.clamp_min(EPS)).mean()


def kl_map(p_teacher, p_student) -> torch.Tensor:
    """KL divergence of student from teacher, summed over classes and pixels.

    Returns a scalar for a single map and one value per sample for a batch.
    The teacher is detached: no gradient reaches whatever produced it.
    """
    p_teacher = _tensor(p_teacher)
    p_student = _tensor(p_student)
    if p_teacher.shape != p_student.shape:
        raise ValidationError(
            f"shape mismatch: teacher {tuple(p_teacher.shape)}, student {tuple(p_student.shape)}"
        )
    if p_teacher.dim() not in (3, 4):
        raise ValidationError(f"expected (C,H,W) or (B,C,H,W), got {tuple(p_teacher.shape)}")
    t = p_teacher.detach()
    terms = torch.xlogy(t, t) - t * torch.log(p_student.clamp_min(EPS))
    return terms.sum(dim=(-3, -2, -1))


def _batch_mean(values):
    if isinstance(values, torch.Tensor):
        return values.mean() if values.numel() else None
    values = list(values)
    if not values:
        return None
    if any(isinstance(v, torch.Tensor) for v in values):
        return torch.stack([_tensor(v).reshape(()) for v in values]).mean()
    return float(np.mean(values))


def generalist_distillation_loss(kl_specialist_batch, kl_previous_batch, w: LossWeights):
    """Specialist-to-generalist KL plus ``lambda_prev`` times previous-model KL.

    Both inputs are per-sample KL values; an empty previous batch (first
    step) contributes nothing.
    """
    spec = _batch_mean(kl_specialist_batch)
    prev = _batch_mean(kl_previous_batch)
    if spec is None and prev is None:
        raise ValidationError("both KL batches are empty")
    total = 0.0 if spec is None else spec
    if prev is not None:
        total = total + w.lambda_prev * prev
    return total


def _check_scales(height: int, width: int, scales: Sequence[int]) -> None:
    if not scales:
        raise ValidationError("at least one pooling scale is required")
    for s in scales:
        if int(s) != s or s < 1:
            raise ValidationError(f"scale {s} is not a positive integer")
        if height % s or width % s:
            raise ValidationError(f"scale {s} does not divide feature size {height}x{width}")


def pod_embed(feature, scales: Sequence[int] = DEFAULT_POD_SCALES, normalize: bool = False) -> torch.Tensor:
    """Multi-scale width- and height-pooled slices of one feature layer.

    For each scale ``s`` the ``H x W`` grid is cut into ``s x s`` equal
    regions. Each region contributes its row means (pooled over width)
    followed by its column means (pooled over height). Layout is
    scale-major, then channel, then region in row-major order.

    ``normalize`` L2-normalizes each per-scale block per sample; off by
    default so the loss is a plain squared distance of pooled means.
    """
    x = _tensor(feature)
    batched = x.dim() == 4
    if not batched:
        if x.dim() != 3:
            raise ValidationError(f"feature must be (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    _check_scales(h, w, scales)
    blocks = []
    for s in scales:
        hr, wr = h // s, w // s
        regions = x.reshape(b, c, s, hr, s, wr)
        rows = regions.mean(dim=5).permute(0, 1, 2, 4, 3)  # b, c, s_i, s_j, hr
        cols = regions.mean(dim=3)  # b, c, s_i, s_j, wr
        block = torch.cat([rows, cols], dim=-1).reshape(b, -1)
        if normalize:
            block = torch.nn.functional.normalize(block, dim=1)
        blocks.append(block)
    out = torch.cat(blocks, dim=1)
    return out if batched else out[0]


def local_pod_loss(current, previous, scales: Sequence[int] = DEFAULT_POD_SCALES, normalize: bool = False):
    """Layer-averaged squared distance between pooled embeddings.

    ``current`` and ``previous`` are feature stacks (sequences of layers).
    The previous stack is detached. For batched layers the per-sample
    values are averaged over the batch.
    """
    current = [_tensor(f) for f in current]
    previous = [_tensor(f) for f in previous]
    if not current:
        raise ValidationError("empty feature stack")
    if len(current) != len(previous):
        raise ValidationError(f"stack length mismatch: {len(current)} vs {len(previous)}")
    total = 0.0
    for layer, (cur, prev) in enumerate(zip(current, previous)):
        if cur.shape != prev.shape:
            raise ValidationError(f"layer {layer} shape mismatch: {tuple(cur.shape)} vs {tuple(prev.shape)}")
        diff = pod_embed(cur, scales, normalize) - pod_embed(prev.detach(), scales, normalize)
        total = total + diff.pow(2).sum(dim=-1)
    total = total / len(current)
    return total.mean() if total.dim() else total


def total_model_loss(seg, adv, dd, fd, w: LossWeights):
    """Weighted sum of segmentation, adversarial, distribution and feature terms."""
    for name, value in (("seg", seg), ("adv", adv), ("dd", dd), ("fd", fd)):
        v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteComponent(name)
    return seg + w.lambda_adv * adv + w.lambda_dd * dd + w.lambda_fd * fd

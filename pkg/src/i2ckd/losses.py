"""Distillation and task losses with analytic gradients.

Every loss returns ``(value, gradient)`` so the trainer can attach it to the
autodiff graph as a single external node. Single-image functions take
``[C,H,W]`` / ``[K,h,w]`` arrays; the ``batch_*`` wrappers average the
per-image losses over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import IGNORE_LABEL, sequential_sum, validate_labels


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_i2ckd: float = 0.6
    lambda_sm: float = 3.0
    temperature: float = 2.0
    margin: float = 0.1  # not given by the method description; exposed as a flag

    def __post_init__(self):
        if self.temperature <= 0:
            raise LossError(f"temperature must be > 0, got {self.temperature}")
        if self.margin < 0:
            raise LossError(f"margin must be >= 0, got {self.margin}")
        if self.lambda_i2ckd < 0 or self.lambda_sm < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class PrototypeMatrix:
    values: np.ndarray  # [C, K]
    present: np.ndarray  # [C] bool
    counts: np.ndarray  # [C] pixel counts

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


def downsample_mask_nearest(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize: target pixel (y, x) reads source (y*H//h, x*W//w)."""
    H, W = mask.shape
    h, w = target
    if h < 1 or w < 1:
        raise LossError(f"target extent must be positive, got {target}")
    if h > H or w > W:
        raise LossError(f"target {target} larger than source {(H, W)}")
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return mask[np.ix_(rows, cols)]


def compute_prototypes(features: np.ndarray, mask: np.ndarray, num_classes: int) -> PrototypeMatrix:
    """Per-class mean of each feature channel over the pixels of that class.

    Pixel sums run in row-major order so the result is reproducible to the
    bit. Ignore pixels belong to no class; absent classes get a zero row and
    ``present=False``.
    """
    K = features.shape[0]
    if features.shape[1:] != mask.shape:
        raise LossError(f"feature map {features.shape[1:]} and mask {mask.shape} disagree")
    mask = validate_labels(mask, num_classes)
    flat_f = features.reshape(K, -1)
    flat_m = mask.reshape(-1)
    values = np.zeros((num_classes, K))
    counts = np.bincount(flat_m[flat_m != IGNORE_LABEL], minlength=num_classes)[:num_classes]
    for c in range(num_classes):
        if counts[c]:
            values[c] = sequential_sum(flat_f[:, flat_m == c], axis=1) / counts[c]
    return PrototypeMatrix(values, counts > 0, counts)


def prototype_backward(grad_protos: np.ndarray, mask: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Pull a [C,K] prototype gradient back onto the [K,h,w] feature map."""
    C, K = grad_protos.shape
    flat_m = mask.reshape(-1)
    valid = flat_m != IGNORE_LABEL
    per_class = np.zeros((C + 1, K))
    nz = counts > 0
    per_class[:C][nz] = grad_protos[nz] / counts[nz][:, None]
    idx = np.where(valid, flat_m, C).astype(np.intp)
    return per_class[idx].T.reshape((K,) + mask.shape)


def triplet_prototype_loss(protos_s: PrototypeMatrix, protos_t: PrototypeMatrix, margin: float):
    """Hinged triplet loss between student and teacher class prototypes.

    For every ordered pair (c, j) of distinct present classes the term is
    ``[m + |s_c - t_c| - |s_c - t_j|]_+``; the loss is the mean over pairs.
    Returns ``(loss, dloss/dstudent_prototypes, active_pairs)``.
    """
    ps, pt = protos_s.values, protos_t.values
    if ps.shape != pt.shape:
        raise LossError(f"prototype shapes differ: {ps.shape} vs {pt.shape}")
    present = protos_s.present & protos_t.present
    C = ps.shape[0]
    grad = np.zeros_like(ps)
    pairs = present[:, None] & present[None, :] & ~np.eye(C, dtype=bool)
    n_pairs = int(pairs.sum())
    if n_pairs == 0:
        return 0.0, grad, 0
    diff = ps[:, None, :] - pt[None, :, :]  # [c, j, K]: s_c - t_j
    dist = np.sqrt(np.einsum("cjk,cjk->cj", diff, diff))
    pos = np.diag(dist)
    terms = margin + pos[:, None] - dist
    active = pairs & (terms > 0)
    loss = float(np.sum(terms[active])) / n_pairs

    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    n_active = active.sum(axis=1)
    # d|s_c - t_c| contributes once per active pair of row c; d|s_c - t_j| subtracts
    pos_unit = unit[np.arange(C), np.arange(C)]
    grad = n_active[:, None] * pos_unit - np.einsum("cj,cjk->ck", active.astype(float), unit)
    return loss, grad / n_pairs, int(active.sum())


def _log_softmax(x: np.ndarray, axis) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def channel_kld_loss(scores_t: np.ndarray, scores_s: np.ndarray, temperature: float):
    """Channel-wise KL divergence between spatial softmaxes of score maps.

    Each channel's H*W logits are divided by the temperature and normalised
    into a distribution over positions. The per-channel KL(teacher||student)
    values are summed, scaled by T^2 and divided by the channel count.
    """
    if temperature <= 0:
        raise LossError(f"temperature must be > 0, got {temperature}")
    if scores_t.shape != scores_s.shape:
        raise LossError(f"score shapes differ: {scores_t.shape} vs {scores_s.shape}")
    C = scores_t.shape[0]
    T = float(temperature)
    log_pt = _log_softmax(scores_t.reshape(C, -1) / T, axis=1)
    log_ps = _log_softmax(scores_s.reshape(C, -1) / T, axis=1)
    pt, ps = np.exp(log_pt), np.exp(log_ps)
    coef = T * T / C
    loss = coef * float(np.sum(pt * (log_pt - log_ps)))
    grad = (coef / T) * (ps - pt)
    return loss, grad.reshape(scores_s.shape)


def task_cross_entropy(scores: np.ndarray, mask: np.ndarray, ignore: int = IGNORE_LABEL):
    """Pixel-mean cross-entropy over non-ignore pixels; 0 if all are ignored."""
    C = scores.shape[0]
    if scores.shape[1:] != mask.shape:
        raise LossError(f"scores {scores.shape[1:]} and mask {mask.shape} disagree")
    mask = np.asarray(mask)
    valid = mask != ignore
    if np.any(mask[valid] >= C):
        raise LossError(f"label {int(mask[valid].max())} out of range for {C} classes")
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(scores)
    logp = _log_softmax(scores, axis=0)
    flat = logp.reshape(C, -1)
    labels = np.where(valid, mask, 0).reshape(-1)
    picked = flat[labels, np.arange(labels.size)]
    loss = -float(np.sum(picked[valid.reshape(-1)])) / n
    grad = np.exp(logp)
    onehot = np.zeros_like(flat)
    onehot[labels, np.arange(labels.size)] = 1.0
    grad = (grad - onehot.reshape(scores.shape)) * valid[None] / n
    return loss, grad


def total_loss(parts: dict, weights: LossWeights) -> float:
    """lambda_i2ckd * l_i2ckd + lambda_sm * l_sm + l_task, summed in that order."""
    return (
        weights.lambda_i2ckd * parts["l_i2ckd"]
        + weights.lambda_sm * parts["l_sm"]
    ) + parts["l_task"]


# ---------------------------------------------------------------- batched


def batch_task_cross_entropy(scores: np.ndarray, masks: np.ndarray):
    B = scores.shape[0]
    grad = np.empty_like(scores)
    total = 0.0
    for b in range(B):
        loss, grad[b] = task_cross_entropy(scores[b], masks[b])
        total += loss
    return total / B, grad / B


def batch_channel_kld(scores_t: np.ndarray, scores_s: np.ndarray, temperature: float):
    B = scores_s.shape[0]
    grad = np.empty_like(scores_s)
    total = 0.0
    for b in range(B):
        loss, grad[b] = channel_kld_loss(scores_t[b], scores_s[b], temperature)
        total += loss
    return total / B, grad / B


def batch_i2ckd(features_t, features_s, masks, num_classes: int, margin: float):
    """Per-image prototype triplet loss averaged over the batch.

    Images with fewer than two present classes contribute zero. Masks are
    resampled to feature resolution when the two differ.
    Returns ``(loss, dloss/dfeatures_s, stats)``.
    """
    if features_t.shape != features_s.shape:
        raise LossError(
            f"teacher features {features_t.shape} and student features {features_s.shape} differ"
        )
    B = features_s.shape[0]
    grad = np.zeros_like(features_s)
    total = 0.0
    active = 0
    for b in range(B):
        mask = masks[b]
        if mask.shape != features_s.shape[2:]:
            mask = downsample_mask_nearest(mask, features_s.shape[2:])
        pt = compute_prototypes(features_t[b], mask, num_classes)
        ps = compute_prototypes(features_s[b], mask, num_classes)
        loss, gp, n_act = triplet_prototype_loss(ps, pt, margin)
        total += loss
        active += n_act
        if n_act:
            grad[b] = prototype_backward(gp, mask, ps.counts)
    return total / B, grad / B, {"active_pairs": active}

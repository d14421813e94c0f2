"""Training objectives.

The pose/motion-invariant (PMI) triplet is mined inside each identity group:
for every anchor, the positive is the same-identity sample closest in the
ID-irrelevant attribute space (L2 on raw features) and the negative the one
farthest away. The loss itself compares cosine distances of the *final*
features, pulling the attribute-space-far positive as close to the anchor as
the attribute-space-near one. Mining is detached from the gradient graph:
indices are constants of the step.

The remaining objectives follow their cited conventions: a softmax-weighted
regularization triplet over Euclidean distances (summed over anchors), a
squared-distance center loss (mean over the batch so the centers' plain SGD
step at lr 0.5 stays contractive), label-smoothed cross-entropy (mean over
the batch), and a per-category binary cross-entropy summed over categories
and averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, LabelError
from .nn import ParamRegistry
from .tensor import Tensor


class TripletIndex(NamedTuple):
    """Batch indices of one mined intra-identity triplet."""
    anchor: int
    positive: int
    negative: int


@dataclass
class LossWeights:
    lambda_cent: float = 1.5
    lambda_bce: float = 0.0005
    lambda_pmi_low: float = 0.005
    lambda_pmi_high: float = 0.01
    bce_threshold: float = 0.15
    smoothing_eps: float = 0.1

    def __post_init__(self):
        for name in ("lambda_cent", "lambda_bce", "lambda_pmi_low",
                     "lambda_pmi_high", "bce_threshold", "smoothing_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


class CenterBank:
    """One learnable center per training identity (optimizer group 'centers')."""

    def __init__(self, registry: ParamRegistry, num_identities: int, width: int):
        self.num_identities = num_identities
        self.centers = registry.register(
            "centers", np.zeros((num_identities, width)), group="centers", decay=False
        )


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def pmi_mine(ir_attr_feats, labels) -> list[TripletIndex]:
    """Mine one (anchor, nearest, farthest) triplet per eligible anchor.

    Distances are Euclidean on the raw ID-irrelevant attribute features.
    Identity groups with fewer than 3 members are skipped (the nearest and
    farthest co-member would coincide). Ties break to the lowest index; in
    the fully degenerate all-equal case the positive and negative coincide
    and the later loss term is exactly zero.
    """
    feats = _as_array(ir_attr_feats)
    labels = np.asarray(labels)
    triplets: list[TripletIndex] = []
    for ident in np.unique(labels):
        members = np.flatnonzero(labels == ident)
        if members.size < 3:
            continue
        group = feats[members]
        diffs = group[:, None, :] - group[None, :, :]
        dists = np.sqrt((diffs * diffs).sum(axis=-1))
        for a in range(members.size):
            row = dists[a].copy()
            row[a] = np.inf
            positive = int(np.argmin(row))
            row[a] = -np.inf
            negative = int(np.argmax(row))
            triplets.append(TripletIndex(
                int(members[a]), int(members[positive]), int(members[negative])
            ))
    return triplets


def _cosine_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise 1 - cos(a_i, b_i) for (N, d) tensors already checked nonzero."""
    dot = T.reduce_sum(a * b, axis=1)
    na = T.sqrt(T.reduce_sum(a * a, axis=1))
    nb = T.sqrt(T.reduce_sum(b * b, axis=1))
    return 1.0 - T.div(dot, na * nb)


def pmi_loss(triplets: Sequence[TripletIndex], final_feats: Tensor) -> Tensor:
    """Mean over triplets of max(d(anchor, negative-side) - d(anchor, positive-side), 0),
    with cosine distances on the final features."""
    if not triplets:
        return Tensor(0.0)
    norms = np.linalg.norm(_as_array(final_feats), axis=1)
    if np.any(norms == 0):
        raise DomainError("pmi_loss: zero-norm final feature, cosine undefined")
    anchors = np.array([t.anchor for t in triplets])
    positives = np.array([t.positive for t in triplets])
    negatives = np.array([t.negative for t in triplets])
    fa = T.take_rows(final_feats, anchors)
    fp = T.take_rows(final_feats, positives)
    fn = T.take_rows(final_feats, negatives)
    d_pos = _cosine_distance_rows(fa, fp)
    d_neg = _cosine_distance_rows(fa, fn)
    return T.reduce_mean(T.relu(d_neg - d_pos))


def _pairwise_euclidean(feats: Tensor) -> Tensor:
    """In-graph (B, B) Euclidean distance matrix; 1e-24 inside the sqrt keeps
    the gradient of coincident pairs finite (and exactly zero)."""
    b = feats.shape[0]
    gram = T.matmul(feats, T.transpose(feats))
    sq = T.reduce_sum(feats * feats, axis=1)
    sq_dist = T.reshape(sq, (b, 1)) + T.reshape(sq, (1, b)) - 2.0 * gram
    return T.sqrt(T.relu(sq_dist) + 1e-24)


def wrt_loss(final_feats: Tensor, labels, stats: dict | None = None) -> Tensor:
    """Softmax-weighted regularization triplet loss, summed over anchors.

    Per anchor, positive pair distances are weighted by softmax(+d) and
    negative pair distances by softmax(-d); the anchor contributes
    softplus(weighted_pos - weighted_neg). Anchors lacking a positive or a
    negative are skipped and counted in ``stats['skipped_anchors']``.
    """
    labels = np.asarray(labels)
    b = final_feats.shape[0]
    dist = _pairwise_euclidean(final_feats)

    terms = []
    skipped = 0
    for i in range(b):
        pos = np.flatnonzero((labels == labels[i]) & (np.arange(b) != i))
        neg = np.flatnonzero(labels != labels[i])
        if pos.size == 0 or neg.size == 0:
            skipped += 1
            continue
        row = T.take_rows(dist, np.array([i]))  # (1, B)
        d_pos = T.transpose(T.take_rows(T.transpose(row), pos))  # (1, P)
        d_neg = T.transpose(T.take_rows(T.transpose(row), neg))  # (1, N)
        w_pos = T.softmax_rows(d_pos)
        w_neg = T.softmax_rows(-d_neg)
        if stats is not None:
            stats.setdefault("weight_sums", []).append(
                (float(w_pos.data.sum()), float(w_neg.data.sum()))
            )
        gap = T.reduce_sum(w_pos * d_pos) - T.reduce_sum(w_neg * d_neg)
        terms.append(T.softplus(T.reshape(gap, (1,))))
    if stats is not None:
        stats["skipped_anchors"] = skipped
    if not terms:
        return Tensor(0.0)
    return T.reduce_sum(T.concat(terms, axis=0))


def center_loss(final_feats: Tensor, labels, bank: CenterBank) -> Tensor:
    """Mean over the batch of half the squared distance to the identity center."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= bank.num_identities):
        raise LabelError(f"identity label out of range [0, {bank.num_identities})")
    centers = T.take_rows(bank.centers, labels)
    diff = final_feats - centers
    return 0.5 * T.reduce_mean(T.reduce_sum(diff * diff, axis=1))


def smoothed_targets(labels, num_classes: int, eps: float) -> np.ndarray:
    """Label-smoothed target rows: 1 - (M-1)/M * eps on the true class, eps/M elsewhere."""
    labels = np.asarray(labels)
    targets = np.full((labels.size, num_classes), eps / num_classes)
    targets[np.arange(labels.size), labels] = 1.0 - (num_classes - 1) / num_classes * eps
    return targets


def xent_label_smooth(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy, mean over the batch."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing eps must be in [0, 1), got {eps}")
    labels = np.asarray(labels)
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"class label out of range [0, {num_classes})")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant; gradient-free
    z = logits - shift
    log_probs = z - T.log(T.reduce_sum(T.exp(z), axis=1, keepdims=True))
    targets = Tensor(smoothed_targets(labels, num_classes, eps))
    return T.reduce_mean(-T.reduce_sum(targets * log_probs, axis=1))


def bce_attributes(probs: Tensor, targets, stats: dict | None = None) -> Tensor:
    """Binary cross-entropy over attribute categories: summed per sample,
    averaged over the batch. Probabilities at exactly 0 or 1 are clamped to
    [1e-12, 1 - 1e-12] and counted."""
    y = np.asarray(targets, dtype=np.float64)
    if probs.shape != y.shape:
        raise ValueError(f"prediction shape {probs.shape} != target shape {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("attribute targets must be binary")
    clamped = int(((probs.data <= 0.0) | (probs.data >= 1.0)).sum())
    if stats is not None:
        stats["clamped"] = clamped
    p = T.clip(probs, 1e-12, 1.0 - 1e-12)
    y_t = Tensor(y)
    per_sample = -T.reduce_sum(y_t * T.log(p) + (1.0 - y_t) * T.log(1.0 - p), axis=1)
    return T.reduce_mean(per_sample)


def select_lambda_pmi(current_bce: float, weights: LossWeights) -> float:
    """Schedule: the PMI weight rises once the attribute BCE is small enough."""
    return weights.lambda_pmi_high if current_bce < weights.bce_threshold else weights.lambda_pmi_low


def total_loss(
    components: dict[str, Tensor],
    weights: LossWeights,
    current_bce: float | None = None,
    lambda_pmi: float | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the five objectives.

    ``lambda_pmi`` overrides the schedule (the training loop owns the one-way
    latch); otherwise it is chosen from ``current_bce``. Returns the scalar
    total and a report of the component values and weights used.
    """
    if lambda_pmi is None:
        if current_bce is None:
            raise ValueError("either current_bce or lambda_pmi must be given")
        lambda_pmi = select_lambda_pmi(current_bce, weights)
    total = (
        components["xent"]
        + components["wrt"]
        + weights.lambda_cent * components["cent"]
        + weights.lambda_bce * components["bce"]
        + lambda_pmi * components["pmi"]
    )
    report = {name: t.item() for name, t in components.items()}
    report["lambda_pmi"] = lambda_pmi
    report["total"] = total.item()
    return total, report

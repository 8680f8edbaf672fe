"""Training losses (BCE, Lovász hinge) and the competition IoU metric."""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError

THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _labels(targets):
    return targets.data if isinstance(targets, T.Tensor) else np.asarray(targets, dtype=np.float64)


def bce_with_logits(logits, targets):
    y = _labels(targets)
    if y.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    n = z.size
    value = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y)

    def bw(g):
        return (float(g) * (T._sigmoid(z) - y) / n,)

    return T.custom_op(np.array(value), (logits,), bw)


def lovasz_grad(gt_sorted):
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gt = np.asarray(gt_sorted, dtype=np.float64)
    if gt.size and not np.all((gt == 0) | (gt == 1)):
        raise ValueError("lovasz_grad expects a binary label vector")
    p = gt.sum()
    if p == 0:
        return np.zeros_like(gt)
    intersection = p - np.cumsum(gt)
    union = p + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _lovasz_hinge_flat(z, y):
    """Value and gradient of the Lovász hinge for flat arrays. The sort
    permutation and the Jaccard gradient are constants of the forward pass."""
    if y.size != z.size:
        raise DimensionError(f"logits has {z.size} elements, labels {y.size}")
    if z.size < 1:
        raise ValueError("lovasz_hinge needs at least one element")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("lovasz_hinge expects binary labels")
    signs = 2.0 * y - 1.0
    errors = 1.0 - z * signs
    order = np.argsort(-errors, kind="stable")
    grad_sorted = lovasz_grad(y[order])
    errs_sorted = errors[order]
    value = np.dot(np.maximum(errs_sorted, 0.0), grad_sorted)
    d = np.zeros_like(z)
    d[order] = np.where(errs_sorted > 0, grad_sorted, 0.0)
    return value, -signs * d


def lovasz_hinge(logits, labels):
    """Lovász hinge on a flat vector of logits."""
    value, grad = _lovasz_hinge_flat(logits.data.reshape(-1), _labels(labels).reshape(-1))
    shape = logits.shape
    return T.custom_op(np.array(value), (logits,), lambda g: (float(g) * grad.reshape(shape),))


def lovasz_hinge_per_image(logits, labels):
    """Mean of per-image Lovász hinge over the batch axis."""
    y = _labels(labels)
    n = logits.shape[0]
    if y.shape[0] != n:
        raise DimensionError(f"batch size {n} vs labels {y.shape[0]}")
    z = logits.data.reshape(n, -1)
    yflat = y.reshape(n, -1)
    values = np.empty(n)
    grads = np.empty_like(z)
    for i in range(n):
        values[i], grads[i] = _lovasz_hinge_flat(z[i], yflat[i])
    grads = grads.reshape(logits.shape) / n
    return T.custom_op(np.array(values.mean()), (logits,), lambda g: (float(g) * grads,))


def combined_loss(logits, targets, w_bce=0.1, w_lovasz=0.9):
    """w_bce * BCE + w_lovasz * Lovász hinge (per image for batched input)."""
    if w_bce < 0 or w_lovasz < 0:
        raise ValueError(f"loss weights must be non-negative, got ({w_bce}, {w_lovasz})")
    terms = []
    if w_bce > 0:
        terms.append(T.scale(bce_with_logits(logits, targets), w_bce))
    if w_lovasz > 0:
        lh = lovasz_hinge_per_image(logits, targets) if logits.ndim == 4 else lovasz_hinge(logits, targets)
        terms.append(T.scale(lh, w_lovasz))
    if not terms:
        return T.Tensor(np.array(0.0))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# -- metrics --------------------------------------------------------------------------

def iou(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _image_counts(pred, gt, t):
    """(TP, FP, FN) for one image treated as a single object."""
    has_p, has_g = pred.any(), gt.any()
    if not has_g:
        return (0, 1, 0) if has_p else (0, 0, 0)
    if not has_p:
        return 0, 0, 1
    return (1, 0, 0) if iou(pred, gt) > t else (0, 1, 1)


@dataclass
class MetricReport:
    ids: list
    hits: np.ndarray          # images × thresholds, per-threshold precision (0 or 1)
    counts: np.ndarray        # thresholds × (TP, FP, FN), summed over images
    scores: np.ndarray = field(init=False)
    mean: float = field(init=False)

    def __post_init__(self):
        self.scores = self.hits.mean(axis=1) if len(self.ids) else np.zeros(0)
        self.mean = float(self.scores.mean()) if len(self.ids) else 0.0

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["id"] + [f"t{t:.2f}" for t in THRESHOLDS] + ["score"])
            for sid, row, score in zip(self.ids, self.hits, self.scores):
                wr.writerow([sid] + [int(v) for v in row] + [repr(float(score))])
            wr.writerow(["M"] + [""] * len(THRESHOLDS) + [repr(self.mean)])


def competition_metric(preds, gts, ids=None):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    hits = np.zeros((len(preds), len(THRESHOLDS)))
    counts = np.zeros((len(THRESHOLDS), 3), dtype=np.int64)
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise DimensionError(f"image {ids[i]}: pred {p.shape} vs gt {g.shape}")
        for j, t in enumerate(THRESHOLDS):
            tp, fp, fn = _image_counts(p, g, t)
            counts[j] += (tp, fp, fn)
            denom = tp + fp + fn
            hits[i, j] = 1.0 if denom == 0 else tp / denom
    return MetricReport(ids, hits, counts)

"""Pairwise losses over masks, boxes, and class distributions.

Each loss has a differentiable tensor form (used by the training loss) and
a plain numpy form (used by the matching cost matrix, where gradients are
never needed). Probabilities are expected in [0, 1]; masks are binary.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

DICE_EPS = 1e-5
LOG_EPS = 1e-30
AREA_EPS = 1e-12


@dataclass
class LossWeights:
    cls: float = 1.0
    bce_aux: float = 5.0
    dice_aux: float = 5.0
    l1: float = 5.0
    giou: float = 2.0
    bce_final: float = 5.0
    dice_final: float = 5.0
    noobj: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


def _require_finite(*arrays):
    for arr in arrays:
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if not np.isfinite(data).all():
            raise ValueError("non-finite values in loss input")


# -- differentiable tensor forms -------------------------------------------

def dice_loss(pred_prob, gt_mask):
    """1 - (2*sum(p*m) + eps) / (sum(p) + sum(m) + eps)."""
    _require_finite(pred_prob, gt_mask)
    gt = as_tensor(np.asarray(gt_mask, dtype=np.float64))
    num = T.sum_(pred_prob * gt) * 2.0 + DICE_EPS
    den = T.sum_(pred_prob) + T.sum_(gt) + DICE_EPS
    return 1.0 - num / den


def bce_loss(pred_prob, gt_mask):
    """Mean binary cross-entropy over voxels."""
    _require_finite(pred_prob, gt_mask)
    gt = np.asarray(gt_mask, dtype=np.float64)
    p = T.minimum(T.maximum(pred_prob, LOG_EPS), 1.0 - 1e-12)
    terms = as_tensor(gt) * T.log(p) + as_tensor(1.0 - gt) * T.log(1.0 - p)
    return -T.mean(terms)


def l1_box(pred_box, gt_box):
    """Mean absolute difference over the four coordinates."""
    _require_finite(pred_box, gt_box)
    return T.mean(T.abs_(pred_box - as_tensor(np.asarray(gt_box, dtype=np.float64))))


def giou_loss(pred_box, gt_box):
    """1 - GIoU, where GIoU = IoU - |C \\ (A u B)| / |C| for the smallest
    enclosing box C. Ranges [0, 2]."""
    _require_finite(pred_box, gt_box)
    a = pred_box if isinstance(pred_box, Tensor) else Tensor(np.asarray(pred_box, float))
    b = as_tensor(np.asarray(gt_box, dtype=np.float64)) if not isinstance(gt_box, Tensor) else gt_box

    def area(box):
        return T.relu(box[2:3] - box[0:1]) * T.relu(box[3:4] - box[1:2])

    ix0 = T.maximum(a[0:1], b[0:1])
    iy0 = T.maximum(a[1:2], b[1:2])
    ix1 = T.minimum(a[2:3], b[2:3])
    iy1 = T.minimum(a[3:4], b[3:4])
    inter = T.relu(ix1 - ix0) * T.relu(iy1 - iy0)
    union = area(a) + area(b) - inter
    ex0 = T.minimum(a[0:1], b[0:1])
    ey0 = T.minimum(a[1:2], b[1:2])
    ex1 = T.maximum(a[2:3], b[2:3])
    ey1 = T.maximum(a[3:4], b[3:4])
    enclosing = (ex1 - ex0) * (ey1 - ey0)
    iou = inter / (union + AREA_EPS)
    giou = iou - (enclosing - union) / (enclosing + AREA_EPS)
    return T.reshape(1.0 - giou, ())


def ce_class(class_probs, class_index):
    """-log p(c) on an already-normalized (K+1)-way distribution."""
    _require_finite(class_probs)
    p = T.maximum(class_probs[class_index:class_index + 1], LOG_EPS)
    return T.reshape(-T.log(p), ())


def ce_class_from_logits(class_logits, class_index):
    """-log softmax(z)[c], numerically stable, differentiable."""
    _require_finite(class_logits)
    shift = float(np.max(class_logits.data))
    z = class_logits - shift
    lse = T.log(T.sum_(T.exp(z)))
    return T.reshape(lse - z[class_index:class_index + 1], ())


# -- numpy forms for the cost matrix ---------------------------------------

def dice_loss_np(pred_prob, gt_mask):
    num = 2.0 * float((pred_prob * gt_mask).sum()) + DICE_EPS
    den = float(pred_prob.sum()) + float(gt_mask.sum()) + DICE_EPS
    return 1.0 - num / den


def bce_loss_np(pred_prob, gt_mask):
    p = np.clip(pred_prob, LOG_EPS, 1.0 - 1e-12)
    return float(-(gt_mask * np.log(p) + (1.0 - gt_mask) * np.log(1.0 - p)).mean())


def l1_box_np(pred_box, gt_box):
    return float(np.abs(np.asarray(pred_box) - np.asarray(gt_box)).mean())


def giou_np(box_a, box_b):
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    enclosing = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    iou = inter / (union + AREA_EPS)
    return iou - (enclosing - union) / (enclosing + AREA_EPS)


def giou_loss_np(box_a, box_b):
    return 1.0 - giou_np(box_a, box_b)

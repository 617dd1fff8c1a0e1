"""Dice score evaluation between predicted and ground-truth label volumes."""

import numpy as np

from .volume import Volume


class EvalError(ValueError):
    pass


def dice_score(pred_labels, gt_labels, num_classes):
    """Per-class and mean DSC.

    A class absent from both volumes is excluded from the mean; a class
    present in exactly one scores 0.
    """
    pred = pred_labels.data if isinstance(pred_labels, Volume) else np.asarray(pred_labels)
    gt = gt_labels.data if isinstance(gt_labels, Volume) else np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise EvalError(f"extent mismatch: prediction {pred.shape} vs labels {gt.shape}")
    per_class = {}
    included = []
    for c in range(1, num_classes + 1):
        p = pred == c
        g = gt == c
        np_, ng = int(p.sum()), int(g.sum())
        if np_ == 0 and ng == 0:
            per_class[c] = None
            continue
        score = 2.0 * float((p & g).sum()) / (np_ + ng)
        per_class[c] = score
        included.append(score)
    mean = float(np.mean(included)) if included else float("nan")
    return per_class, mean

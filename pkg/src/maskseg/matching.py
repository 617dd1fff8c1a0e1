"""Bipartite matching between ground-truth segments and prediction slots,
and the composite training loss assembled from the matched pairs.

The assignment minimizes the combined class/mask/box cost; ties are broken
deterministically by the lexicographically smallest assignment vector.
Unmatched slots are supervised toward the "no object" class (index 0 of the
K+1-way head), down-weighted by `noobj`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax as np_softmax

from . import tensor as T
from .losses import (LossWeights, bce_loss, bce_loss_np, ce_class_from_logits,
                     dice_loss, dice_loss_np, giou_loss, giou_loss_np,
                     l1_box, l1_box_np)
from .tensor import Tensor

NO_OBJECT = 0  # class index reserved for "no object" / background


class MatchingError(ValueError):
    pass


@dataclass
class MatchingResult:
    sigma: list       # sigma[j] = slot index assigned to ground-truth j
    total_cost: float

    def matched_slots(self):
        return set(self.sigma)


def _solve_assignment(cost):
    """Minimum-cost injective row->column assignment (shortest augmenting
    paths with potentials). Rows must not outnumber columns."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    assigned = np.zeros(m + 1, dtype=np.int64)   # column -> row (1-based, 0 free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        assigned[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[assigned[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned[j0] = assigned[j1]
            j0 = j1
    sigma = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if assigned[j]:
            sigma[assigned[j] - 1] = j - 1
    total = float(sum(cost[r, sigma[r]] for r in range(n)))
    return sigma, total


def hungarian(cost):
    """MatchingResult for an N_gt x N cost matrix (N_gt <= N).

    Among all minimum-cost assignments, returns the lexicographically
    smallest sigma (row 0's column first, then row 1's, ...).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise MatchingError(f"more ground-truth segments ({n}) than slots ({m})")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix contains non-finite entries")
    if n == 0:
        return MatchingResult([], 0.0)
    _, best = _solve_assignment(cost)
    tol = 1e-9 * max(1.0, abs(best))
    # fix rows in order to the smallest column that still allows an optimal
    # completion; subproblems are tiny at this scale
    chosen = []
    used = np.zeros(m, dtype=bool)
    fixed = 0.0
    for j in range(n):
        free = np.where(~used)[0]
        for col in free:
            rest = 0.0
            if j + 1 < n:
                sub_cols = free[free != col]
                sub = cost[np.ix_(np.arange(j + 1, n), sub_cols)]
                _, rest = _solve_assignment(sub)
            if fixed + cost[j, col] + rest <= best + tol:
                chosen.append(int(col))
                used[col] = True
                fixed += cost[j, col]
                break
        else:
            raise MatchingError("no optimal completion found (numerical drift)")
    total = float(sum(cost[j, chosen[j]] for j in range(n)))
    return MatchingResult(chosen, total)


def _subsample_mask(mask, factor=4):
    """Strided subsampling per spatial axis, capped by the axis extent.
    Cost-only approximation; the loss always sees full resolution."""
    steps = tuple(min(factor, max(1, s)) for s in mask.shape)
    return mask[::steps[0], ::steps[1], ::steps[2]]


def match_cost(gt, pred, aux_mask_logits, box_prompts, weights):
    """N_gt x N cost matrix from detached predictions.

    The class term uses -p (bounded), not -log p; mask terms are computed
    on subsampled masks. `aux_mask_logits` may be None (box-only variant).
    """
    n_gt = len(gt.segments)
    class_probs = np_softmax(_data(pred.class_logits), axis=-1)
    n = class_probs.shape[0]
    if n_gt > n:
        raise MatchingError(f"{n_gt} ground-truth segments exceed {n} slots")
    final_probs = expit(_data(pred.final_mask_logits))
    aux_probs = expit(_data(aux_mask_logits)) if aux_mask_logits is not None else None
    boxes = _data(box_prompts)
    w = weights
    cost = np.zeros((n_gt, n))
    for j, seg in enumerate(gt.segments):
        gt_small = _subsample_mask(seg.mask.astype(np.float64))
        for i in range(n):
            c = w.cls * (-class_probs[i, seg.class_id])
            if aux_probs is not None:
                c += w.bce_aux * bce_loss_np(_subsample_mask(aux_probs[i]), gt_small)
                c += w.dice_aux * dice_loss_np(_subsample_mask(aux_probs[i]), gt_small)
            c += w.l1 * l1_box_np(boxes[i], seg.box)
            c += w.giou * giou_loss_np(boxes[i], seg.box)
            c += w.bce_final * bce_loss_np(_subsample_mask(final_probs[i]), gt_small)
            c += w.dice_final * dice_loss_np(_subsample_mask(final_probs[i]), gt_small)
            cost[j, i] = c
    return cost


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def total_loss(gt, pred, aux_mask_logits, box_prompts, sigma, weights):
    """Differentiable composite loss for a fixed matching sigma.

    Every slot contributes a class term (-log p of its target class, with
    unmatched slots supervised toward "no object" at weight `noobj`);
    matched slots add the auxiliary mask, box, and final mask terms.
    """
    w = weights
    n = pred.class_logits.shape[0]
    slot_class = {}
    for j, seg in enumerate(gt.segments):
        slot_class[sigma[j]] = (j, seg)
    terms = []
    for i in range(n):
        logits_i = T.reshape(pred.class_logits[i, :], (pred.class_logits.shape[1],))
        if i in slot_class:
            _, seg = slot_class[i]
            terms.append(ce_class_from_logits(logits_i, seg.class_id) * w.cls)
        else:
            terms.append(ce_class_from_logits(logits_i, NO_OBJECT) * (w.cls * w.noobj))
    for j, seg in enumerate(gt.segments):
        i = sigma[j]
        gt_mask = seg.mask.astype(np.float64)
        if aux_mask_logits is not None:
            aux_prob = T.sigmoid(T.reshape(aux_mask_logits[i], gt_mask.shape))
            terms.append(bce_loss(aux_prob, gt_mask) * w.bce_aux)
            terms.append(dice_loss(aux_prob, gt_mask) * w.dice_aux)
        box_i = T.reshape(box_prompts[i, :], (4,))
        terms.append(l1_box(box_i, seg.box) * w.l1)
        terms.append(giou_loss(box_i, seg.box) * w.giou)
        final_prob = T.sigmoid(T.reshape(pred.final_mask_logits[i], gt_mask.shape))
        terms.append(bce_loss(final_prob, gt_mask) * w.bce_final)
        terms.append(dice_loss(final_prob, gt_mask) * w.dice_final)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.reshape(total, ())


def match_and_loss(gt, model_output, weights):
    """Convenience wrapper: cost matrix -> hungarian -> total_loss."""
    bundle = model_output.bundle
    resolved = model_output.resolved
    pred = model_output.decoder_output
    cost = match_cost(gt, pred, bundle.aux_mask_logits, resolved.box_prompts, weights)
    result = hungarian(cost)
    loss = total_loss(gt, pred, bundle.aux_mask_logits, resolved.box_prompts,
                      result.sigma, weights)
    return loss, result

"""Half-overlap sliding-window inference with 8-orientation flip ensembling
and mask-classification semantic assembly.

`sliding_window_infer` takes any patch-level predictor (a callable mapping a
(C, d, h, w) array to (K+1, d, h, w) class probabilities), which keeps the
tiling/ensembling machinery independently testable with synthetic models.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit, softmax

from .tensor import Tensor, no_grad
from .volume import Volume

FLIP_AXIS_INDEX = {"depth": 1, "height": 2, "width": 3}


@dataclass
class InferConfig:
    patch_extents: tuple = (8, 16, 16)
    overlap: float = 0.5                      # fixed by contract
    flip_axes: tuple = ("depth", "height", "width")
    threshold: float = 0.5
    assembly: str = "prob"                    # or "threshold"
    gaussian_sigma_fraction: float = 0.125    # sigma = extent / 8

    def __post_init__(self):
        if self.overlap != 0.5:
            raise ValueError("overlap fraction is fixed at 0.5")
        if self.assembly not in ("prob", "threshold"):
            raise ValueError(f"unknown assembly mode {self.assembly!r}")
        for a in self.flip_axes:
            if a not in FLIP_AXIS_INDEX:
                raise ValueError(f"unknown flip axis {a!r}")


def semantic_assembly(class_logits, mask_logits, mode="prob", threshold=0.5):
    """Fuse N slot predictions into per-class probabilities (K+1, D, H, W).

    prob mode: score_c(v) = sum_i p_i(c) * sigmoid(m_i(v)); the background
    channel is max(0, 1 - sum_c score_c); channels then normalize per voxel.
    threshold mode: only the top-scoring slot per class contributes, with a
    binarized mask.
    """
    probs = softmax(np.asarray(class_logits, dtype=np.float64), axis=-1)
    masks = expit(np.asarray(mask_logits, dtype=np.float64))
    k_plus_1 = probs.shape[1]
    d, h, w = masks.shape[1:]
    scores = np.zeros((k_plus_1, d, h, w))
    for c in range(1, k_plus_1):
        if mode == "prob":
            scores[c] = np.tensordot(probs[:, c], masks, axes=(0, 0))
        else:
            i = int(np.argmax(probs[:, c]))
            scores[c] = probs[i, c] * (masks[i] > threshold)
    scores[0] = np.maximum(0.0, 1.0 - scores[1:].sum(axis=0))
    total = scores.sum(axis=0)
    return scores / np.maximum(total, 1e-12)


def gaussian_weight_map(extents, sigma_fraction=0.125):
    """Separable centre-weighted importance map, strictly positive."""
    weight = np.ones(extents)
    for axis, ext in enumerate(extents):
        sigma = max(ext * sigma_fraction, 1e-8)
        coords = np.arange(ext) - (ext - 1) / 2.0
        prof = np.exp(-0.5 * (coords / sigma) ** 2)
        shape = [1, 1, 1]
        shape[axis] = ext
        weight = weight * prof.reshape(shape)
    return np.maximum(weight, np.finfo(np.float64).tiny)


def tile_origins(extent, patch):
    """Half-overlap tiling; the final tile is clamped to the border."""
    if extent <= patch:
        return [0]
    stride = max(1, patch // 2)
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


def _flip_subsets(axes):
    out = [()]
    for r in range(1, len(axes) + 1):
        out.extend(combinations(axes, r))
    return out


def flip_ensemble(predict_fn, patch, flip_axes):
    """Average predictions over all flip combinations of the listed axes."""
    subsets = _flip_subsets(flip_axes)
    acc = None
    for subset in subsets:
        idx = tuple(FLIP_AXIS_INDEX[a] for a in subset)
        flipped = np.flip(patch, idx) if idx else patch
        pred = predict_fn(np.ascontiguousarray(flipped))
        pred = np.flip(pred, idx) if idx else pred
        acc = pred.copy() if acc is None else acc + pred
    return acc / len(subsets)


def _worker_count():
    value = os.environ.get("MASKSEG_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def sliding_window_infer(predict_fn, image, cfg, num_channels):
    """Tile, flip-ensemble, and weight-average a whole volume.

    Returns a (num_channels, D, H, W) probability Volume. Images smaller
    than the patch are symmetrically zero-padded and cropped on output.
    """
    data = image.data if isinstance(image, Volume) else np.asarray(image)
    orig_extents = data.shape[1:]
    pd = [max(0, p - e) for p, e in zip(cfg.patch_extents, orig_extents)]
    if any(pd):
        pad = [(0, 0)] + [(q // 2, q - q // 2) for q in pd]
        data = np.pad(data, pad)
    extents = data.shape[1:]
    weight = gaussian_weight_map(cfg.patch_extents, cfg.gaussian_sigma_fraction)
    acc = np.zeros((num_channels,) + extents)
    wsum = np.zeros(extents)
    tiles = [
        (od, oh, ow)
        for od in tile_origins(extents[0], cfg.patch_extents[0])
        for oh in tile_origins(extents[1], cfg.patch_extents[1])
        for ow in tile_origins(extents[2], cfg.patch_extents[2])
    ]

    def run_tile(origin):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch_extents))
        patch = data[(slice(None),) + sl]
        return sl, flip_ensemble(predict_fn, patch, cfg.flip_axes)

    workers = _worker_count()
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]
    for sl, pred in results:
        acc[(slice(None),) + sl] += pred * weight
        wsum[sl] += weight
    out = acc / wsum
    if any(pd):
        crop = tuple(slice(q // 2, q // 2 + e) for q, e in zip(pd, orig_extents))
        out = out[(slice(None),) + crop]
    return Volume(out)


def model_patch_predictor(model, assembly="prob", threshold=0.5):
    """Wrap a SegModel into a patch predictor emitting class probabilities."""

    def predict(patch):
        with no_grad():
            out = model(Tensor(patch))
        return semantic_assembly(out.decoder_output.class_logits.data,
                                 out.decoder_output.final_mask_logits.data,
                                 mode=assembly, threshold=threshold)

    return predict


def infer_labels(model, image, cfg, num_classes):
    """Full-volume label prediction (uint8 Volume)."""
    predict = model_patch_predictor(model, cfg.assembly, cfg.threshold)
    probs = sliding_window_infer(predict, image, cfg, num_classes + 1)
    labels = np.argmax(probs.data, axis=0).astype(np.uint8)
    return Volume(labels[None], kind="labels"), probs

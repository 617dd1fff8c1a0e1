"""Prompt generator: fuses encoder taps into auxiliary masks, boxes, and
per-slot classifier tokens.

Fusion walks the taps deepest-first: convolve, upsample, concatenate the
next-shallower tap, repeat; a final 1x1 convolution emits N mask-logit
channels at full patch resolution. Box queries pool each fusion level to
(1, 2, 2) and classifier-token queries to (1, 1, 1); each pooled stack
feeds a small MLP head.

Variants (config key `prompt_variant`):

* ``mask``         -- learnable masks only; boxes derived from the masks.
* ``box``          -- learnable boxes only; no mask prompts.
* ``mask_box``     -- learnable masks and learnable boxes.
* ``mask_avg_box`` -- learnable masks; box prompts are the mean of the
                      mask-derived and learned boxes.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .data import EmptyMaskError, box_from_mask
from .nn import Conv3d, Mlp, Module, ModuleList
from .tensor import Tensor

VARIANTS = ("mask", "box", "mask_box", "mask_avg_box")

FULL_IMAGE_BOX = (0.0, 0.0, 1.0, 1.0)


def variant_has_masks(variant):
    return variant in ("mask", "mask_box", "mask_avg_box")


def variant_has_learned_boxes(variant):
    return variant in ("box", "mask_box", "mask_avg_box")


@dataclass
class PromptBundle:
    aux_mask_logits: object   # (N, D, H, W) tensor, or None for box-only
    learned_boxes: object     # (N, 4) tensor in [0,1], or None for mask-only
    aux_cls_tokens: object    # (N, C) tensor
    variant: str


@dataclass
class ResolvedPrompts:
    mask_prompts: object      # (N, D, H, W) logits tensor, or None
    box_prompts: object       # (N, 4) tensor, canonical, in [0,1]
    empty_mask_slots: list    # slot flags where the full-image box was substituted


@dataclass
class PromptGeneratorConfig:
    embed_dim: int
    num_taps: int
    token_grid: tuple         # (D, H', W')
    target_extents: tuple     # (D, H, W)
    num_prompts: int
    variant: str = "mask_avg_box"
    head_hidden: int = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown prompt variant {self.variant!r}")
        if self.num_prompts < 1:
            raise ValueError("prompt count must be >= 1")
        if self.head_hidden is None:
            self.head_hidden = 2 * self.embed_dim


class PromptGenerator(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        fuse = [Conv3d(rng, c, c, (1, 3, 3), padding=(0, 1, 1))]
        for _ in range(cfg.num_taps - 1):
            fuse.append(Conv3d(rng, 2 * c, c, (1, 3, 3), padding=(0, 1, 1)))
        self.fuse = ModuleList(fuse)
        if variant_has_masks(cfg.variant):
            self.mask_head = Conv3d(rng, c, cfg.num_prompts, (1, 1, 1))
        else:
            self.mask_head = None
        if variant_has_learned_boxes(cfg.variant):
            self.box_head = Mlp(rng, cfg.num_taps * 4 * c, cfg.head_hidden,
                                cfg.num_prompts * 4)
        else:
            self.box_head = None
        self.cls_head = Mlp(rng, cfg.num_taps * c, cfg.head_hidden,
                            cfg.num_prompts * c)

    def _level_sizes(self):
        d, hp, wp = self.cfg.token_grid
        _, h, w = self.cfg.target_extents
        sizes = []
        for lvl in range(self.cfg.num_taps):
            sizes.append((d, min(hp * 2 ** lvl, h), min(wp * 2 ** lvl, w)))
        return sizes

    def __call__(self, encoder_output):
        """EncoderOutput -> PromptBundle."""
        cfg = self.cfg
        taps = encoder_output.taps
        if len(taps) != cfg.num_taps:
            raise ValueError(f"expected {cfg.num_taps} taps, got {len(taps)}")
        n, c = cfg.num_prompts, cfg.embed_dim
        sizes = self._level_sizes()
        box_queries = []
        cls_queries = []
        g = None
        for lvl, conv in enumerate(self.fuse):
            tap = taps[len(taps) - 1 - lvl]          # deepest first
            tap = T.upsample_trilinear3d(tap, sizes[lvl])
            if g is None:
                g = T.gelu(conv(tap))
            else:
                g = T.upsample_trilinear3d(g, sizes[lvl])
                g = T.gelu(conv(T.concat([g, tap], axis=0)))
            box_queries.append(T.reshape(T.adaptive_avg_pool(g, (1, 2, 2)), (4 * c,)))
            cls_queries.append(T.reshape(T.adaptive_avg_pool(g, (1, 1, 1)), (c,)))
        mask_logits = None
        if self.mask_head is not None:
            full = T.upsample_trilinear3d(g, cfg.target_extents)
            mask_logits = self.mask_head(full)
        learned_boxes = None
        if self.box_head is not None:
            raw = T.sigmoid(self.box_head(T.concat(box_queries, axis=0)))
            learned_boxes = _canonicalize_boxes(T.reshape(raw, (n, 4)))
        cls_tokens = T.reshape(self.cls_head(T.concat(cls_queries, axis=0)), (n, c))
        return PromptBundle(mask_logits, learned_boxes, cls_tokens, cfg.variant)


def _canonicalize_boxes(boxes):
    """Reorder each corner pair so min <= max per axis (differentiable)."""
    x0, y0 = boxes[:, 0:1], boxes[:, 1:2]
    x1, y1 = boxes[:, 2:3], boxes[:, 3:4]
    return T.concat([T.minimum(x0, x1), T.minimum(y0, y1),
                     T.maximum(x0, x1), T.maximum(y0, y1)], axis=1)


def boxes_from_mask_logits(mask_logits, threshold=0.5):
    """Hard-thresholded per-slot boxes; non-differentiable by design.

    Returns (boxes (N, 4) ndarray, empty_slot_flags). Empty thresholded
    masks get the full-image box.
    """
    logits = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
    boxes = np.zeros((logits.shape[0], 4))
    empty = []
    for i in range(logits.shape[0]):
        binary = (expit(logits[i]) > threshold).astype(np.uint8)
        try:
            boxes[i] = box_from_mask(binary)
        except EmptyMaskError:
            boxes[i] = FULL_IMAGE_BOX
            empty.append(i)
    return boxes, empty


def resolve_prompts(bundle, threshold=0.5):
    """Turn a PromptBundle into the (mask, box) prompts the decoder consumes."""
    variant = bundle.variant
    empty = []
    if variant == "mask":
        mask_boxes, empty = boxes_from_mask_logits(bundle.aux_mask_logits, threshold)
        return ResolvedPrompts(bundle.aux_mask_logits, Tensor(mask_boxes), empty)
    if variant == "box":
        return ResolvedPrompts(None, bundle.learned_boxes, [])
    if variant == "mask_box":
        return ResolvedPrompts(bundle.aux_mask_logits, bundle.learned_boxes, [])
    # mask_avg_box: mean of the (constant) mask-derived and learned boxes
    mask_boxes, empty = boxes_from_mask_logits(bundle.aux_mask_logits, threshold)
    averaged = (Tensor(mask_boxes) + bundle.learned_boxes) * 0.5
    return ResolvedPrompts(bundle.aux_mask_logits, averaged, empty)

"""Dataset mapping, box extraction, mirroring, and synthetic volume generation.

A multi-class label volume maps to a set of per-class binary segments
(one segment per class present in the patch); background stays out of the
set and is handled by the "no object" class during matching.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, read_rvf, write_rvf

AXIS_NAMES = {"depth": 1, "height": 2, "width": 3}


class DataError(ValueError):
    pass


class EmptyMaskError(DataError):
    """Raised for box extraction on an all-background mask."""


@dataclass
class GroundTruthSegment:
    class_id: int
    mask: np.ndarray  # (D, H, W) in {0, 1}
    box: tuple       # (x_min, y_min, x_max, y_max) normalized to [0, 1]


@dataclass
class SegmentSet:
    segments: list
    extents: tuple  # source (D, H, W)

    def __len__(self):
        return len(self.segments)

    def class_ids(self):
        return [s.class_id for s in self.segments]


def box_from_mask(mask):
    """Tight normalized (x_min, y_min, x_max, y_max) of the foreground,
    computed on the max-projection over depth.

    The upper edges are half-open ((c_max + 1) / W), so a single voxel
    still has positive area.
    """
    mask = np.asarray(mask)
    if mask.ndim == 4:
        mask = mask[0]
    if mask.ndim != 3:
        raise DataError(f"mask must be (D,H,W), got {mask.shape}")
    plane = mask.max(axis=0) > 0
    if not plane.any():
        raise EmptyMaskError("mask has no foreground voxels")
    rows = np.where(plane.any(axis=1))[0]
    cols = np.where(plane.any(axis=0))[0]
    h, w = plane.shape
    return (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def dataset_map(labels, num_classes):
    """Convert a multi-class label volume into per-class binary segments."""
    if labels.kind != "labels":
        raise DataError("dataset_map expects a label volume")
    lab = labels.data[0]
    top = int(lab.max()) if lab.size else 0
    if top > num_classes:
        raise DataError(f"label value {top} exceeds class count {num_classes}")
    segments = []
    for c in range(1, num_classes + 1):
        mask = (lab == c).astype(np.uint8)
        if not mask.any():
            continue
        segments.append(GroundTruthSegment(c, mask, box_from_mask(mask)))
    return SegmentSet(segments, lab.shape)


def assemble_from_segments(segset):
    """Paint class ids back into a label volume (inverse of dataset_map)."""
    lab = np.zeros(segset.extents, dtype=np.uint8)
    for seg in segset.segments:
        lab[seg.mask > 0] = seg.class_id
    return Volume(lab[None], kind="labels")


def flip_volume(volume, axes):
    """Deterministically reverse the named spatial axes."""
    idx = tuple(AXIS_NAMES[a] for a in axes)
    if not idx:
        return volume
    return Volume(np.flip(volume.data, axis=idx).copy(), kind=volume.kind)


def mirror_augment(image, labels, axes, rng):
    """Flip each listed axis with probability 0.5, identically on both volumes."""
    if image.extents != labels.extents:
        raise DataError(f"image {image.extents} and labels {labels.extents} disagree")
    chosen = [a for a in axes if rng.random() < 0.5]
    return flip_volume(image, chosen), flip_volume(labels, chosen)


@dataclass
class SynthSpec:
    """Generator config for the synthetic ellipsoid/box dataset."""

    volumes: int = 8
    extents: tuple = (8, 32, 32)  # (D, H, W)
    num_classes: int = 3
    objects: tuple = (1, 3)       # inclusive range of objects per volume
    seed: int = 0
    modalities: int = 1
    noise: float = 0.02
    max_tries: int = 200


def _place_object(occupied, extents, rng):
    """Pick a non-overlapping axis-aligned region; returns (mask, tries_left_ok)."""
    d, h, w = extents
    for _ in range(40):
        rd = rng.integers(max(1, d // 4), max(2, d // 2) + 1)
        rh = rng.integers(max(2, h // 8), max(3, h // 3) + 1)
        rw = rng.integers(max(2, w // 8), max(3, w // 3) + 1)
        cd = rng.integers(rd, d - rd + 1) if d > 2 * rd else d // 2
        ch = rng.integers(rh, h - rh + 1) if h > 2 * rh else h // 2
        cw = rng.integers(rw, w - rw + 1) if w > 2 * rw else w // 2
        mask = np.zeros(extents, dtype=bool)
        if rng.random() < 0.5:
            zz, yy, xx = np.ogrid[:d, :h, :w]
            mask = (((zz - cd) / rd) ** 2 + ((yy - ch) / rh) ** 2
                    + ((xx - cw) / rw) ** 2) <= 1.0
        else:
            mask[max(0, cd - rd):cd + rd, max(0, ch - rh):ch + rh,
                 max(0, cw - rw):cw + rw] = True
        if mask.any() and not (mask & occupied).any():
            return mask
    return None


def synth_dataset(spec, rng=None):
    """Deterministic synthetic dataset of labelled ellipsoids and boxes.

    Every class in {1..K} appears in at least one volume; per-class
    intensity means separate the classes for the image channel.
    """
    if spec.num_classes < 1:
        raise DataError("num_classes must be >= 1")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    k = spec.num_classes
    lo, hi = spec.objects
    lo = max(1, min(lo, k))
    hi = max(lo, min(hi, k))
    pairs = []
    pending = set(range(1, k + 1))  # classes still owed an appearance
    for v in range(spec.volumes):
        for attempt in range(spec.max_tries):
            n_obj = int(rng.integers(lo, hi + 1))
            # round-robin anchor class guarantees coverage once volumes >= K
            anchor = (v % k) + 1
            others = [c for c in range(1, k + 1) if c != anchor]
            extra = list(rng.choice(others, size=n_obj - 1, replace=False)) if n_obj > 1 else []
            classes = [anchor] + [int(c) for c in extra]
            occupied = np.zeros(spec.extents, dtype=bool)
            lab = np.zeros(spec.extents, dtype=np.uint8)
            ok = True
            for c in classes:
                mask = _place_object(occupied, spec.extents, rng)
                if mask is None:
                    ok = False
                    break
                occupied |= mask
                lab[mask] = c
            if ok:
                break
        else:
            raise DataError(f"could not pack volume {v} after {spec.max_tries} tries")
        pending -= set(classes)
        img = np.full((spec.modalities,) + spec.extents, 0.1)
        for c in classes:
            img[:, lab == c] = 0.3 + 0.6 * c / k
        img += rng.normal(0.0, spec.noise, size=img.shape)
        pairs.append((Volume(img.astype(np.float64)), Volume(lab[None], kind="labels")))
    if pending:
        raise DataError(f"classes {sorted(pending)} never appeared; use >= {k} volumes")
    return pairs


# -- dataset directory layout ----------------------------------------------

META_NAME = "meta.txt"


@dataclass
class DatasetDir:
    root: str
    num_classes: int
    ids: list
    split: dict = field(default_factory=dict)

    def image_path(self, vid):
        return os.path.join(self.root, "images", f"{vid}.rvf")

    def label_path(self, vid):
        return os.path.join(self.root, "labels", f"{vid}.rvf")

    def load(self, vid):
        return read_rvf(self.image_path(vid)), read_rvf(self.label_path(vid))

    def ids_for(self, split_name):
        return [i for i in self.ids if self.split.get(i, "train") == split_name]


def write_dataset(root, pairs, num_classes, split=None):
    """Write images/NNN.rvf, labels/NNN.rvf and the key:value meta sidecar."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    ids = []
    max_segments = 0
    for i, (img, lab) in enumerate(pairs):
        vid = f"{i:03d}"
        ids.append(vid)
        write_rvf(os.path.join(root, "images", f"{vid}.rvf"), img)
        write_rvf(os.path.join(root, "labels", f"{vid}.rvf"), lab)
        max_segments = max(max_segments, len(dataset_map(lab, num_classes)))
    split = split or {}
    with open(os.path.join(root, META_NAME), "w") as fh:
        fh.write(f"classes: {num_classes}\n")
        fh.write(f"volumes: {len(ids)}\n")
        fh.write(f"max_segments: {max_segments}\n")
        for vid in ids:
            fh.write(f"split.{vid}: {split.get(vid, 'train')}\n")
    return DatasetDir(root, num_classes, ids, {v: split.get(v, "train") for v in ids})


def load_dataset(root):
    meta_path = os.path.join(root, META_NAME)
    if not os.path.exists(meta_path):
        raise DataError(f"missing {meta_path}")
    keys = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, value = line.split(":", 1)
            keys[key.strip()] = value.strip()
    try:
        num_classes = int(keys["classes"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{meta_path}: missing or bad 'classes' entry") from exc
    split = {}
    ids = []
    for key, value in keys.items():
        if key.startswith("split."):
            vid = key[len("split."):]
            ids.append(vid)
            split[vid] = value
    ids.sort()
    if not ids:
        raise DataError(f"{meta_path}: no volumes listed")
    ds = DatasetDir(root, num_classes, ids, split)
    for vid in ids:
        for path in (ds.image_path(vid), ds.label_path(vid)):
            if not os.path.exists(path):
                raise DataError(f"missing volume file {path}")
    return ds


def max_segments(dataset):
    """Largest ground-truth segment count over the whole dataset."""
    best = 0
    for vid in dataset.ids:
        _, lab = dataset.load(vid)
        best = max(best, len(dataset_map(lab, dataset.num_classes)))
    return best

"""SGD training with poly learning-rate decay and Hungarian-matched losses.

The metric log is append-only plain text, one line per epoch:
``epoch <e> lr <v> loss <v> dice <v>``.
"""

import fnmatch
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import DataError, dataset_map, mirror_augment
from .losses import LossWeights
from .matching import match_and_loss
from .tensor import Tensor, backward
from .volume import Volume


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    init_lr: float = 0.01
    max_epoch: int = 20
    iterations: int = 50          # per epoch; paper-scale value is 250
    momentum: float = 0.99
    weight_decay: float = 3e-5
    batch_size: int = 2
    patch_extents: tuple = (8, 16, 16)
    seed: int = 0
    freeze: tuple = ()            # fnmatch patterns over parameter names
    mirror_axes: tuple = ("depth", "height", "width")

    def __post_init__(self):
        if self.init_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum, and weight decay must be nonnegative")
        if self.max_epoch <= 0 or self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, iterations, and batch size must be positive")
        if any(e < 1 for e in self.patch_extents):
            raise ValueError("patch extents must be >= 1")


def poly_lr(epoch, cfg):
    """init_lr * (1 - e/MAX_EPOCH)^0.9."""
    if epoch < 0 or epoch > cfg.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    return cfg.init_lr * (1.0 - epoch / cfg.max_epoch) ** 0.9


class SGD:
    """SGD with momentum and decoupled-from-nothing weight decay:
    v <- momentum*v + (g + wd*p); p <- p - lr*v. Frozen params untouched."""

    def __init__(self, named_params):
        self.named_params = list(named_params)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.skipped_steps = 0

    def step(self, lr, momentum, weight_decay, log=None):
        updates = []
        for name, p in self.named_params:
            if not p.trainable:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                self.skipped_steps += 1
                if log is not None:
                    log(f"non-finite gradient in {name}; step skipped")
                return False
            updates.append((name, p, g))
        for name, p, g in updates:
            v = self.velocity[name]
            v *= momentum
            v += g + weight_decay * p.data
            p.data = p.data - lr * v
        return True


def apply_freeze(model, patterns):
    """Mark parameters matching any fnmatch pattern as frozen."""
    frozen = []
    for name, p in model.named_parameters():
        if any(fnmatch.fnmatch(name, pat) for pat in patterns):
            p.trainable = False
            frozen.append(name)
        else:
            p.trainable = True
    return frozen


def _sample_patch(image, labels, patch, rng):
    d, h, w = patch
    data_img, data_lab = image.data, labels.data
    pd = [max(0, p - e) for p, e in zip(patch, image.extents)]
    if any(pd):
        pad = [(0, 0)] + [(q // 2, q - q // 2) for q in pd]
        data_img = np.pad(data_img, pad)
        data_lab = np.pad(data_lab, pad)
    ext = data_img.shape[1:]
    origin = [int(rng.integers(0, e - s + 1)) for e, s in zip(ext, (d, h, w))]
    sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(origin, (d, h, w)))
    return Volume(data_img[sl].copy()), Volume(data_lab[sl].copy(), kind="labels")


def matched_dice(gt, decoder_output, sigma, threshold=0.5):
    """Mean binary dice of matched slots at the given threshold."""
    if not gt.segments:
        return None
    probs = expit(decoder_output.final_mask_logits.data)
    scores = []
    for j, seg in enumerate(gt.segments):
        pred = (probs[sigma[j]] > threshold).astype(np.float64)
        inter = float((pred * seg.mask).sum())
        denom = float(pred.sum() + seg.mask.sum())
        scores.append(2.0 * inter / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    dice: float

    def line(self):
        return f"epoch {self.epoch} lr {self.lr:.6g} loss {self.loss:.6g} dice {self.dice:.6g}"


def train(model, dataset, cfg, weights=None, log_path=None, progress=None):
    """Run the full training loop; returns per-epoch stats.

    `dataset` is a DatasetDir; all volumes are preloaded. Deterministic for
    a fixed seed. Aborts if the loss is non-finite for 10 consecutive
    iterations.
    """
    weights = weights or LossWeights()
    rng = np.random.default_rng(cfg.seed)
    ids = dataset.ids_for("train") or dataset.ids
    volumes = [dataset.load(vid) for vid in ids]
    needed = 0
    for _, lab in volumes:
        needed = max(needed, len(dataset_map(lab, dataset.num_classes)))
    if model.cfg.num_prompts < needed:
        raise DataError(
            f"model has {model.cfg.num_prompts} prompt slots but the dataset "
            f"needs {needed}; raise model.prompts to at least {needed}")
    optimizer = SGD(model.named_parameters())
    log_fh = open(log_path, "a") if log_path else None
    incidents = []
    stats = []
    nonfinite_streak = 0
    try:
        for epoch in range(cfg.max_epoch):
            lr = poly_lr(epoch, cfg)
            losses = []
            dices = []
            for _ in range(cfg.iterations):
                model.zero_grad()
                batch_loss = 0.0
                batch_ok = True
                for _ in range(cfg.batch_size):
                    img, lab = volumes[int(rng.integers(0, len(volumes)))]
                    img, lab = _sample_patch(img, lab, cfg.patch_extents, rng)
                    img, lab = mirror_augment(img, lab, cfg.mirror_axes, rng)
                    gt = dataset_map(lab, dataset.num_classes)
                    out = model(Tensor(img.data))
                    loss, result = match_and_loss(gt, out, weights)
                    loss = loss * (1.0 / cfg.batch_size)
                    value = loss.item()
                    if not np.isfinite(value):
                        batch_ok = False
                        break
                    backward(loss)
                    batch_loss += value
                    d = matched_dice(gt, out.decoder_output, result.sigma)
                    if d is not None:
                        dices.append(d)
                if not batch_ok or not np.isfinite(batch_loss):
                    nonfinite_streak += 1
                    incidents.append(f"epoch {epoch}: non-finite loss")
                    if nonfinite_streak >= 10:
                        raise TrainError(
                            "loss non-finite for 10 consecutive iterations; "
                            f"incidents: {incidents[-10:]}")
                    continue
                nonfinite_streak = 0
                losses.append(batch_loss)
                optimizer.step(lr, cfg.momentum, cfg.weight_decay,
                               log=incidents.append)
            entry = EpochStats(epoch, lr, float(np.mean(losses)) if losses else float("nan"),
                               float(np.mean(dices)) if dices else 0.0)
            stats.append(entry)
            if log_fh:
                log_fh.write(entry.line() + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
    finally:
        if log_fh:
            log_fh.close()
    return stats

"""Residual bottleneck adapters with optional depth-aware mid-branches.

Three kinds share one bottleneck skeleton (down-FC, GELU, up-FC, scaled
residual):

* ``none``       -- the plain bottleneck.
* ``depth_mlp``  -- adds an invert-bottleneck MLP acting along the depth
                    axis, with a skip connection, for token streams.
* ``depth_conv`` -- adds a depth-wise 3-D convolution (3x1x1, depth only),
                    with a skip connection, for image-grid streams.

The depth block's insertion point is configurable: in the middle of the
bottleneck, after the up-projection, or before the down-projection.

Token inputs are (B, D, T, C); grid inputs are (B, C, D, H, W) or
(C, D, H, W). Output shape always equals input shape.
"""

from dataclasses import dataclass

from . import tensor as T
from .nn import DepthwiseConv3d, Linear, Module

KINDS = ("none", "depth_mlp", "depth_conv")
POSITIONS = ("middle", "after_up", "before_down")


@dataclass
class AdapterConfig:
    dim: int
    bottleneck_ratio: float = 0.25
    kind: str = "none"
    position: str = None
    depth: int = None            # depth extent, required for depth_mlp
    depth_mlp_ratio: float = 2.0
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if self.kind == "none":
            if self.position is not None:
                raise ValueError("kind 'none' forbids a depth-branch position")
        else:
            if self.position is None:
                self.position = "middle"
            if self.position not in POSITIONS:
                raise ValueError(f"unknown depth-branch position {self.position!r}")
        if self.bottleneck_ratio <= 0 or self.depth_mlp_ratio <= 0:
            raise ValueError("adapter ratios must be positive")
        if self.kind == "depth_mlp" and not self.depth:
            raise ValueError("depth_mlp adapters need the depth extent")

    @property
    def bottleneck(self):
        return max(1, round(self.dim * self.bottleneck_ratio))


class DepthMlp(Module):
    """Invert-bottleneck MLP over the depth axis (axis 1 of the carrier)."""

    def __init__(self, rng, depth, ratio):
        super().__init__()
        hidden = max(1, round(depth * ratio))
        self.fc1 = Linear(rng, depth, hidden)
        self.fc2 = Linear(rng, hidden, depth)

    def __call__(self, x):
        # move depth to the last axis, mix, move it back
        n = x.ndim
        fwd = (0,) + tuple(range(2, n)) + (1,)
        inv = (0, n - 1) + tuple(range(1, n - 1))
        z = T.transpose(x, fwd)
        z = self.fc2(T.gelu(self.fc1(z)))
        return T.transpose(z, inv)


class Adapter(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        self.down = Linear(rng, cfg.dim, cfg.bottleneck)
        # zero-initialized up-projection: a fresh adapter is the identity
        self.up = Linear(rng, cfg.bottleneck, cfg.dim, zero_init=True)
        branch_dim = cfg.bottleneck if cfg.position == "middle" else cfg.dim
        if cfg.kind == "depth_mlp":
            self.depth_block = DepthMlp(rng, cfg.depth, cfg.depth_mlp_ratio)
        elif cfg.kind == "depth_conv":
            self.depth_block = DepthwiseConv3d(rng, branch_dim)
        else:
            self.depth_block = None

    def _depth_branch(self, x, mode):
        """Skip-connected depth block on a channels-last carrier."""
        if self.cfg.kind == "depth_mlp":
            return x + self.depth_block(x)
        # depth_conv: channels-last (B, D, H, W, C') -> grid (B, C', D, H, W)
        if mode != "grid":
            raise ValueError("depth_conv adapters require grid mode (need D,H,W structure)")
        g = T.transpose(x, (0, 4, 1, 2, 3))
        g = self.depth_block(g)
        return x + T.transpose(g, (0, 2, 3, 4, 1))

    def delta(self, x, mode="tokens"):
        """Scaled bottleneck output, without the outer residual.

        Token input (B, D, T, C); grid input (C, D, H, W) or (B, C, D, H, W),
        returned in the same layout as given.
        """
        if mode not in ("tokens", "grid"):
            raise ValueError(f"unknown adapter mode {mode!r}")
        squeeze = False
        if mode == "grid":
            if x.ndim == 4:
                x = T.reshape(x, (1,) + x.shape)
                squeeze = True
            h = T.transpose(x, (0, 2, 3, 4, 1))  # channels last
        else:
            if x.ndim != 4:
                raise ValueError(f"token input must be (B, D, T, C), got {x.shape}")
            h = x
        if self.cfg.kind != "none" and self.cfg.position == "before_down":
            h = self._depth_branch(h, mode)
        u = T.gelu(self.down(h))
        if self.cfg.kind != "none" and self.cfg.position == "middle":
            u = self._depth_branch(u, mode)
        y = self.up(u)
        if self.cfg.kind != "none" and self.cfg.position == "after_up":
            y = self._depth_branch(y, mode)
        y = y * self.cfg.scale
        if mode == "grid":
            y = T.transpose(y, (0, 4, 1, 2, 3))
            if squeeze:
                y = T.reshape(y, y.shape[1:])
        return y

    def __call__(self, x, mode="tokens"):
        return x + self.delta(x, mode)

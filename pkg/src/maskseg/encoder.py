"""ViT-style volumetric image encoder.

Slices are patch-embedded on H and W only; the depth axis is tokenized at
stride 1 so depth-aware adapters and the learnable depth positional
embedding act on a real axis. Attention runs per depth slice (batched over
D) with shared weights: cross-slice information travels only through the
adapters' depth branches and the depth positional embedding, which keeps a
zero-depth-signal model exactly equivariant to slice permutations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import Adapter, AdapterConfig
from .nn import Attention, Conv3d, LayerNorm, Linear, Mlp, Module, ModuleList, Parameter, trunc_normal


@dataclass
class EncoderConfig:
    modalities: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    blocks: int = 12
    heads: int = 4
    tap_period: int = 3
    grid: tuple = (8, 16, 16)   # expected patch extents (D, H, W)
    mlp_ratio: float = 2.0
    adapter_kind: str = "none"
    adapter_position: str = None
    adapter_ratio: float = 0.25
    adapter_depth_mlp_ratio: float = 2.0
    adapter_scale: float = 0.5
    depth_pos_embed: bool = False

    def __post_init__(self):
        if self.blocks % self.tap_period:
            raise ValueError(f"block count {self.blocks} not divisible by "
                             f"tap period {self.tap_period}")
        if self.embed_dim % self.heads:
            raise ValueError("embed dim must be divisible by head count")
        d, h, w = self.grid
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"grid H/W {h}x{w} not divisible by patch {self.patch_size}")

    @property
    def token_grid(self):
        d, h, w = self.grid
        return (d, h // self.patch_size, w // self.patch_size)

    def adapter_config(self):
        return AdapterConfig(
            dim=self.embed_dim, bottleneck_ratio=self.adapter_ratio,
            kind=self.adapter_kind,
            position=self.adapter_position if self.adapter_kind != "none" else None,
            depth=self.grid[0], depth_mlp_ratio=self.adapter_depth_mlp_ratio,
            scale=self.adapter_scale)


@dataclass
class EncoderOutput:
    embedding: object          # final (C, D, H', W') grid
    taps: list = field(default_factory=list)  # shallow -> deep, final included

    @property
    def grid(self):
        return self.embedding.shape[1:]


class ConvStem(Module):
    """Invert-bottleneck 1x1x1 conv pair mapping M modalities to 3 channels."""

    def __init__(self, rng, modalities):
        super().__init__()
        self.expand = Conv3d(rng, modalities, 4 * modalities, (1, 1, 1))
        self.project = Conv3d(rng, 4 * modalities, 3, (1, 1, 1))

    def __call__(self, x):
        return self.project(T.gelu(self.expand(x)))


class PatchEmbed(Module):
    """(3, D, H, W) -> per-slice tokens (D, H/p * W/p, C)."""

    def __init__(self, rng, patch_size, embed_dim):
        super().__init__()
        self.patch_size = patch_size
        self.proj = Linear(rng, 3 * patch_size * patch_size, embed_dim)

    def __call__(self, x):
        p = self.patch_size
        c, d, h, w = x.shape
        hp, wp = h // p, w // p
        x = T.reshape(x, (c, d, hp, p, wp, p))
        x = T.transpose(x, (1, 2, 4, 0, 3, 5))
        x = T.reshape(x, (d, hp * wp, c * p * p))
        return self.proj(x)


class EncoderBlock(Module):
    """Pre-norm transformer block with an adapter after attention and a
    second adapter parallel to the MLP."""

    def __init__(self, rng, cfg):
        super().__init__()
        dim = cfg.embed_dim
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, cfg.heads)
        self.adapter_attn = Adapter(rng, cfg.adapter_config())
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, max(1, round(dim * cfg.mlp_ratio)))
        self.adapter_mlp = Adapter(rng, cfg.adapter_config())

    def _run_adapter(self, adapter, tokens, token_grid):
        if adapter.cfg.kind == "depth_conv":
            grid = tokens_to_grid(tokens, token_grid)
            return grid_to_tokens(adapter(grid, mode="grid"))
        d, s, c = tokens.shape
        out = adapter(T.reshape(tokens, (1, d, s, c)), mode="tokens")
        return T.reshape(out, (d, s, c))

    def _adapter_delta(self, adapter, tokens, token_grid):
        if adapter.cfg.kind == "depth_conv":
            grid = tokens_to_grid(tokens, token_grid)
            return grid_to_tokens(adapter.delta(grid, mode="grid"))
        d, s, c = tokens.shape
        out = adapter.delta(T.reshape(tokens, (1, d, s, c)), mode="tokens")
        return T.reshape(out, (d, s, c))

    def __call__(self, x, token_grid):
        h = x + self.attn(*(self.norm1(x),) * 3)
        h = self._run_adapter(self.adapter_attn, h, token_grid)
        u = self.norm2(h)
        return h + self.mlp(u) + self._adapter_delta(self.adapter_mlp, u, token_grid)


def tokens_to_grid(tokens, token_grid):
    """(D, S, C) tokens -> (C, D, H', W') grid."""
    d, hp, wp = token_grid
    x = T.reshape(tokens, (d, hp, wp, tokens.shape[-1]))
    return T.transpose(x, (3, 0, 1, 2))


def grid_to_tokens(grid):
    """(C, D, H', W') grid -> (D, S, C) tokens."""
    c, d, hp, wp = grid.shape
    x = T.transpose(grid, (1, 2, 3, 0))
    return T.reshape(x, (d, hp * wp, c))


class ImageEncoder(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        d, hp, wp = cfg.token_grid
        self.stem = ConvStem(rng, cfg.modalities)
        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.embed_dim)
        self.pos_embed = Parameter(trunc_normal(rng, (hp * wp, cfg.embed_dim)))
        if cfg.depth_pos_embed:
            # zero start: the fresh model behaves like a depth-agnostic one
            self.depth_embed = Parameter(np.zeros((d, cfg.embed_dim)))
        else:
            self.depth_embed = None
        self.blocks = ModuleList(EncoderBlock(rng, cfg) for _ in range(cfg.blocks))
        self.norm = LayerNorm(cfg.embed_dim)

    def __call__(self, image):
        """Volume data (C, D, H, W) tensor -> EncoderOutput."""
        cfg = self.cfg
        c, d, h, w = image.shape
        if (d, h, w) != tuple(cfg.grid):
            raise ValueError(f"encoder built for patches {tuple(cfg.grid)}, got {(d, h, w)}; "
                             f"crop or pad the input to match")
        if c != cfg.modalities:
            raise ValueError(f"encoder expects {cfg.modalities} modalities, got {c}")
        td, hp, wp = cfg.token_grid
        x = self.patch_embed(self.stem(image))
        s = hp * wp
        x = x + T.tile(T.reshape(self.pos_embed, (1, s, cfg.embed_dim)), (td, 1, 1))
        if self.depth_embed is not None:
            x = x + T.tile(T.reshape(self.depth_embed, (td, 1, cfg.embed_dim)), (1, s, 1))
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x, cfg.token_grid)
            if (i + 1) % cfg.tap_period == 0:
                taps.append(tokens_to_grid(x, cfg.token_grid))
        final = tokens_to_grid(self.norm(x), cfg.token_grid)
        taps.append(final)
        return EncoderOutput(embedding=final, taps=taps)

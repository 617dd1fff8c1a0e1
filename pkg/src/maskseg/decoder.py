"""Prompt encoder and two-way mask decoder with classifier tokens.

Each prompt slot is decoded independently with shared weights (batched over
N): slots never attend to each other, so permuting slots permutes outputs
exactly. Tokens carry a per-slice depth axis (N, D, T, C); the depth-MLP
adapters mix information across slices, the depth-wise conv adapter does the
same for the image stream.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import Adapter, AdapterConfig
from .nn import (Attention, Conv3d, ConvTranspose3d, LayerNorm, Linear, Mlp,
                 Module, ModuleList, Parameter, trunc_normal)
from .tensor import Tensor


def sincos_position_encoding(coords, dim):
    """Sine-cosine encoding of normalized (x, y) coordinates into `dim` dims.

    coords: ndarray (..., 2) in [0, 1]. Injective on distinct coordinates
    for the frequency ladder 2^k, k = 0..dim/4-1.
    """
    if dim % 4:
        raise ValueError("position encoding needs dim divisible by 4")
    nfreq = dim // 4
    freqs = 2.0 ** np.arange(nfreq)
    x = coords[..., 0:1] * freqs * np.pi
    y = coords[..., 1:2] * freqs * np.pi
    return np.concatenate([np.sin(x), np.cos(x), np.sin(y), np.cos(y)], axis=-1)


def sincos_position_encoding_t(coords, dim):
    """Differentiable variant of sincos_position_encoding for tensor coords."""
    if dim % 4:
        raise ValueError("position encoding needs dim divisible by 4")
    nfreq = dim // 4
    lead = coords.shape[:-1]
    freqs = Tensor(np.broadcast_to(np.pi * 2.0 ** np.arange(nfreq),
                                   lead + (nfreq,)).copy())
    x = T.tile(coords[..., 0:1], (1,) * len(lead) + (nfreq,)) * freqs
    y = T.tile(coords[..., 1:2], (1,) * len(lead) + (nfreq,)) * freqs
    return T.concat([T.sin(x), T.cos(x), T.sin(y), T.cos(y)], axis=-1)


@dataclass
class DecoderConfig:
    embed_dim: int
    heads: int
    num_classes: int           # K; the classifier emits K+1 with "no object"
    token_grid: tuple          # (D, H', W')
    patch_extents: tuple       # (D, H, W)
    rounds: int = 2
    with_mask_prompts: bool = True
    mask_downscale: int = 4    # H/W ratio between patch and embedding grid
    token_adapter_kind: str = "none"
    token_adapter_position: str = None
    image_adapter_kind: str = "none"
    image_adapter_position: str = None
    adapter_ratio: float = 0.25
    adapter_depth_mlp_ratio: float = 2.0
    adapter_scale: float = 0.5
    depth_pos_embed: bool = False

    def adapter_config(self, which):
        kind = self.token_adapter_kind if which == "token" else self.image_adapter_kind
        pos = self.token_adapter_position if which == "token" else self.image_adapter_position
        return AdapterConfig(
            dim=self.embed_dim, bottleneck_ratio=self.adapter_ratio,
            kind=kind, position=pos if kind != "none" else None,
            depth=self.token_grid[0], depth_mlp_ratio=self.adapter_depth_mlp_ratio,
            scale=self.adapter_scale)


@dataclass
class DecoderOutput:
    final_mask_logits: object  # (N, D, H, W)
    class_logits: object       # (N, K+1)


class PromptEncoder(Module):
    """Boxes -> two corner tokens; mask logits -> dense per-slot embeddings."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.corner_embed = Parameter(trunc_normal(rng, (2, c)))
        self.no_mask_embed = Parameter(trunc_normal(rng, (c,)))
        if cfg.with_mask_prompts:
            steps = int(np.log2(cfg.mask_downscale))
            if 2 ** steps != cfg.mask_downscale:
                raise ValueError("mask downscale factor must be a power of two")
            convs = []
            ch = 1
            for i in range(steps):
                out_ch = min(c, 4 * 2 ** i)
                convs.append(Conv3d(rng, ch, out_ch, (1, 2, 2), stride=(1, 2, 2)))
                ch = out_ch
            self.downscaler = ModuleList(convs)
            self.mask_proj = Conv3d(rng, ch, c, (1, 1, 1))
        else:
            self.downscaler = None
            self.mask_proj = None

    def __call__(self, boxes, mask_logits=None):
        """(N, 4) boxes, optional (N, D, H, W) mask logits ->
        sparse (N, 2, C), dense (N, C, D, H', W')."""
        cfg = self.cfg
        n = boxes.shape[0]
        c = cfg.embed_dim
        d, hp, wp = cfg.token_grid
        # corner tokens: sinusoidal encoding of the two corner coordinates
        # plus learned corner-type embeddings
        corners = T.reshape(boxes, (n, 2, 2))
        pe = sincos_position_encoding_t(corners, c)
        sparse = pe + T.tile(T.reshape(self.corner_embed, (1, 2, c)), (n, 1, 1))
        if mask_logits is None:
            dense = T.tile(T.reshape(self.no_mask_embed, (1, c, 1, 1, 1)),
                           (n, 1, d, hp, wp))
            return sparse, dense
        if self.downscaler is None:
            raise ValueError("decoder was built without a mask-prompt path")
        x = T.reshape(mask_logits, (n, 1) + mask_logits.shape[1:])
        for conv in self.downscaler:
            x = T.gelu(conv(x))
        dense = self.mask_proj(x)
        return sparse, dense


class DecoderBlock(Module):
    """One two-way round: token self-attention, token->image cross-attention,
    token MLP (with a parallel adapter), image->token cross-attention."""

    def __init__(self, rng, cfg):
        super().__init__()
        dim = cfg.embed_dim
        self.self_attn = Attention(rng, dim, cfg.heads)
        self.norm1 = LayerNorm(dim)
        self.adapter_self = Adapter(rng, cfg.adapter_config("token"))
        self.cross_t2i = Attention(rng, dim, cfg.heads)
        self.norm2 = LayerNorm(dim)
        self.adapter_t2i = Adapter(rng, cfg.adapter_config("token"))
        self.mlp = Mlp(rng, dim, 2 * dim, act=T.relu)
        self.norm3 = LayerNorm(dim)
        self.adapter_mlp = Adapter(rng, cfg.adapter_config("token"))
        self.cross_i2t = Attention(rng, dim, cfg.heads)
        self.norm4 = LayerNorm(dim)
        self.adapter_image = Adapter(rng, cfg.adapter_config("image"))

    def __call__(self, tokens, src, token_pe, src_pe, token_grid):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        tokens = self.adapter_self(tokens, mode="tokens")

        q = tokens + token_pe
        k = src + src_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, src))
        tokens = self.adapter_t2i(tokens, mode="tokens")

        u = self.mlp(tokens) + self.adapter_mlp.delta(tokens, mode="tokens")
        tokens = self.norm3(tokens + u)

        q = src + src_pe
        k = tokens + token_pe
        src = self.norm4(src + self.cross_i2t(q, k, tokens))
        if self.adapter_image.cfg.kind == "depth_conv":
            grid = _tokens_to_slot_grid(src, token_grid)
            src = _slot_grid_to_tokens(self.adapter_image(grid, mode="grid"))
        else:
            src = self.adapter_image(src, mode="tokens")
        return tokens, src


def _tokens_to_slot_grid(tokens, token_grid):
    # (N, D, S, C) -> (N, C, D, H', W')
    n = tokens.shape[0]
    d, hp, wp = token_grid
    x = T.reshape(tokens, (n, d, hp, wp, tokens.shape[-1]))
    return T.transpose(x, (0, 4, 1, 2, 3))


def _slot_grid_to_tokens(grid):
    n, c, d, hp, wp = grid.shape
    x = T.transpose(grid, (0, 2, 3, 4, 1))
    return T.reshape(x, (n, d, hp * wp, c))


class MaskDecoder(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        d, hp, wp = cfg.token_grid
        self.global_cls_token = Parameter(trunc_normal(rng, (c,)))
        self.mask_token = Parameter(trunc_normal(rng, (c,)))
        if cfg.depth_pos_embed:
            self.depth_embed = Parameter(np.zeros((d, c)))
        else:
            self.depth_embed = None
        self.blocks = ModuleList(DecoderBlock(rng, cfg) for _ in range(cfg.rounds))
        self.final_t2i = Attention(rng, c, cfg.heads)
        self.final_norm = LayerNorm(c)
        self.up1 = ConvTranspose3d(rng, c, c // 2, (1, 2, 2))
        self.up2 = ConvTranspose3d(rng, c // 2, c // 4, (1, 2, 2))
        self.mask_mlp = Mlp(rng, c, c, c // 4)
        self.class_head = Linear(rng, c, cfg.num_classes + 1)
        # fixed 2-D sine-cosine embedding of the token grid (pixel centres)
        ys, xs = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
        coords = np.stack([(xs + 0.5) / wp, (ys + 0.5) / hp], axis=-1).reshape(-1, 2)
        self._image_pe = sincos_position_encoding(coords, c)

    def _src_pe(self, n):
        d, hp, wp = self.cfg.token_grid
        c = self.cfg.embed_dim
        pe = Tensor(self._image_pe.reshape(1, 1, hp * wp, c))
        pe = T.tile(pe, (n, d, 1, 1))
        if self.depth_embed is not None:
            dp = T.reshape(self.depth_embed, (1, d, 1, c))
            pe = pe + T.tile(dp, (n, 1, hp * wp, 1))
        return pe

    def __call__(self, image_embedding, sparse, dense, aux_cls_tokens):
        """Decode every prompt slot against the shared image embedding.

        image_embedding (C, D, H', W'); sparse (N, 2, C); dense
        (N, C, D, H', W'); aux_cls_tokens (N, C).
        """
        cfg = self.cfg
        n = sparse.shape[0]
        c = cfg.embed_dim
        d, hp, wp = cfg.token_grid
        s = hp * wp

        cls = aux_cls_tokens + T.tile(T.reshape(self.global_cls_token, (1, c)), (n, 1))
        cls = T.tile(T.reshape(cls, (n, 1, 1, c)), (1, d, 1, 1))
        mask_tok = T.tile(T.reshape(self.mask_token, (1, 1, 1, c)), (n, d, 1, 1))
        corners = T.tile(T.reshape(sparse, (n, 1, 2, c)), (1, d, 1, 1))
        tokens = T.concat([cls, mask_tok, corners], axis=2)   # (N, D, 4, C)
        token_pe = tokens                                     # SAM-style query PE

        img = T.reshape(_slot_grid_to_tokens_single(image_embedding), (1, d, s, c))
        src = T.tile(img, (n, 1, 1, 1)) + _slot_grid_to_tokens(dense)
        src_pe = self._src_pe(n)

        for block in self.blocks:
            tokens, src = block(tokens, src, token_pe, src_pe, cfg.token_grid)

        q = tokens + token_pe
        tokens = self.final_norm(tokens + self.final_t2i(q, src + src_pe, src))

        cls_out = T.reshape(tokens[:, :, 0, :], (n, d, c)).mean(axis=1)
        class_logits = self.class_head(cls_out)

        up = T.gelu(self.up1(_tokens_to_slot_grid(src, cfg.token_grid)))
        up = T.gelu(self.up2(up))                              # (N, C/4, D, 4H', 4W')
        mtok = self.mask_mlp(T.reshape(tokens[:, :, 1, :], (n, d, 1, c)))
        h4, w4 = up.shape[-2], up.shape[-1]
        up_tokens = T.reshape(T.transpose(up, (0, 2, 3, 4, 1)), (n, d, h4 * w4, c // 4))
        logits = T.matmul(mtok, T.transpose(up_tokens, (0, 1, 3, 2)))
        logits = T.reshape(logits, (n, d, h4, w4))
        if (d, h4, w4) != tuple(cfg.patch_extents):
            logits = T.reshape(logits, (n, 1, d, h4, w4))
            logits = T.upsample_trilinear3d(logits, cfg.patch_extents)
            logits = T.reshape(logits, (n,) + tuple(cfg.patch_extents))
        return DecoderOutput(final_mask_logits=logits, class_logits=class_logits)


def _slot_grid_to_tokens_single(grid):
    c, d, hp, wp = grid.shape
    x = T.transpose(grid, (1, 2, 3, 0))
    return T.reshape(x, (d, hp * wp, c))

"""Full segmentation model: encoder -> prompt generator -> prompt encoder ->
mask decoder, plus the nine ablation presets selecting prompt variant,
adapter kind/placement, and depth positional embeddings.
"""

from dataclasses import dataclass, replace

from .decoder import DecoderConfig, MaskDecoder, PromptEncoder
from .encoder import EncoderConfig, ImageEncoder
from .nn import Module
from .prompt_gen import (PromptBundle, PromptGenerator, PromptGeneratorConfig,
                         resolve_prompts, variant_has_masks)

# Ablation presets: prompt variant, adapter kind/placement for the token
# (prompt-embedding) and image (image-embedding) streams, depth pos-embeds.
ABLATIONS = {
    "B1": dict(prompt_variant="mask", token_adapter=("none", None),
               image_adapter=("none", None), depth_pos_embed=False),
    "B2": dict(prompt_variant="box", token_adapter=("none", None),
               image_adapter=("none", None), depth_pos_embed=False),
    "B3": dict(prompt_variant="mask_box", token_adapter=("none", None),
               image_adapter=("none", None), depth_pos_embed=False),
    "B4": dict(prompt_variant="mask_avg_box", token_adapter=("none", None),
               image_adapter=("none", None), depth_pos_embed=False),
    "B5": dict(prompt_variant="mask_avg_box", token_adapter=("none", None),
               image_adapter=("none", None), depth_pos_embed=True),
    "B6": dict(prompt_variant="mask_avg_box", token_adapter=("depth_mlp", "after_up"),
               image_adapter=("depth_mlp", "after_up"), depth_pos_embed=True),
    "B7": dict(prompt_variant="mask_avg_box", token_adapter=("depth_mlp", "before_down"),
               image_adapter=("depth_mlp", "before_down"), depth_pos_embed=True),
    "B8": dict(prompt_variant="mask_avg_box", token_adapter=("depth_mlp", "middle"),
               image_adapter=("depth_mlp", "middle"), depth_pos_embed=True),
    "B9": dict(prompt_variant="mask_avg_box", token_adapter=("depth_mlp", "middle"),
               image_adapter=("depth_conv", "middle"), depth_pos_embed=True),
}


@dataclass
class ModelConfig:
    modalities: int = 1
    num_classes: int = 3
    patch_extents: tuple = (8, 16, 16)   # (D, H, W) of one training patch
    patch_size: int = 4
    embed_dim: int = 32
    blocks: int = 4
    heads: int = 4
    tap_period: int = 2
    mlp_ratio: float = 2.0
    num_prompts: int = 10
    prompt_variant: str = "mask_avg_box"
    token_adapter: tuple = ("depth_mlp", "middle")
    image_adapter: tuple = ("depth_conv", "middle")
    adapter_ratio: float = 0.25
    adapter_depth_mlp_ratio: float = 2.0
    adapter_scale: float = 0.5
    depth_pos_embed: bool = True
    decoder_rounds: int = 2

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; expected B1..B9")
        return replace(self, **ABLATIONS[name])

    @property
    def num_taps(self):
        return self.blocks // self.tap_period + 1

    @property
    def token_grid(self):
        d, h, w = self.patch_extents
        return (d, h // self.patch_size, w // self.patch_size)

    def encoder_config(self):
        kind, pos = self.image_adapter
        return EncoderConfig(
            modalities=self.modalities, patch_size=self.patch_size,
            embed_dim=self.embed_dim, blocks=self.blocks, heads=self.heads,
            tap_period=self.tap_period, grid=self.patch_extents,
            mlp_ratio=self.mlp_ratio, adapter_kind=kind, adapter_position=pos,
            adapter_ratio=self.adapter_ratio,
            adapter_depth_mlp_ratio=self.adapter_depth_mlp_ratio,
            adapter_scale=self.adapter_scale, depth_pos_embed=self.depth_pos_embed)

    def prompt_generator_config(self):
        return PromptGeneratorConfig(
            embed_dim=self.embed_dim, num_taps=self.num_taps,
            token_grid=self.token_grid, target_extents=self.patch_extents,
            num_prompts=self.num_prompts, variant=self.prompt_variant)

    def decoder_config(self):
        tkind, tpos = self.token_adapter
        ikind, ipos = self.image_adapter
        return DecoderConfig(
            embed_dim=self.embed_dim, heads=self.heads,
            num_classes=self.num_classes, token_grid=self.token_grid,
            patch_extents=self.patch_extents, rounds=self.decoder_rounds,
            with_mask_prompts=variant_has_masks(self.prompt_variant),
            mask_downscale=self.patch_size,
            token_adapter_kind=tkind, token_adapter_position=tpos,
            image_adapter_kind=ikind, image_adapter_position=ipos,
            adapter_ratio=self.adapter_ratio,
            adapter_depth_mlp_ratio=self.adapter_depth_mlp_ratio,
            adapter_scale=self.adapter_scale, depth_pos_embed=self.depth_pos_embed)


@dataclass
class ModelOutput:
    encoder_output: object
    bundle: PromptBundle
    resolved: object
    decoder_output: object


class SegModel(Module):
    """End-to-end prompt-free mask-classification segmenter."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(rng, cfg.encoder_config())
        self.prompt_generator = PromptGenerator(rng, cfg.prompt_generator_config())
        self.prompt_encoder = PromptEncoder(rng, cfg.decoder_config())
        self.decoder = MaskDecoder(rng, cfg.decoder_config())

    def __call__(self, image):
        """image: (C, D, H, W) tensor -> ModelOutput."""
        enc = self.encoder(image)
        bundle = self.prompt_generator(enc)
        resolved = resolve_prompts(bundle)
        sparse, dense = self.prompt_encoder(resolved.box_prompts, resolved.mask_prompts)
        dec = self.decoder(enc.embedding, sparse, dense, bundle.aux_cls_tokens)
        return ModelOutput(enc, bundle, resolved, dec)

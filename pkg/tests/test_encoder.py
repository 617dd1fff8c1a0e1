"""Image encoder: shape laws, taps, adapter identity, depth sensitivity."""

import numpy as np
import pytest

from maskseg import tensor as T
from maskseg.encoder import ConvStem, EncoderConfig, ImageEncoder
from maskseg.tensor import Tensor, backward, grad_check, grad_check_param


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def tiny_cfg(**kw):
    base = dict(modalities=1, patch_size=4, embed_dim=8, blocks=2, heads=2,
                tap_period=1, grid=(2, 8, 8), mlp_ratio=2.0)
    base.update(kw)
    return EncoderConfig(**base)


class TestConvStem:
    def test_single_modality_shape(self, rng):
        stem = ConvStem(rng, 1)
        out = stem(Tensor(rng.normal(size=(1, 4, 16, 16))))
        assert out.shape == (3, 4, 16, 16)

    def test_four_modalities_shape(self, rng):
        stem = ConvStem(rng, 4)
        out = stem(Tensor(rng.normal(size=(4, 2, 8, 8))))
        assert out.shape == (3, 2, 8, 8)

    def test_gradient_reaches_stem_weights(self, rng):
        stem = ConvStem(rng, 1)
        backward(T.sum_(stem(Tensor(rng.normal(size=(1, 2, 4, 4)))) *
                        stem(Tensor(rng.normal(size=(1, 2, 4, 4))))))
        assert np.abs(stem.expand.weight.grad).max() > 0
        assert np.abs(stem.project.weight.grad).max() > 0


class TestEncoderShapes:
    def test_spec_shape_example(self, rng):
        cfg = EncoderConfig(modalities=1, patch_size=4, embed_dim=32, blocks=4,
                            heads=4, tap_period=2, grid=(4, 16, 16))
        enc = ImageEncoder(rng, cfg)
        out = enc(Tensor(rng.normal(size=(1, 4, 16, 16))))
        assert out.embedding.shape == (32, 4, 4, 4)
        assert len(out.taps) == 4 // 2 + 1

    def test_tap_count_invariant(self, rng):
        for blocks, period in ((2, 1), (4, 2), (6, 3)):
            cfg = tiny_cfg(blocks=blocks, tap_period=period)
            out = ImageEncoder(rng, cfg)(Tensor(rng.normal(size=(1, 2, 8, 8))))
            assert len(out.taps) == blocks // period + 1

    def test_final_is_last_tap(self, rng):
        out = ImageEncoder(rng, tiny_cfg())(Tensor(rng.normal(size=(1, 2, 8, 8))))
        assert out.taps[-1] is out.embedding

    def test_indivisible_extents_rejected(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            EncoderConfig(modalities=1, patch_size=4, embed_dim=8, blocks=2,
                          heads=2, tap_period=1, grid=(2, 10, 8))

    def test_wrong_input_grid_rejected(self, rng):
        enc = ImageEncoder(rng, tiny_cfg())
        with pytest.raises(ValueError, match="crop or pad"):
            enc(Tensor(rng.normal(size=(1, 2, 16, 16))))

    def test_determinism(self, rng):
        enc = ImageEncoder(rng, tiny_cfg())
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        a = enc(x).embedding.data
        b = enc(x).embedding.data
        np.testing.assert_array_equal(a, b)


class TestAdapterIdentity:
    def test_zeroed_adapters_match_adapter_free_encoder(self, rng):
        seed_rng = np.random.default_rng(99)
        cfg_plain = tiny_cfg(adapter_kind="none")
        cfg_adapters = tiny_cfg(adapter_kind="depth_conv", adapter_position="middle")
        plain = ImageEncoder(np.random.default_rng(99), cfg_plain)
        adapted = ImageEncoder(np.random.default_rng(99), cfg_adapters)
        # align the shared weights, then zero every adapter up-projection
        shared = plain.state_dict()
        adapted.load_state_dict(shared, strict=False)
        for name, p in adapted.named_parameters():
            if "/up/" in name and ("adapter" in name):
                p.data[:] = 0.0
            elif "adapter" in name and name not in shared:
                p.data[:] = rng.normal(size=p.shape)  # everything else arbitrary
                if "/up/" in name:
                    p.data[:] = 0.0
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        np.testing.assert_array_equal(adapted(x).embedding.data, plain(x).embedding.data)
        del seed_rng


class TestDepthBehaviour:
    def test_depth_embed_breaks_slice_equivariance(self, rng):
        cfg = tiny_cfg(depth_pos_embed=True)
        enc = ImageEncoder(rng, cfg)
        enc.depth_embed.data = rng.normal(0, 0.5, size=enc.depth_embed.shape)
        x = rng.normal(size=(1, 2, 8, 8))
        swapped = x[:, ::-1].copy()
        out = enc(Tensor(x)).embedding.data
        out_swapped = enc(Tensor(swapped)).embedding.data
        assert not np.allclose(out_swapped, out[:, ::-1])

    def test_zero_depth_signal_is_slice_equivariant(self, rng):
        # no depth embedding, vanilla adapters: swapping slices must commute
        cfg = tiny_cfg(adapter_kind="none", depth_pos_embed=False)
        enc = ImageEncoder(rng, cfg)
        x = rng.normal(size=(1, 2, 8, 8))
        out = enc(Tensor(x)).embedding.data
        out_swapped = enc(Tensor(x[:, ::-1].copy())).embedding.data
        np.testing.assert_allclose(out_swapped, out[:, ::-1], atol=1e-12)

    def test_depth_conv_adapter_breaks_equivariance_once_trained(self, rng):
        cfg = tiny_cfg(adapter_kind="depth_conv", adapter_position="middle",
                       grid=(4, 8, 8))
        enc = ImageEncoder(rng, cfg)
        for name, p in enc.named_parameters():
            if "adapter" in name and "/up/" in name and p.ndim == 2:
                p.data = rng.normal(0, 0.3, size=p.shape)
        x = rng.normal(size=(1, 4, 8, 8))
        perm = [2, 0, 1, 3]  # non-reversal permutation, breaks conv neighbourhoods
        out = enc(Tensor(x)).embedding.data
        out_perm = enc(Tensor(x[:, perm].copy())).embedding.data
        assert not np.allclose(out_perm, out[:, perm])


# Checked losses are scaled by an exact power of two: it leaves relative
# errors of healthy gradients untouched but pushes the FD oracle's own
# roundoff (about one ulp of the loss per 2h) below the 1e-8 denominator
# floor for dead-zone elements.
LOSS_SCALE = 2.0 ** -12


class TestEncoderGradients:
    def test_end_to_end_gradcheck_input(self, rng):
        enc = ImageEncoder(rng, tiny_cfg(adapter_kind="depth_conv",
                                         adapter_position="middle"))
        for name, p in enc.named_parameters():
            if "/up/" in name and p.ndim == 2:
                p.data = rng.normal(0, 0.2, size=p.shape)
        report = grad_check(
            lambda x: T.sum_(enc(x).embedding * enc(x).embedding) * LOSS_SCALE,
            Tensor(rng.normal(size=(1, 2, 8, 8))))
        assert report.passed, report

    def test_parameter_gradcheck_sampled(self, rng):
        enc = ImageEncoder(rng, tiny_cfg(adapter_kind="depth_mlp",
                                         adapter_position="middle"))
        for name, p in enc.named_parameters():
            if "/up/" in name and p.ndim == 2:
                p.data = rng.normal(0, 0.2, size=p.shape)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))

        def loss_fn():
            out = enc(x)
            return T.sum_(out.embedding * out.embedding) * LOSS_SCALE

        names = ["stem/expand/weight", "patch_embed/proj/weight", "pos_embed",
                 "blocks/0/attn/q/weight", "blocks/0/adapter_attn/down/weight",
                 "blocks/0/adapter_mlp/depth_block/fc1/weight",
                 "blocks/1/mlp/fc1/weight", "norm/weight"]
        params = dict(enc.named_parameters())
        for name in names:
            report = grad_check_param(loss_fn, params[name], sample=6, rng=rng)
            assert report.passed, (name, report)

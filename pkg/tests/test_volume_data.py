"""Volume I/O, dataset mapping round trips, boxes, mirroring, synthesis."""

import numpy as np
import pytest

from maskseg.data import (DataError, EmptyMaskError, SynthSpec, assemble_from_segments,
                          box_from_mask, dataset_map, flip_volume, load_dataset,
                          max_segments, mirror_augment, synth_dataset, write_dataset)
from maskseg.volume import Volume, VolumeError, read_rvf, write_rvf


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestVolumeRvf:
    def test_roundtrip_image(self, rng, tmp_path):
        vol = Volume(rng.normal(size=(2, 3, 4, 5)).astype(np.float32))
        path = tmp_path / "v.rvf"
        write_rvf(path, vol)
        back = read_rvf(path)
        assert back.kind == "image"
        np.testing.assert_array_equal(back.data, vol.data)

    def test_roundtrip_labels(self, rng, tmp_path):
        vol = Volume(rng.integers(0, 4, size=(1, 2, 4, 4)), kind="labels")
        path = tmp_path / "l.rvf"
        write_rvf(path, vol)
        back = read_rvf(path)
        assert back.kind == "labels"
        np.testing.assert_array_equal(back.data, vol.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.rvf"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 40)
        with pytest.raises(VolumeError, match="magic"):
            read_rvf(path)

    def test_rejects_nonfinite_image(self):
        with pytest.raises(VolumeError, match="finite"):
            Volume(np.array([[[[np.inf]]]]))

    def test_rejects_multichannel_labels(self):
        with pytest.raises(VolumeError, match="single-channel"):
            Volume(np.zeros((2, 1, 1, 1), dtype=np.uint8), kind="labels")


class TestBoxFromMask:
    def test_full_foreground(self):
        mask = np.ones((2, 4, 4), dtype=np.uint8)
        assert box_from_mask(mask) == (0.0, 0.0, 1.0, 1.0)

    def test_single_voxel(self):
        mask = np.zeros((1, 4, 4), dtype=np.uint8)
        mask[0, 1, 2] = 1
        assert box_from_mask(mask) == (0.5, 0.25, 0.75, 0.5)

    def test_row_band(self):
        mask = np.zeros((1, 4, 4), dtype=np.uint8)
        mask[0, 0:2, 0:4] = 1
        assert box_from_mask(mask) == (0.0, 0.0, 1.0, 0.5)

    def test_empty_mask_distinct_error(self):
        with pytest.raises(EmptyMaskError):
            box_from_mask(np.zeros((2, 4, 4), dtype=np.uint8))

    def test_flip_width_mirrors_box(self, rng):
        for _ in range(20):
            mask = (rng.random((3, 6, 8)) < 0.2).astype(np.uint8)
            if not mask.any():
                continue
            x0, y0, x1, y1 = box_from_mask(mask)
            fx0, fy0, fx1, fy1 = box_from_mask(mask[:, :, ::-1])
            assert (fx0, fy0, fx1, fy1) == pytest.approx((1 - x1, y0, 1 - x0, y1))


class TestDatasetMap:
    def test_two_class_example(self):
        lab = Volume(np.array([[[[0, 1], [2, 1]]]]), kind="labels")
        segset = dataset_map(lab, 2)
        assert segset.class_ids() == [1, 2]
        np.testing.assert_array_equal(segset.segments[0].mask[0], [[0, 1], [0, 1]])
        np.testing.assert_array_equal(segset.segments[1].mask[0], [[0, 0], [1, 0]])

    def test_background_only(self):
        lab = Volume(np.zeros((1, 1, 2, 2), dtype=np.uint8), kind="labels")
        assert len(dataset_map(lab, 3)) == 0

    def test_label_above_k_rejected(self):
        lab = Volume(np.full((1, 1, 2, 2), 5, dtype=np.uint8), kind="labels")
        with pytest.raises(DataError, match="exceeds"):
            dataset_map(lab, 4)

    def test_roundtrip_random_volumes(self, rng):
        for _ in range(25):
            lab = Volume(rng.integers(0, 5, size=(1, 4, 8, 8)), kind="labels")
            segset = dataset_map(lab, 4)
            back = assemble_from_segments(segset)
            np.testing.assert_array_equal(back.data, lab.data)


class TestMirrorAugment:
    def test_no_axes_is_identity(self, rng):
        img = Volume(rng.normal(size=(1, 2, 3, 3)))
        lab = Volume(rng.integers(0, 2, size=(1, 2, 3, 3)), kind="labels")
        out_img, out_lab = mirror_augment(img, lab, (), rng)
        assert out_img == img and out_lab == lab

    def test_forced_width_flip(self):
        img = Volume(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        flipped = flip_volume(img, ("width",))
        np.testing.assert_array_equal(flipped.data[0, 0], [[2, 1], [4, 3]])

    def test_double_flip_identity(self, rng):
        img = Volume(rng.normal(size=(1, 3, 4, 5)))
        assert flip_volume(flip_volume(img, ("depth", "height")), ("depth", "height")) == img

    def test_preserves_class_voxel_counts(self, rng):
        img = Volume(rng.normal(size=(1, 4, 4, 4)))
        lab = Volume(rng.integers(0, 3, size=(1, 4, 4, 4)), kind="labels")
        _, out_lab = mirror_augment(img, lab, ("depth", "height", "width"), rng)
        for c in range(3):
            assert (out_lab.data == c).sum() == (lab.data == c).sum()

    def test_image_and_labels_flip_together(self, rng):
        data = rng.normal(size=(1, 2, 4, 4))
        img = Volume(data)
        lab = Volume((data > 0).astype(np.uint8), kind="labels")
        out_img, out_lab = mirror_augment(img, lab, ("width", "height"), rng)
        np.testing.assert_array_equal(out_lab.data, (out_img.data > 0).astype(np.uint8))


class TestSynthDataset:
    def test_seed_determinism(self):
        spec = SynthSpec(volumes=4, extents=(4, 16, 16), num_classes=3, seed=7)
        a = synth_dataset(spec)
        b = synth_dataset(spec)
        for (ia, la), (ib, lb) in zip(a, b):
            np.testing.assert_array_equal(ia.data, ib.data)
            np.testing.assert_array_equal(la.data, lb.data)

    def test_label_values_bounded(self):
        spec = SynthSpec(volumes=6, extents=(4, 16, 16), num_classes=3, seed=3)
        for _, lab in synth_dataset(spec):
            assert set(np.unique(lab.data)) <= {0, 1, 2, 3}

    def test_every_class_appears(self):
        spec = SynthSpec(volumes=5, extents=(4, 16, 16), num_classes=4, seed=11)
        seen = set()
        for _, lab in synth_dataset(spec):
            seen |= set(np.unique(lab.data))
        assert {1, 2, 3, 4} <= seen

    def test_segments_have_positive_boxes(self):
        spec = SynthSpec(volumes=4, extents=(4, 16, 16), num_classes=3, seed=5)
        for _, lab in synth_dataset(spec):
            segset = dataset_map(lab, 3)
            assert len(segset) >= 1
            for seg in segset.segments:
                x0, y0, x1, y1 = seg.box
                assert x1 > x0 and y1 > y0

    def test_zero_classes_rejected(self):
        with pytest.raises(DataError):
            synth_dataset(SynthSpec(num_classes=0))


class TestDatasetDir:
    def test_write_load_roundtrip(self, tmp_path):
        spec = SynthSpec(volumes=3, extents=(4, 16, 16), num_classes=2, seed=1)
        pairs = synth_dataset(spec)
        write_dataset(tmp_path / "ds", pairs, 2)
        ds = load_dataset(tmp_path / "ds")
        assert ds.num_classes == 2
        assert ds.ids == ["000", "001", "002"]
        img, lab = ds.load("001")
        # image samples are stored as float32 on disk
        np.testing.assert_array_equal(img.data, pairs[1][0].data.astype(np.float32))
        assert lab == pairs[1][1]
        assert max_segments(ds) >= 1

    def test_missing_meta(self, tmp_path):
        with pytest.raises(DataError, match="meta"):
            load_dataset(tmp_path)

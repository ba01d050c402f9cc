import numpy as np
import pytest
from scipy import stats

from momentnet import data as D
from momentnet.errors import ContractViolation, FormatError, GenerationError

from helpers import rng

CLASSES = list(D.SHAPE_CLASSES)


class TestSynthGenerate:
    def test_deterministic_from_seed(self):
        a = D.synth_generate(40, CLASSES, 16, 16, seed=9)
        b = D.synth_generate(40, CLASSES, 16, 16, seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = D.synth_generate(10, CLASSES, 16, 16, seed=1)
        b = D.synth_generate(10, CLASSES, 16, 16, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_balanced_label_histogram(self):
        ds = D.synth_generate(100, CLASSES, 16, 16, seed=3)
        counts = np.bincount(ds.labels, minlength=5)
        np.testing.assert_array_equal(counts, [20] * 5)

    def test_pixels_in_unit_range(self):
        ds = D.synth_generate(50, CLASSES, 16, 16, seed=4)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_texture_kind_independent_of_label(self):
        # chi-squared independence between fg texture kind and label
        ds = D.synth_generate(5000, CLASSES, 16, 16, seed=5)
        kinds = {k: i for i, k in enumerate(D.TEXTURE_KINDS)}
        table = np.zeros((len(kinds), 5))
        for spec, label in zip(ds.specs, ds.labels):
            table[kinds[spec.fg.kind], label] += 1
        assert stats.chi2_contingency(table).pvalue > 0.01

    def test_contrast_floor(self):
        ds = D.synth_generate(200, CLASSES, 16, 16, seed=6)
        for spec in ds.specs:
            fg = D._luminance(D._mean_color(spec.fg))
            bg = D._luminance(D._mean_color(spec.bg))
            assert abs(fg - bg) >= 0.25

    def test_scale_invariant_range(self):
        ds = D.synth_generate(200, CLASSES, 16, 16, seed=7)
        for spec in ds.specs:
            assert 0.5 <= spec.scale <= 1.3
            assert abs(spec.tx) < 1.0 and abs(spec.ty) < 1.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ContractViolation):
            D.synth_generate(3, CLASSES, 16, 16, seed=0)  # n < classes
        with pytest.raises(GenerationError):
            D.synth_generate(10, CLASSES, 4, 4, seed=0)  # frame too small
        with pytest.raises(ContractViolation):
            D.synth_generate(10, ["blob"], 16, 16, seed=0)


class TestApplyAffine:
    def test_identity_is_bit_exact(self):
        img = D.synth_generate(1, ["disk"], 16, 16, seed=8).images[0]
        out = D.apply_affine(img, 0.0, 1.0, (0.0, 0.0))
        np.testing.assert_array_equal(out, img)

    def test_quarter_turn_matches_grid_rotation(self):
        img = D.synth_generate(1, ["cross"], 16, 16, seed=9).images[0]
        out = D.apply_affine(img, 90.0, 1.0, (0.0, 0.0))
        expected = np.stack([np.rot90(img[c], k=-1) for c in range(3)])
        assert np.max(np.abs(out - expected)) < 1e-6

    def test_rotation_round_trip_interior(self):
        img = D.synth_generate(1, ["annulus"], 32, 32, seed=10).images[0]
        back = D.apply_affine(D.apply_affine(img, 25.0, 1.0, (0.0, 0.0)), -25.0, 1.0, (0.0, 0.0))
        interior = (slice(None), slice(8, 24), slice(8, 24))
        assert np.mean(np.abs(back[interior] - img[interior])) < 0.05

    def test_output_clamped(self):
        img = D.synth_generate(1, ["rectangle"], 16, 16, seed=11).images[0]
        out = D.apply_affine(img, 33.0, 0.8, (0.1, -0.05))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_non_positive_scale_raises(self):
        img = np.zeros((3, 8, 8))
        with pytest.raises(ContractViolation):
            D.apply_affine(img, 10.0, 0.0, (0.0, 0.0))


class TestDistortion:
    def test_rotation_draws_are_uniform(self):
        rot, sc, tx, ty = D.distortion_params(D.DistortionSpec("R"), 10000, seed=12)
        assert stats.kstest(rot, stats.uniform(loc=-90, scale=180).cdf).pvalue > 0.01
        assert np.all(sc == 1.0) and np.all(tx == 0.0) and np.all(ty == 0.0)

    def test_rst_ranges(self):
        rot, sc, tx, ty = D.distortion_params(D.DistortionSpec("RST"), 10000, seed=13)
        assert rot.min() >= -90 and rot.max() <= 90
        assert sc.min() >= 0.7 and sc.max() <= 1.2
        assert np.max(np.abs(tx)) <= 0.2 and np.max(np.abs(ty)) <= 0.2

    def test_same_seed_same_distorted_set(self):
        ds = D.synth_generate(12, CLASSES, 16, 16, seed=14)
        a = D.distort_eval_set(ds, D.DistortionSpec("RST"), seed=15)
        b = D.distort_eval_set(ds, D.DistortionSpec("RST"), seed=15)
        np.testing.assert_array_equal(a.images, b.images)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractViolation):
            D.DistortionSpec("RS")


class TestAugment:
    def test_disabled_policy_is_identity(self):
        img = D.synth_generate(1, ["triangle"], 16, 16, seed=16).images[0]
        out = D.augment(img, D.AugmentPolicy(flip=False, affine=False, color=False), rng(17))
        np.testing.assert_array_equal(out, img)

    def test_outputs_stay_in_unit_range(self):
        img = D.synth_generate(1, ["disk"], 8, 8, seed=18).images[0]
        r = rng(19)
        policy = D.AugmentPolicy()
        for _ in range(10000):
            out = D.augment(img, policy, r)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_reproducible_stream(self):
        img = D.synth_generate(1, ["cross"], 16, 16, seed=20).images[0]
        policy = D.AugmentPolicy()
        a = [D.augment(img, policy, rng(21)) for _ in range(3)]
        b = [D.augment(img, policy, rng(21)) for _ in range(3)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestRecords:
    def test_hand_written_records_load_exactly(self, tmp_path):
        # 2 records: label + 3072 pixel bytes, channel-major
        rec0 = bytes([3]) + bytes(range(256)) * 12
        rec1 = bytes([9]) + bytes([255] * 3072)
        path = tmp_path / "two.bin"
        path.write_bytes(rec0 + rec1)
        ds = D.load_records(path)
        assert len(ds) == 2
        np.testing.assert_array_equal(ds.labels, [3, 9])
        expected0 = (np.frombuffer(bytes(range(256)) * 12, dtype=np.uint8)
                     .reshape(3, 32, 32).astype(np.float64) / 255.0)
        np.testing.assert_array_equal(ds.images[0], expected0)
        np.testing.assert_array_equal(ds.images[1], np.ones((3, 32, 32)))

    def test_bad_length_is_format_error(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3072)  # one byte short of a record
        with pytest.raises(FormatError):
            D.load_records(path)

    def test_bad_label_is_format_error(self, tmp_path):
        path = tmp_path / "bad_label.bin"
        path.write_bytes(bytes([255]) + bytes(3072))
        with pytest.raises(FormatError):
            D.load_records(path)

    def test_export_round_trip(self, tmp_path):
        ds = D.synth_generate(10, CLASSES, 32, 32, seed=22)
        path = tmp_path / "synth.bin"
        D.export_records(ds, path)
        back = D.load_records(path)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255.0 + 1e-12

    def test_export_requires_cifar_dims(self, tmp_path):
        ds = D.synth_generate(5, CLASSES, 16, 16, seed=23)
        with pytest.raises(ContractViolation):
            D.export_records(ds, tmp_path / "x.bin")

    def test_cifar_directory_layout(self, tmp_path):
        ds = D.synth_generate(10, CLASSES, 32, 32, seed=24)
        for i in range(1, 6):
            D.export_records(ds.subset(slice(0, 4)), tmp_path / f"data_batch_{i}.bin")
        D.export_records(ds.subset(slice(4, 10)), tmp_path / "test_batch.bin")
        train = D.cifar_load(tmp_path, "train")
        test = D.cifar_load(tmp_path, "test")
        assert len(train) == 20 and len(test) == 6

    def test_split_name_checked(self, tmp_path):
        with pytest.raises(ContractViolation):
            D.cifar_load(tmp_path, "validation")

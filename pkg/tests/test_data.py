import numpy as np
import pytest

from clidmu.data import (LabeledDataset, MetaSet, NoiseSpec, apply_noise, generate_blobs,
                         inject_asymmetric, inject_instance_dependent, inject_symmetric,
                         read_csv, select_meta_set, write_csv)
from clidmu.numerics import make_rng


class TestGenerateBlobs:
    def test_one_sample_per_class(self):
        ds = generate_blobs(0, n_samples=4, dim=3, n_classes=4, class_sep=2.0)
        assert sorted(ds.y_clean.tolist()) == [0, 1, 2, 3]

    def test_zero_separation_coincident_clusters(self):
        ds = generate_blobs(1, n_samples=8000, dim=4, n_classes=4, class_sep=0.0)
        # all class means sit at the origin; 5 sigma of the sample mean
        for k in range(4):
            mean = ds.X[ds.y_clean == k].mean(axis=0)
            bound = 5.0 / np.sqrt((ds.y_clean == k).sum())
            assert np.all(np.abs(mean) < bound)

    def test_deterministic_given_seed(self):
        a = generate_blobs(7, 100, 3, 3, 1.5)
        b = generate_blobs(7, 100, 3, 3, 1.5)
        assert a.X.tobytes() == b.X.tobytes()
        assert a.y_clean.tobytes() == b.y_clean.tobytes()

    def test_balanced_within_one(self):
        ds = generate_blobs(2, n_samples=103, dim=2, n_classes=4, class_sep=1.0)
        counts = np.bincount(ds.y_clean, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_noisy_starts_clean(self):
        ds = generate_blobs(3, 50, 2, 5, 1.0)
        assert np.array_equal(ds.y_clean, ds.y_noisy)

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            generate_blobs(0, 2, 1, 2, 1.0)
        with pytest.raises(ValueError):
            generate_blobs(0, 1, 2, 2, 1.0)

    def test_many_classes_on_circle(self):
        ds = generate_blobs(4, 30, 2, 6, 3.0)
        assert ds.n_classes == 6


class TestSymmetricNoise:
    def test_rate_zero_unchanged(self):
        ds = generate_blobs(0, 100, 2, 4, 1.0)
        out = inject_symmetric(ds, 0.0, make_rng(1))
        assert np.array_equal(out.y_noisy, ds.y_clean)

    def test_rate_one_all_flipped(self):
        ds = generate_blobs(0, 500, 2, 4, 1.0)
        out = inject_symmetric(ds, 1.0, make_rng(2))
        assert np.all(out.y_noisy != out.y_clean)

    def test_flip_fraction_within_binomial_window(self):
        ds = generate_blobs(5, 20000, 2, 10, 1.0)
        out = inject_symmetric(ds, 0.4, make_rng(3))
        frac = float(np.mean(out.y_noisy != out.y_clean))
        assert 0.39 <= frac <= 0.41

    def test_flip_targets_uniform(self):
        import scipy.stats

        ds = generate_blobs(6, 20000, 2, 10, 1.0)
        out = inject_symmetric(ds, 0.4, make_rng(4))
        flipped = out.y_noisy != out.y_clean
        # relative offset of flipped labels is uniform over 1..c-1
        offsets = (out.y_noisy[flipped] - out.y_clean[flipped]) % 10
        counts = np.bincount(offsets, minlength=10)[1:]
        _, p = scipy.stats.chisquare(counts)
        assert p > 0.01

    def test_inputs_untouched(self):
        ds = generate_blobs(7, 200, 3, 4, 1.0)
        X0 = ds.X.copy()
        y0 = ds.y_clean.copy()
        out = inject_symmetric(ds, 0.5, make_rng(5))
        assert np.array_equal(ds.X, X0) and np.array_equal(ds.y_clean, y0)
        assert np.array_equal(out.X, X0) and np.array_equal(out.y_clean, y0)

    def test_single_class_rejected(self):
        ds = generate_blobs(0, 10, 2, 1, 1.0)
        with pytest.raises(ValueError):
            inject_symmetric(ds, 0.5, make_rng(0))


class TestAsymmetricNoise:
    def test_rate_zero(self):
        ds = generate_blobs(8, 100, 2, 4, 1.0)
        out = inject_asymmetric(ds, 0.0, make_rng(0))
        assert np.array_equal(out.y_noisy, out.y_clean)

    def test_wraparound(self):
        ds = LabeledDataset(np.zeros((2, 2)), [3, 0], [3, 0], 4)
        out = inject_asymmetric(ds, 1.0, make_rng(0))
        assert out.y_noisy.tolist() == [0, 1]

    def test_fraction_and_map_audit(self):
        ds = generate_blobs(9, 20000, 2, 4, 1.0)
        out = inject_asymmetric(ds, 0.4, make_rng(1))
        flipped = out.y_noisy != out.y_clean
        frac = float(np.mean(flipped))
        assert 0.39 <= frac <= 0.41
        # every flip follows the circular map
        assert np.all(out.y_noisy[flipped] == (out.y_clean[flipped] + 1) % 4)


class TestInstanceDependentNoise:
    def test_zero_rate_zero_std_unchanged(self):
        ds = generate_blobs(10, 200, 3, 4, 1.0)
        out = inject_instance_dependent(ds, 0.0, make_rng(0), rate_std=0.0)
        assert np.array_equal(out.y_noisy, out.y_clean)

    def test_single_class_rejected(self):
        ds = generate_blobs(0, 10, 2, 1, 1.0)
        with pytest.raises(ValueError):
            inject_instance_dependent(ds, 0.4, make_rng(0))

    def test_rate_matches_truncated_gaussian_mean(self):
        ds = generate_blobs(11, 20000, 4, 6, 1.0)
        out = inject_instance_dependent(ds, 0.4, make_rng(1), rate_std=0.1)
        frac = float(np.mean(out.y_noisy != out.y_clean))
        # Monte-Carlo oracle for the mean of the clipped gaussian rate
        mc = np.clip(make_rng(999).normal(0.4, 0.1, size=1_000_000), 0.0, 1.0).mean()
        assert abs(frac - mc) <= 0.02

    def test_never_flips_to_true_class(self):
        ds = generate_blobs(12, 5000, 3, 5, 1.0)
        out = inject_instance_dependent(ds, 0.9, make_rng(2))
        flipped = out.y_noisy != out.y_clean
        assert flipped.sum() > 0
        # flips land on other classes by construction; clean rows unchanged
        assert np.all(out.y_noisy[~flipped] == out.y_clean[~flipped])

    def test_inputs_untouched(self):
        ds = generate_blobs(13, 300, 3, 4, 1.0)
        X0 = ds.X.copy()
        inject_instance_dependent(ds, 0.5, make_rng(3))
        assert np.array_equal(ds.X, X0)
        assert np.array_equal(ds.y_clean, ds.y_noisy)


class TestApplyNoise:
    def test_dispatch_and_none(self):
        ds = generate_blobs(14, 100, 2, 3, 1.0)
        out = apply_noise(ds, NoiseSpec("none", 0.0, 5))
        assert np.array_equal(out.y_noisy, ds.y_clean)
        out = apply_noise(ds, NoiseSpec("symmetric", 0.5, 5))
        assert not np.array_equal(out.y_noisy, ds.y_clean)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec("bogus", 0.1, 0)
        with pytest.raises(ValueError):
            NoiseSpec("symmetric", 1.5, 0)


class TestSelectMetaSet:
    def test_all_when_size_equals_n(self):
        ds = generate_blobs(15, 40, 2, 4, 1.0)
        ms = select_meta_set(ds, 40, "random_noisy", make_rng(0))
        assert sorted(ms.indices.tolist()) == list(range(40))

    def test_balanced_one_per_class(self):
        ds = generate_blobs(16, 40, 2, 4, 1.0)
        noisy = inject_symmetric(ds, 0.3, make_rng(1))
        ms = select_meta_set(noisy, 4, "class_balanced_noisy", make_rng(2))
        assert sorted(noisy.y_noisy[ms.indices].tolist()) == [0, 1, 2, 3]

    def test_oracle_clean_balances_clean_labels(self):
        ds = generate_blobs(17, 1000, 2, 4, 1.0)
        noisy = inject_symmetric(ds, 0.4, make_rng(3))
        ms = select_meta_set(noisy, 100, "oracle_clean", make_rng(4))
        counts = np.bincount(noisy.y_clean[ms.indices], minlength=4)
        assert np.all(counts == 25)

    def test_pseudo_clean_requires_losses(self):
        ds = generate_blobs(18, 50, 2, 2, 1.0)
        with pytest.raises(ValueError):
            select_meta_set(ds, 10, "pseudo_clean_gmm", make_rng(0))

    def test_pseudo_clean_delegates(self):
        ds = generate_blobs(19, 60, 2, 3, 1.0)
        losses = make_rng(5).uniform(0, 1, 60)
        ms = select_meta_set(ds, 12, "pseudo_clean_gmm", make_rng(6), losses=losses)
        assert ms.size == 12

    def test_unknown_strategy(self):
        ds = generate_blobs(20, 20, 2, 2, 1.0)
        with pytest.raises(ValueError):
            select_meta_set(ds, 5, "bogus", make_rng(0))

    def test_insufficient_class_members(self):
        X = np.zeros((10, 2))
        y = np.array([0] * 9 + [1])
        ds = LabeledDataset(X, y, y.copy(), 2)
        with pytest.raises(ValueError):
            select_meta_set(ds, 10, "class_balanced_noisy", make_rng(0))

    def test_unique_indices_required(self):
        with pytest.raises(ValueError):
            MetaSet(np.array([1, 1, 2]), "random_noisy")


class TestCsvRoundTrip:
    def test_lossless(self, tmp_path):
        ds = generate_blobs(21, 37, 3, 4, 1.7)
        noisy = inject_symmetric(ds, 0.3, make_rng(7))
        path = tmp_path / "data.csv"
        write_csv(noisy, path)
        back = read_csv(path)
        assert back.X.tobytes() == noisy.X.tobytes()
        assert np.array_equal(back.y_clean, noisy.y_clean)
        assert np.array_equal(back.y_noisy, noisy.y_noisy)
        assert back.n_classes == noisy.n_classes

    def test_missing_clean_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,label_noisy\n0.0,1.0,0\n")
        with pytest.raises(ValueError, match="header"):
            read_csv(path)

    def test_hand_fixture(self, tmp_path):
        path = tmp_path / "fix.csv"
        path.write_text("x_0,x_1,label_noisy,label_clean\n"
                        "0.25,-1.5,1,0\n"
                        "3.0,0.125,0,0\n"
                        "-2.0,7.5,1,1\n")
        ds = read_csv(path)
        np.testing.assert_array_equal(ds.X, [[0.25, -1.5], [3.0, 0.125], [-2.0, 7.5]])
        assert ds.y_noisy.tolist() == [1, 0, 1]
        assert ds.y_clean.tolist() == [0, 0, 1]

    def test_row_arity_diagnostics(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,label_noisy,label_clean\n0.0,1.0,0\n")
        with pytest.raises(ValueError, match="line 2"):
            read_csv(path)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x_0,x_1,label_noisy,label_clean\n0.0,abc,0,0\n")
        with pytest.raises(ValueError, match="line 2"):
            read_csv(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uats.data import (
    CLASS_NAMES,
    AugmentConfig,
    GeometricTransform,
    Sample,
    SyntheticSpec,
    add_gaussian_noise,
    augment,
    class_frequencies,
    flip,
    generate_dataset,
    make_split,
    normalize_intensity,
    read_dataset,
    read_grid,
    read_manifest,
    write_dataset,
    write_grid,
)

SIGMAS = (0.01, 0.025, 0.05, 0.1, 0.2)
LABELED = SyntheticSpec(seed=1, labeled_fraction=1.0, test_fraction=0.0)


@pytest.fixture(scope="module")
def hundred():
    return generate_dataset(SyntheticSpec(seed=7, labeled_fraction=1.0, test_fraction=0.0), 100)


def fake_dataset(n_pool, n_test=4, n_unl=5):
    """Tiny samples carrying only ids, enough to exercise the split arithmetic."""
    out = []
    for i in range(n_pool + n_test + n_unl):
        pool = "labeled" if i < n_pool else "test" if i < n_pool + n_test else "unlabeled"
        label = None if pool == "unlabeled" else np.zeros((2, 2), int)
        out.append(Sample(np.zeros((1, 2, 2)), label, f"x{i}", i, pool))
    return out


class TestGeneration:
    def test_deterministic(self):
        a = generate_dataset(SyntheticSpec(seed=3), 6)
        b = generate_dataset(SyntheticSpec(seed=3), 6)
        for x, y in zip(a, b):
            assert x.id == y.id and x.seed == y.seed and x.pool == y.pool
            np.testing.assert_array_equal(x.image, y.image)
            if x.label is not None:
                np.testing.assert_array_equal(x.label, y.label)

    def test_different_seed_differs(self):
        a = generate_dataset(SyntheticSpec(seed=3), 2)
        b = generate_dataset(SyntheticSpec(seed=4), 2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_image_range_and_labels(self, hundred):
        for s in hundred[:10]:
            assert s.image.shape == (1, 64, 64)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert s.label.min() >= 0 and s.label.max() < len(CLASS_NAMES)

    def test_minority_share(self, hundred):
        counts = class_frequencies([s.label for s in hundred])
        fg = counts[1:].sum()
        assert counts[4] / fg < 0.03

    def test_frequency_ordering(self, hundred):
        c = class_frequencies([s.label for s in hundred])
        assert c[0] > c[1] > c[2] > max(c[3], c[4])
        # the two minority classes are of the same order
        assert 0.5 < c[3] / c[4] < 2.0

    def test_all_classes_present(self, hundred):
        present = [len(np.unique(s.label)) == 5 for s in hundred]
        assert np.mean(present) >= 0.95

    def test_pools(self):
        ds = generate_dataset(SyntheticSpec(seed=0), 120)
        pools = [s.pool for s in ds]
        assert pools.count("labeled") == 48
        assert pools.count("test") == 12
        assert pools.count("unlabeled") == 60
        assert all(s.label is None for s in ds if s.pool == "unlabeled")

    def test_needs_a_sample(self):
        with pytest.raises(ValueError):
            generate_dataset(SyntheticSpec(), 0)


class TestNormalize:
    def test_ramp_unchanged_inside_percentiles(self):
        ramp = np.linspace(0, 1, 1001)
        out = normalize_intensity(ramp)
        lo, hi = np.percentile(ramp, [1, 99])
        inner = (ramp > lo) & (ramp < hi)
        np.testing.assert_allclose(out[inner], (ramp[inner] - lo) / (hi - lo))

    def test_outlier_clipped(self):
        img = np.linspace(0, 1, 400)
        img[17] = 1e6
        out = normalize_intensity(img)
        assert out.max() == 1.0
        # without clipping every other pixel would collapse to about zero
        assert np.median(out) > 0.3

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_unit_range(self, seed):
        img = np.random.default_rng(seed).normal(size=(16, 16)) * 50
        out = normalize_intensity(img)
        assert out.min() == 0.0 and out.max() == 1.0

    def test_constant_image(self):
        np.testing.assert_array_equal(normalize_intensity(np.full((4, 4), 3.0)), 0.0)


class TestAugment:
    def test_deterministic(self):
        s = generate_dataset(LABELED, 1)[0]
        a = augment(s.image, s.label, seed=11)
        b = augment(s.image, s.label, seed=11)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_flip_involution(self):
        x = np.random.default_rng(0).random((1, 5, 6))
        for ax in (-1, -2):
            np.testing.assert_array_equal(flip(flip(x, ax), ax), x)

    def test_no_new_classes_and_same_extent(self):
        s = generate_dataset(LABELED, 2)[1]
        for seed in range(10):
            img, lab = augment(s.image, s.label, seed=seed)
            assert img.shape == s.image.shape and lab.shape == s.label.shape
            assert set(np.unique(lab)) <= set(np.unique(s.label))
            assert lab.dtype == s.label.dtype

    def test_identity_transform(self):
        x = np.random.default_rng(1).random((2, 8, 8))
        np.testing.assert_array_equal(GeometricTransform((), 0.0, 1.0).apply(x, order=1), x)

    def test_parameter_ranges(self):
        cfg = AugmentConfig()
        for seed in range(50):
            t = GeometricTransform.sample(seed, cfg)
            assert abs(np.rad2deg(t.angle)) <= 15.0
            assert 0.9 <= t.scale <= 1.1
            assert set(t.flips) <= {-1, -2}

    def test_same_transform_on_image_and_label(self):
        # an image equal to its label must stay equal after nearest-neighbour replay
        lab = np.zeros((16, 16), int)
        lab[4:10, 5:12] = 2
        t = GeometricTransform.sample(5)
        np.testing.assert_array_equal(t.apply(lab.astype(float)[None], order=0)[0], t.apply(lab, order=0))


class TestSplit:
    def test_ten_percent_of_sixty(self):
        split = make_split(fake_dataset(60), 0.10, repeat=0)
        assert (len(split.labeled), len(split.validation)) == (5, 1)
        assert len(split.unlabeled) == 5 + 54

    def test_full_ratio(self):
        split = make_split(fake_dataset(40), 1.0)
        assert len(split.validation) == 10
        assert len(split.labeled) == 30
        assert len(split.unlabeled) == 5

    def test_partition_and_fixed_test(self):
        ds = fake_dataset(40)
        ids = {s.id for s in ds}
        tests = set()
        subsets = set()
        for repeat in range(3):
            sp = make_split(ds, 0.25, repeat=repeat)
            parts = [{s.id for s in p} for p in (sp.labeled, sp.unlabeled, sp.validation, sp.test)]
            assert sum(len(p) for p in parts) == len(ids)
            assert set().union(*parts) == ids
            tests.add(sp.test_hash())
            subsets.add(frozenset(parts[0]))
        assert len(tests) == 1
        assert len(subsets) == 3

    def test_unlabeled_loses_labels(self):
        sp = make_split(fake_dataset(20), 0.5)
        assert all(s.label is None and s.pool == "unlabeled" for s in sp.unlabeled)

    def test_too_small(self):
        with pytest.raises(ValueError, match="minimum 2"):
            make_split(fake_dataset(10), 0.1)

    def test_seeded(self):
        ds = fake_dataset(30)
        a = make_split(ds, 0.5, repeat=1, seed=9)
        b = make_split(ds, 0.5, repeat=1, seed=9)
        assert [s.id for s in a.labeled] == [s.id for s in b.labeled]


class TestNoise:
    def test_paper_snr_mapping(self):
        img = np.full((64, 64), 0.27)
        for sigma, snr in zip(SIGMAS, (26.8, 10.7, 5.4, 2.7, 1.3)):
            _, got = add_gaussian_noise(img, sigma, seed=0)
            assert got == pytest.approx(snr, rel=0.05)

    def test_bounds_and_monotone_snr(self):
        img = generate_dataset(SyntheticSpec(seed=5), 1)[0].image
        snrs = []
        for sigma in SIGMAS:
            out, snr = add_gaussian_noise(img, sigma, seed=1)
            assert out.min() >= 0 and out.max() <= 1
            snrs.append(snr)
        assert all(a > b for a, b in zip(snrs, snrs[1:]))

    def test_small_sigma_limit(self):
        img = normalize_intensity(np.random.default_rng(2).random((16, 16)))
        out, _ = add_gaussian_noise(img, 1e-12, seed=3)
        np.testing.assert_allclose(out, img, atol=1e-9)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            add_gaussian_noise(np.zeros((2, 2)), 0.0)


class TestDiskFormat:
    def test_grid_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).random((1, 5, 7))
        write_grid(tmp_path / "a.img", x, 5)
        back, k = read_grid(tmp_path / "a.img")
        assert k == 5
        np.testing.assert_array_equal(back, x)

    def test_grid_rejects_garbage(self, tmp_path):
        (tmp_path / "b.img").write_bytes(b"hello\n")
        with pytest.raises(ValueError, match="not a grid"):
            read_grid(tmp_path / "b.img")

    def test_grid_rejects_truncation(self, tmp_path):
        write_grid(tmp_path / "c.img", np.zeros((3, 3)), 0)
        data = (tmp_path / "c.img").read_bytes()
        (tmp_path / "c.img").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="expected 9"):
            read_grid(tmp_path / "c.img")

    def test_dataset_roundtrip(self, tmp_path):
        spec = SyntheticSpec(seed=1)
        ds = generate_dataset(spec, 10)
        write_dataset(tmp_path / "d", ds, spec)
        back = read_dataset(tmp_path / "d")
        assert [(s.id, s.pool, s.seed) for s in back] == [(s.id, s.pool, s.seed) for s in ds]
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.image, b.image)
            assert (a.label is None) == (b.label is None)
            if a.label is not None:
                np.testing.assert_array_equal(a.label, b.label)
        rows = read_manifest(tmp_path / "d")
        assert rows[0].keys() == {"id", "pool", "seed", "has_label"}
        assert "# spec" in (tmp_path / "d" / "manifest.tsv").read_text()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

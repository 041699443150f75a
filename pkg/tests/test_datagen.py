import hashlib
from pathlib import Path

import numpy as np
import pytest

from aadistill import datagen
from aadistill.datagen import (DatasetManifest, apply_age, build_dataset,
                               default_manifests, generate_identity,
                               generate_split, load_split, render_sample)
from aadistill.errors import ConfigError

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_identity_seed0.sha256"


class TestGenerateIdentity:
    def test_same_seed_is_identical(self):
        assert np.array_equal(generate_identity(11), generate_identity(11))

    def test_range_and_dtype(self):
        g = generate_identity(3)
        assert g.dtype == np.float32 and g.shape == (32, 32)
        assert g.min() >= 0.0 and g.max() <= 0.88

    def test_distinct_seeds_average_cosine_below_099(self):
        glyphs = [generate_identity(s).ravel() for s in range(40)]
        sims = []
        for i in range(len(glyphs)):
            for j in range(i + 1, len(glyphs)):
                a, b = glyphs[i], glyphs[j]
                sims.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        assert np.mean(sims) < 0.99

    def test_hundred_identities_nearest_neighbor_distinguishable(self):
        # brute-force NN oracle over two aged samples per identity
        images, ids = [], []
        for ident in range(100):
            for k, age in enumerate((0.2, 0.5)):
                img, _ = render_sample(99, ident, k, age)
                images.append(img.ravel())
                ids.append(ident)
        x = np.stack(images)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        sims = x @ x.T
        np.fill_diagonal(sims, -np.inf)
        nn = sims.argmax(axis=1)
        ids = np.array(ids)
        matched = sum(1 for i in range(100)
                      if ids[nn[2 * i]] == i and ids[nn[2 * i + 1]] == i)
        assert matched >= 95

    def test_seed_zero_matches_golden_checksum(self):
        digest = hashlib.sha256(generate_identity(0).tobytes()).hexdigest()
        if not GOLDEN_PATH.exists():
            GOLDEN_PATH.parent.mkdir(parents=True, exist_ok=True)
            GOLDEN_PATH.write_text(digest + "\n")
        assert digest == GOLDEN_PATH.read_text().strip()


class TestApplyAge:
    def test_age_zero_returns_base_and_empty_mask(self):
        g = generate_identity(5)
        img, mask = apply_age(g, 0.0)
        assert np.array_equal(img, g)
        assert mask.sum() == 0

    def test_mask_nonzero_for_any_positive_age(self):
        g = generate_identity(5)
        for age in (1e-6, 0.01, 0.4, 1.0):
            _, mask = apply_age(g, age)
            assert mask.sum() > 0

    def test_mask_support_is_nested_in_age(self):
        g = generate_identity(8)
        _, m_half = apply_age(g, 0.5)
        _, m_full = apply_age(g, 1.0)
        assert np.all(m_half <= m_full)

    def test_mean_deformation_strictly_increasing(self):
        for seed in (0, 7, 19):
            g = generate_identity(seed)
            means = [np.abs(apply_age(g, a)[0].astype(np.float64) - g).mean()
                     for a in (0.0, 0.25, 0.5, 0.75, 1.0)]
            assert all(b > a for a, b in zip(means, means[1:]))

    def test_age_outside_unit_interval_rejected(self):
        g = generate_identity(1)
        with pytest.raises(ValueError):
            apply_age(g, -0.1)
        with pytest.raises(ValueError):
            apply_age(g, 1.5)

    def test_image_stays_in_unit_range(self):
        g = generate_identity(2)
        img, _ = apply_age(g, 1.0)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestRenderSample:
    def test_deterministic_per_triple(self):
        a1, m1 = render_sample(4, 17, 3, 0.7)
        a2, m2 = render_sample(4, 17, 3, 0.7)
        assert np.array_equal(a1, a2) and np.array_equal(m1, m2)

    def test_noise_seed_varies_sample(self):
        a1, _ = render_sample(4, 17, 3, 0.7)
        a2, _ = render_sample(4, 17, 4, 0.7)
        assert not np.array_equal(a1, a2)

    def test_identity_age_factorization_outside_masks(self):
        base = generate_identity(datagen._glyph_seed(4, 9))
        i1, m1 = render_sample(4, 9, 0, 0.2)
        i2, m2 = render_sample(4, 9, 1, 0.9)
        outside = (m1 | m2) == 0
        assert np.array_equal(i1[outside], base[outside])
        assert np.array_equal(i2[outside], base[outside])


class TestDatasetArchive:
    def manifests(self, seed=13):
        return [
            DatasetManifest("recognition_train", 0, 6, 4, 0.0, 1.0, seed),
            DatasetManifest("age_train", 6, 4, 4, 0.0, 1.0, seed),
            DatasetManifest("eval", 10, 3, 4, 0.0, 1.0, seed),
        ]

    def test_sample_counts(self):
        split = generate_split(DatasetManifest("eval", 0, 5, 7, 0.0, 1.0, 1))
        assert split.images.shape == (35, 1, 32, 32)
        assert split.identities.shape == (35,)

    def test_archive_roundtrip_is_bitwise(self, tmp_path):
        splits = build_dataset(self.manifests(), tmp_path)
        for name, split in splits.items():
            loaded = load_split(tmp_path, name)
            assert np.array_equal(loaded.images, split.images)
            assert np.array_equal(loaded.identities, split.identities)
            assert np.array_equal(loaded.ages, split.ages)
            assert np.array_equal(loaded.masks, split.masks)
            assert loaded.manifest == split.manifest

    def test_identity_overlap_rejected(self, tmp_path):
        bad = [
            DatasetManifest("recognition_train", 0, 6, 4, 0.0, 1.0, 1),
            DatasetManifest("age_train", 5, 4, 4, 0.0, 1.0, 1),  # id 5 overlaps
        ]
        with pytest.raises(ConfigError):
            build_dataset(bad, tmp_path)

    def test_mixed_seed_rejected(self, tmp_path):
        bad = [
            DatasetManifest("recognition_train", 0, 6, 4, 0.0, 1.0, 1),
            DatasetManifest("age_train", 6, 4, 4, 0.0, 1.0, 2),
        ]
        with pytest.raises(ConfigError):
            build_dataset(bad, tmp_path)

    def test_generation_deterministic_per_seed(self):
        m = DatasetManifest("eval", 0, 3, 5, 0.0, 1.0, 77)
        a = generate_split(m)
        b = generate_split(m)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.ages, b.ages)

    def test_default_manifests_are_disjoint(self):
        ms = default_manifests(0, 10, 5, 4, 2)
        sets = [set(m.identity_ids) for m in ms]
        assert sets[0] & sets[1] == set()
        assert (sets[0] | sets[1]) & sets[2] == set()

    def test_manifest_validation(self):
        with pytest.raises(ConfigError):
            DatasetManifest("nope", 0, 3, 5, 0.0, 1.0, 1)
        with pytest.raises(ConfigError):
            DatasetManifest("eval", 0, 0, 5, 0.0, 1.0, 1)
        with pytest.raises(ConfigError):
            DatasetManifest("eval", 0, 3, 5, 0.5, 0.2, 1)


def test_age_learnable_by_small_regressor():
    """Ridge regression on simple image statistics reaches MAE < 0.15."""
    split = generate_split(DatasetManifest("age_train", 0, 25, 16, 0.0, 1.0, 5))

    def features(images):
        x = images[:, 0].astype(np.float64)
        mean_pool = x.reshape(len(x), 16, 2, 16, 2).mean(axis=(2, 4))
        up = np.repeat(np.repeat(mean_pool, 2, axis=1), 2, axis=2)
        highfreq = np.abs(x - up).mean(axis=(1, 2))
        return np.stack([
            x.mean(axis=(1, 2)),
            x.std(axis=(1, 2)),
            (x > 0.85).mean(axis=(1, 2)),
            highfreq,
            np.abs(np.diff(x, axis=2)).mean(axis=(1, 2)),
            np.ones(len(x)),
        ], axis=1)

    n = len(split.images)
    order = np.random.default_rng(0).permutation(n)
    train, test = order[: int(0.8 * n)], order[int(0.8 * n):]
    f = features(split.images)
    y = split.ages.astype(np.float64)
    a, t = f[train], y[train]
    w = np.linalg.solve(a.T @ a + 1e-6 * np.eye(a.shape[1]), a.T @ t)
    pred = f[test] @ w
    mae = np.abs(pred - y[test]).mean()
    assert mae < 0.15, f"ridge age MAE {mae:.3f}"

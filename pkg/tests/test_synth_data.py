import numpy as np
import pytest

from retouchlab.data import (GenConfig, Sample, degrade, generate, load_dataset,
                             load_image, load_mask, restore, save_dataset,
                             save_image, save_mask, split)
from retouchlab.errors import ConfigError, InvalidInputError


CFG = GenConfig(count=8, height=32, width=32, seed=5)


@pytest.fixture(scope="module")
def samples():
    return generate(CFG)


class TestGeneration:
    def test_deterministic_bit_identical(self, samples):
        again = generate(GenConfig(count=8, height=32, width=32, seed=5))
        for a, b in zip(samples, again):
            assert a.input.tobytes() == b.input.tobytes()
            assert a.gt.tobytes() == b.gt.tobytes()
            assert a.region_mask.tobytes() == b.region_mask.tobytes()

    def test_different_seed_differs(self, samples):
        other = generate(GenConfig(count=8, height=32, width=32, seed=6))
        assert any(a.input.tobytes() != b.input.tobytes()
                   for a, b in zip(samples, other))

    def test_instances_pairwise_disjoint(self, samples):
        for s in samples:
            for i in range(len(s.instances)):
                for j in range(i + 1, len(s.instances)):
                    assert (s.instances[i] * s.instances[j]).sum() == 0

    def test_region_is_union_of_instances(self, samples):
        for s in samples:
            union = np.clip(sum(s.instances), 0, 1)
            np.testing.assert_array_equal(s.region_mask, union)

    def test_inside_change_exceeds_outside(self, samples):
        for s in samples:
            diff = np.abs(s.gt - s.input).mean(axis=0)
            inside = s.region_mask[0] > 0.5
            assert diff[inside].mean() > diff[~inside].mean()

    def test_ranges_and_shapes(self, samples):
        for s in samples:
            assert s.input.shape == (3, 32, 32) and s.gt.shape == (3, 32, 32)
            assert 0 <= s.input.min() and s.input.max() <= 1
            assert 0 <= s.gt.min() and s.gt.max() <= 1
            assert set(np.unique(s.region_mask)) <= {0.0, 1.0}
            assert 1 <= len(s.instances) <= 4

    def test_restore_inverts_degrade(self, rng):
        clean = rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(restore(degrade(clean)), clean, atol=1e-6)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            GenConfig(count=0).validate()
        with pytest.raises(ConfigError):
            GenConfig(height=30).validate()
        with pytest.raises(ConfigError):
            GenConfig(min_instances=2, max_instances=5).validate()


class TestSplit:
    def test_sizes(self, samples):
        train, test = split(samples, 0.75, seed=1)
        assert len(train) == 6 and len(test) == 2

    def test_disjoint_and_complete(self, samples):
        train, test = split(samples, 0.5, seed=2)
        ids = sorted(s.id for s in train) + sorted(s.id for s in test)
        assert sorted(ids) == sorted(s.id for s in samples)

    def test_same_seed_same_split(self, samples):
        a = split(samples, 0.75, seed=3)
        b = split(samples, 0.75, seed=3)
        assert [s.id for s in a[0]] == [s.id for s in b[0]]

    def test_hundred_eighty_twenty(self):
        samples = [Sample(id=str(i), input=np.zeros((3, 16, 16)),
                          gt=np.zeros((3, 16, 16)),
                          region_mask=np.zeros((1, 16, 16))) for i in range(100)]
        train, test = split(samples, 0.8, seed=0)
        assert len(train) == 80 and len(test) == 20

    def test_bad_fraction(self, samples):
        with pytest.raises(ConfigError):
            split(samples, 1.0, seed=0)


class TestIo:
    def test_image_round_trip_pixel_exact(self, tmp_path, rng):
        img = np.round(rng.uniform(0, 1, size=(3, 16, 16)) * 255) / 255
        save_image(tmp_path / "x.png", img.astype(np.float32))
        back = load_image(tmp_path / "x.png")
        np.testing.assert_allclose(back, img, atol=1e-7)

    def test_mask_round_trip_exact(self, tmp_path):
        mask = (np.arange(64).reshape(1, 8, 8) % 3 == 0).astype(np.float32)
        save_mask(tmp_path / "m.png", mask)
        back = load_mask(tmp_path / "m.png")
        np.testing.assert_array_equal(back, mask)

    def test_rgb_file_as_mask_rejected(self, tmp_path, rng):
        save_image(tmp_path / "rgb.png", rng.uniform(0, 1, size=(3, 8, 8)))
        with pytest.raises(InvalidInputError):
            load_mask(tmp_path / "rgb.png")

    def test_corrupt_file_rejected(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"this is not a png")
        with pytest.raises(InvalidInputError):
            load_image(tmp_path / "bad.png")

    def test_dataset_round_trip(self, tmp_path, samples):
        train, test = split(samples, 0.75, seed=1)
        manifest = save_dataset(tmp_path, CFG, train, test)
        assert manifest.exists()
        loaded = load_dataset(tmp_path, "train")
        assert len(loaded) == len(train)
        by_id = {s.id: s for s in train}
        for s in loaded:
            ref = by_id[s.id]
            np.testing.assert_allclose(s.input, ref.input, atol=1e-7)
            np.testing.assert_allclose(s.gt, ref.gt, atol=1e-7)
            np.testing.assert_array_equal(s.region_mask, ref.region_mask)
            assert len(s.instances) == len(ref.instances)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_dataset(tmp_path, "train")

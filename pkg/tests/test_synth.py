import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confwise.synth import (
    BASE_INTENSITY,
    CORTEX,
    NUCLEUS,
    RING,
    Sample,
    SplitMix64,
    SynthConfig,
    derive_seed,
    gaussian_blur,
    gaussian_kernel,
    generate,
    random_flip,
    write_dataset,
)
from confwise.tensor_io import read_tensor


def splitmix64_reference(seed, n):
    """Textbook sequential SplitMix64 on Python integers."""
    mask = (1 << 64) - 1
    state, out = seed, []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


class TestRng:
    @pytest.mark.parametrize("seed", [0, 1, 42, 2**64 - 1])
    def test_matches_reference(self, seed):
        assert SplitMix64(seed).next_u64(20).tolist() == splitmix64_reference(seed, 20)

    def test_known_value(self):
        assert int(SplitMix64(1).next_u64(1)[0]) == 0x910A2DEC89025CC1

    def test_chunking_invariance(self):
        a = SplitMix64(9)
        chunks = np.concatenate([a.next_u64(3), a.next_u64(1), a.next_u64(6)])
        np.testing.assert_array_equal(chunks, SplitMix64(9).next_u64(10))

    def test_uniform_range_and_moments(self):
        u = SplitMix64(3).uniform(100_000)
        assert u.min() >= 0 and u.max() < 1
        assert abs(u.mean() - 0.5) < 0.01
        z = SplitMix64(4).normal(100_000)
        assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02

    def test_split_is_deterministic_and_distinct(self):
        assert derive_seed(5, 1) == derive_seed(5, 1)
        assert len({derive_seed(5, k) for k in range(100)}) == 100
        assert SplitMix64(5).split(2).next_u64(1)[0] == SplitMix64(derive_seed(5, 2)).next_u64(1)[0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 50))
    def test_permutation(self, seed, n):
        assert sorted(SplitMix64(seed).permutation(n).tolist()) == list(range(n))


class TestBlur:
    def test_kernel(self):
        k = gaussian_kernel(1.5)
        assert k.size == 2 * 5 + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(k, k[::-1])

    def test_constant_preserved(self):
        img = np.full((10, 12), 0.3)
        np.testing.assert_allclose(gaussian_blur(img, 1.5), 0.3, rtol=1e-14)

    def test_reflect_oracle(self):
        r = np.random.default_rng(0)
        img = r.random((9, 8))
        k = gaussian_kernel(1.0)
        R = k.size // 2

        def refl(i, n):
            while i < 0 or i >= n:
                i = -i if i < 0 else 2 * (n - 1) - i
            return i

        tmp = np.zeros_like(img)
        for i in range(9):
            for j in range(8):
                tmp[i, j] = sum(k[d + R] * img[refl(i + d, 9), j] for d in range(-R, R + 1))
        ref = np.zeros_like(img)
        for i in range(9):
            for j in range(8):
                ref[i, j] = sum(k[d + R] * tmp[i, refl(j + d, 8)] for d in range(-R, R + 1))
        np.testing.assert_allclose(gaussian_blur(img, 1.0), ref, rtol=1e-13)


class TestGenerate:
    def test_determinism(self):
        a, b = generate(SynthConfig(seed=3), 4), generate(SynthConfig(seed=3), 4)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.labels.tobytes() == y.labels.tobytes()
        c = generate(SynthConfig(seed=4), 1)[0]
        assert c.image.tobytes() != a[0].image.tobytes()

    def test_prefix_stable(self):
        a, b = generate(SynthConfig(seed=3), 2), generate(SynthConfig(seed=3), 5)
        assert a[1].image.tobytes() == b[1].image.tobytes()

    def test_types(self):
        s = generate(SynthConfig(height=40, width=48), 1)[0]
        assert s.image.shape == (1, 40, 48) and s.image.dtype == np.float32
        assert s.labels.shape == (40, 48) and s.labels.dtype == np.uint8
        assert 0 <= s.image.min() and s.image.max() <= 1

    def test_piecewise_constant_without_noise(self):
        cfg = SynthConfig(noise_sigma=0, boundary_blur_sigma=0, artifact_prob=0, seed=1)
        for s in generate(cfg, 3):
            np.testing.assert_array_equal(s.image[0], BASE_INTENSITY[s.labels].astype(np.float32))

    def test_stripe(self):
        cfg = SynthConfig(noise_sigma=0, boundary_blur_sigma=0, artifact_prob=1.0, seed=2)
        s = generate(cfg, 1)[0]
        cols = np.flatnonzero((s.image[0] == np.float32(0.9)).all(axis=0))
        assert cols.size == 3 and cols[2] - cols[0] == 2
        # the stripe never touches the labels
        clean = generate(dataclasses.replace(cfg, artifact_prob=0.0), 1)[0]
        np.testing.assert_array_equal(clean.labels, s.labels)

    def test_default_ring_fraction(self):
        for s in generate(SynthConfig(), 1000):
            counts = np.bincount(s.labels.ravel(), minlength=4)
            assert counts[RING] < 0.05 * s.labels.size
            assert (counts > 0).all()
            assert counts[RING] < counts[CORTEX] and counts[RING] < counts[NUCLEUS]

    @pytest.mark.parametrize("H,W,t", [(32, 32, 1), (32, 32, 2), (48, 80, 2), (96, 96, 3)])
    def test_invariants_other_sizes(self, H, W, t):
        for s in generate(SynthConfig(height=H, width=W, ring_thickness=t, seed=5), 30):
            counts = np.bincount(s.labels.ravel(), minlength=4)
            assert (counts > 0).all()
            assert counts[RING] == counts[1:].min()

    def test_nesting(self):
        for s in generate(SynthConfig(seed=8), 50):
            lab = s.labels
            # row-wise hull: each inner class lies between the extreme columns of the class around it
            for inner, outer in ((NUCLEUS, (CORTEX, NUCLEUS)), (CORTEX, (RING, CORTEX, NUCLEUS))):
                for row in range(lab.shape[0]):
                    cols = np.flatnonzero(lab[row] == inner)
                    if cols.size == 0:
                        continue
                    around = np.flatnonzero(np.isin(lab[row], [c for c in outer if c != inner]))
                    assert around.size and around.min() < cols.min() and cols.max() < around.max()

    def test_errors(self):
        with pytest.raises(ValueError):
            SynthConfig(height=31)
        with pytest.raises(ValueError):
            SynthConfig(ring_thickness=0)
        with pytest.raises(ValueError):
            SynthConfig(num_classes=3)
        with pytest.raises(ValueError):
            generate(SynthConfig(), 0)
        with pytest.raises(ValueError, match="cannot fit"):
            generate(SynthConfig(height=32, width=32, ring_thickness=6), 1)


class TestFlip:
    def sample(self):
        return generate(SynthConfig(seed=1), 1)[0]

    def test_forced(self):
        s = self.sample()
        f = random_flip(s, force=True)
        np.testing.assert_array_equal(f.labels, s.labels[:, ::-1])
        np.testing.assert_array_equal(f.image, s.image[:, :, ::-1])
        twice = random_flip(f, force=True)
        assert twice.image.tobytes() == s.image.tobytes()
        assert random_flip(s, force=False) is s

    def test_counts_preserved_and_rate(self):
        s = self.sample()
        rng = SplitMix64(0)
        flips = 0
        for _ in range(400):
            f = random_flip(s, rng)
            np.testing.assert_array_equal(np.bincount(f.labels.ravel()), np.bincount(s.labels.ravel()))
            flips += f is not s
        assert 150 < flips < 250


class TestWriteDataset:
    def test_layout_and_bytes(self, tmp_path):
        cfg = SynthConfig(seed=7)
        samples = write_dataset(tmp_path / "a", cfg, 3)
        write_dataset(tmp_path / "b", cfg, 3)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["dataset.ini", "img_00000.segt", "img_00001.segt", "img_00002.segt",
                         "lbl_00000.segt", "lbl_00001.segt", "lbl_00002.segt", "manifest.csv"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        rows = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
        assert rows[0] == "index,image,label,seed" and len(rows) == 4
        assert rows[1].split(",")[3] == str(derive_seed(7, 0))
        np.testing.assert_array_equal(read_tensor(tmp_path / "a" / "lbl_00002.segt"), samples[2].labels)

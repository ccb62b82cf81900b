import numpy as np
import pytest
import torch
from scipy import ndimage

from biskip.data import (
    ImagePair,
    MotionKernel,
    PairingError,
    from_model_range,
    generate_motion_kernel,
    load_paired_dataset,
    random_crop_pair,
    save_image,
    synth_blur,
    to_model_range,
    write_synth_dataset,
)


def make_pair_dirs(root, names, skip_sharp=()):
    (root / "blur").mkdir(parents=True)
    (root / "sharp").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name in names:
        img = to_model_range(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
        save_image(root / "blur" / name, img)
        if name not in skip_sharp:
            save_image(root / "sharp" / name, img)


class TestRangeConversion:
    def test_roundtrip_uint8(self):
        arr = np.arange(256, dtype=np.uint8).reshape(16, 16)[:, :, None].repeat(3, axis=2)
        assert np.array_equal(from_model_range(to_model_range(arr)), arr)

    def test_range_bounds(self):
        arr = np.array([[[0, 127, 255]]], dtype=np.uint8)
        t = to_model_range(arr)
        assert float(t.min()) == -1.0
        assert float(t.max()) == 1.0


class TestLoadPairedDataset:
    def test_matched_pairs_sorted(self, tmp_path):
        make_pair_dirs(tmp_path, ["c.png", "a.png", "b.png", "d.png"])
        pairs = load_paired_dataset(tmp_path)
        assert [p.id for p in pairs] == ["a.png", "b.png", "c.png", "d.png"]

    def test_missing_counterpart_named(self, tmp_path):
        make_pair_dirs(tmp_path, ["a.png", "b.png"], skip_sharp=["a.png"])
        with pytest.raises(PairingError, match="a.png"):
            load_paired_dataset(tmp_path)

    def test_empty_root(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert load_paired_dataset(tmp_path / "empty") == []

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_paired_dataset(tmp_path / "nope")

    def test_pair_dim_mismatch(self):
        with pytest.raises(ValueError):
            ImagePair(sharp=torch.zeros(3, 8, 8), blurred=torch.zeros(3, 16, 16), id="x")


class TestMotionKernel:
    def test_single_step_is_delta(self):
        k = generate_motion_kernel(seed=0, size=7, steps=1)
        expected = np.zeros((7, 7))
        expected[3, 3] = 1.0
        assert np.allclose(k.taps, expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_normalized_and_nonnegative(self, seed):
        k = generate_motion_kernel(seed=seed, size=15, steps=20)
        assert (k.taps >= 0).all()
        assert k.taps.sum() == pytest.approx(1.0, abs=1e-6)

    def test_golden_kernel(self):
        k = generate_motion_kernel(seed=7, size=15, steps=20)
        assert float(k.taps.max()) == pytest.approx(GOLDEN_KERNEL_MAX, rel=1e-9)
        assert float((k.taps * np.arange(15)).sum()) == pytest.approx(
            GOLDEN_KERNEL_COL_MEAN, rel=1e-9)
        assert int(np.count_nonzero(k.taps)) == GOLDEN_KERNEL_NNZ

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            generate_motion_kernel(seed=0, size=8, steps=5)

    def test_serialization_roundtrip(self, tmp_path):
        k = generate_motion_kernel(seed=3, size=9, steps=10)
        path = tmp_path / "k.txt"
        k.save_txt(path)
        loaded = MotionKernel.load_txt(path)
        assert loaded.taps.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.allclose(loaded.taps, k.taps)

    def test_invalid_taps_rejected(self):
        with pytest.raises(ValueError):
            MotionKernel(np.full((3, 3), 0.5))
        with pytest.raises(ValueError):
            MotionKernel(np.ones((4, 4)) / 16.0)


class TestSynthBlur:
    def test_delta_is_identity(self, rand_image):
        x = rand_image(32)
        assert torch.equal(synth_blur(x, MotionKernel.delta(3)), x)

    def test_uniform_kernel_on_constant(self):
        x = torch.full((3, 16, 16), 0.25)
        k = MotionKernel(np.ones((3, 3)) / 9.0)
        assert torch.allclose(synth_blur(x, k), x, atol=1e-6)

    def test_matches_direct_convolution(self):
        # gradient test image, independent scipy.ndimage oracle
        grad = np.linspace(-1, 1, 32, dtype=np.float32)
        x = torch.from_numpy(np.stack([
            np.tile(grad, (32, 1)),
            np.tile(grad[:, None], (1, 32)),
            np.outer(grad, grad).astype(np.float32),
        ]))
        k = generate_motion_kernel(seed=5, size=7, steps=10)
        out = synth_blur(x, k)
        for c in range(3):
            ref = ndimage.convolve(x[c].numpy().astype(np.float64), k.taps,
                                   mode="mirror")
            assert np.allclose(out[c].numpy(), np.clip(ref, -1, 1), atol=1e-6)

    def test_golden_checksum(self):
        grad = np.linspace(-1, 1, 32, dtype=np.float32)
        x = torch.from_numpy(np.tile(grad, (32, 1))).expand(3, 32, 32).contiguous()
        k = generate_motion_kernel(seed=5, size=7, steps=10)
        out = synth_blur(x, k)
        assert float(out.double().abs().sum()) == pytest.approx(GOLDEN_BLUR_ABS_SUM,
                                                                rel=1e-5)

    def test_kernel_larger_than_image(self, rand_image):
        with pytest.raises(ValueError):
            synth_blur(rand_image(8), MotionKernel.delta(15))


class TestRandomCropPair:
    def test_exact_size_crop(self, rand_image):
        pair = ImagePair(rand_image(64), rand_image(64), "x.png")
        cropped = random_crop_pair(pair, crop=64, seed=0)
        assert torch.equal(cropped.sharp, pair.sharp)
        assert torch.equal(cropped.blurred, pair.blurred)

    def test_off_by_one_offsets(self, rand_image):
        sharp = torch.zeros(3, 65, 65)
        blurred = torch.zeros(3, 65, 65)
        pair = ImagePair(sharp, blurred, "y.png")
        cropped = random_crop_pair(pair, crop=64, seed=1)
        assert cropped.sharp.shape == (3, 64, 64)

    def test_window_identity_via_markers(self):
        # plant the same marker grid in both images; crops must align
        sharp = torch.zeros(3, 80, 80)
        blurred = torch.zeros(3, 80, 80)
        marks = torch.arange(80 * 80, dtype=torch.float32).reshape(80, 80)
        sharp[0] = marks
        blurred[1] = marks
        pair = ImagePair(sharp, blurred, "z.png")
        for seed in range(5):
            c = random_crop_pair(pair, crop=32, seed=seed)
            assert torch.equal(c.sharp[0], c.blurred[1])

    def test_deterministic_per_seed_and_id(self, rand_image):
        pair = ImagePair(rand_image(96), rand_image(96), "w.png")
        a = random_crop_pair(pair, crop=32, seed=9)
        b = random_crop_pair(pair, crop=32, seed=9)
        assert torch.equal(a.sharp, b.sharp)

    def test_too_small_rejected(self, rand_image):
        pair = ImagePair(rand_image(16), rand_image(16), "s.png")
        with pytest.raises(ValueError):
            random_crop_pair(pair, crop=256, seed=0)


class TestSynthDataset:
    def test_layout_and_reload(self, tmp_path):
        ids = write_synth_dataset(tmp_path, n=3, size=64, seed=2,
                                  kernel_size=7, kernel_steps=6)
        assert len(ids) == 3
        pairs = load_paired_dataset(tmp_path)
        assert [p.id for p in pairs] == sorted(ids)
        for p in pairs:
            assert p.sharp.shape == (3, 64, 64)
            assert float(p.sharp.min()) >= -1.0
            assert float(p.blurred.max()) <= 1.0
        for i in range(3):
            k = MotionKernel.load_txt(tmp_path / "kernels" / f"{i:04d}.txt")
            assert k.taps.sum() == pytest.approx(1.0, abs=1e-6)


# frozen from the first scripted run of generate_motion_kernel(7, 15, 20)
GOLDEN_KERNEL_MAX = 0.26412106477235753
GOLDEN_KERNEL_COL_MEAN = 1.6684683368950464
GOLDEN_KERNEL_NNZ = 20

# frozen from the scipy.ndimage oracle on the tiled-gradient image
GOLDEN_BLUR_ABS_SUM = 1580.2909228804965

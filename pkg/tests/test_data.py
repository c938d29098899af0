import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image
from scipy import stats

from mbmamba.data import (BlurSpec, augment_flip, blur_kernel, generate_dataset, load_image,
                          load_manifest, make_blur_pair, random_blur_spec, sample_patch, save_image)
from mbmamba.errors import ConfigError
from mbmamba.metrics import psnr


# ---------------------------------------------------------------- blur

def test_identity_kernel_leaves_image_unchanged(rng):
    img = rng.random((3, 12, 9))
    _, blurred = make_blur_pair(img, BlurSpec(kernel_size=1))
    assert np.array_equal(blurred, img)


@pytest.mark.parametrize("spec", [BlurSpec("gaussian", 9, sigma=2.0),
                                  BlurSpec("linear_motion", 11, length=9.0, angle=30.0)])
def test_constant_image_is_fixed_point(spec):
    img = np.full((3, 16, 16), 0.42)
    _, blurred = make_blur_pair(img, spec)
    np.testing.assert_allclose(blurred, img, rtol=0, atol=1e-12)


def test_gaussian_on_delta_matches_closed_form():
    img = np.zeros((3, 21, 21))
    img[:, 10, 10] = 1.0
    _, blurred = make_blur_pair(img, BlurSpec("gaussian", 9, sigma=2.0))
    g = [math.exp(-r * r / 8.0) for r in range(-4, 5)]
    z = sum(g) ** 2
    want = [g[4] * gi / z for gi in g]
    np.testing.assert_allclose(blurred[0, 10, 6:15], want, rtol=1e-12)
    assert blurred[0, 10, 5] == 0.0


@given(st.integers(0, 2**31 - 1))
def test_random_kernels_sum_to_one_and_are_odd(seed):
    spec = random_blur_spec(np.random.default_rng(seed))
    k = blur_kernel(spec)
    assert abs(k.sum() - 1.0) < 1e-9
    assert k.shape[0] % 2 == 1 and (k >= 0).all()


def test_even_kernel_size_is_config_error():
    with pytest.raises(ConfigError):
        BlurSpec(kernel_size=8)
    with pytest.raises(ConfigError):
        BlurSpec(kernel_kind="disk")


def test_noise_is_seeded_and_clipped(rng):
    img = rng.random((3, 16, 16))
    spec = BlurSpec(kernel_size=1, noise_std=0.5, seed=7)
    a, b = make_blur_pair(img, spec)[1], make_blur_pair(img, spec)[1]
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0 and not np.array_equal(a, img)


def test_blurred_psnr_is_finite(tmp_path):
    m = generate_dataset(tmp_path, n_train=4, n_val=0, size=32, seed=3)
    for sharp, blurred in m.load_pairs("train"):
        assert math.isfinite(psnr(blurred, sharp))


# ---------------------------------------------------------------- patches and flips

def test_full_size_patch_is_identity(rng):
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    pa, pb = sample_patch((a, b), 8, rng)
    assert np.array_equal(pa, a) and np.array_equal(pb, b)


def test_patch_crops_are_aligned(rng):
    a = rng.random((3, 20, 24))
    b = a + 1.0
    for _ in range(50):
        pa, pb = sample_patch((a, b), 8, rng)
        assert np.array_equal(pb, pa + 1.0)


def test_patch_undersized_image_is_error(rng):
    with pytest.raises(ConfigError):
        sample_patch((np.zeros((3, 8, 8)), np.zeros((3, 8, 8))), 9, rng)


def test_patch_offsets_are_uniform():
    # a 7x7 image with 4x4 patches admits a 4x4 grid of offsets
    h = 7
    idx = np.arange(h * h, dtype=float).reshape(1, h, h)
    rng = np.random.default_rng(99)
    counts = np.zeros(16)
    for _ in range(10_000):
        p, _ = sample_patch((idx, idx), 4, rng)
        y, x = divmod(int(p[0, 0, 0]), h)
        counts[4 * y + x] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_double_flip_is_identity(rng):
    a, b = rng.random((3, 5, 6)), rng.random((3, 5, 6))
    fa, fb = a[..., ::-1], b[..., ::-1]
    assert np.array_equal(fa[..., ::-1], a) and np.array_equal(fb[..., ::-1], b)
    seed_rng = np.random.default_rng(0)
    for _ in range(20):
        state = seed_rng.bit_generator.state
        x, y = augment_flip((a, b), seed_rng)
        seed_rng.bit_generator.state = state
        x2, y2 = augment_flip((x, y), seed_rng)
        assert np.array_equal(x2, a) and np.array_equal(y2, b)


def test_flips_are_joint(rng):
    a = np.zeros((3, 4, 4))
    a[:, 0, 0] = 1.0
    b = 2 * a
    for _ in range(30):
        x, y = augment_flip((a, b), rng)
        assert np.array_equal(np.argwhere(x[0]), np.argwhere(y[0]))


def test_flip_probability_is_half():
    a = np.zeros((1, 2, 2))
    a[0, 0, 0] = 1.0
    rng = np.random.default_rng(5)
    n = 10_000
    hflips = vflips = 0
    for _ in range(n):
        x, _ = augment_flip((a, a), rng)
        r, c = np.argwhere(x[0])[0]
        hflips += int(c == 1)
        vflips += int(r == 1)
    sigma = math.sqrt(n * 0.25)
    assert abs(hflips - n / 2) < 3 * sigma
    assert abs(vflips - n / 2) < 3 * sigma


# ---------------------------------------------------------------- I/O

@pytest.mark.parametrize("ext", [".png", ".ppm"])
def test_round_trip_within_quantisation(tmp_path, rng, ext):
    img = rng.random((3, 13, 17))
    back = load_image(save_image(tmp_path / f"x{ext}", img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255 + 1e-12


def test_ppm_magic_enforced(tmp_path):
    p = tmp_path / "ascii.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(OSError, match="ascii.ppm"):
        load_image(p)


def test_ppm_with_comment_header(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    img = load_image(p)
    assert img.shape == (3, 1, 2)
    assert img[:, 0, 0].tolist() == [1.0, 0.0, 0.0] and img[:, 0, 1].tolist() == [0.0, 0.0, 1.0]


def test_grayscale_png_expands_to_rgb(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.array([[0, 128], [255, 64]], dtype=np.uint8), "L").save(p)
    img = load_image(p)
    assert img.shape == (3, 2, 2)
    assert np.array_equal(img[0], img[1]) and np.array_equal(img[1], img[2])


def test_missing_or_malformed_file_is_os_error(tmp_path):
    with pytest.raises(OSError, match="nope.png"):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="bad.png"):
        load_image(bad)


# ---------------------------------------------------------------- manifests

def test_generation_is_reproducible(tmp_path):
    a = generate_dataset(tmp_path / "a", n_train=3, n_val=2, size=32, seed=11)
    b = generate_dataset(tmp_path / "b", n_train=3, n_val=2, size=32, seed=11)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for (s1, b1), (s2, b2) in zip(a.load_pairs(), b.load_pairs()):
        assert np.array_equal(s1, s2) and np.array_equal(b1, b2)


def test_manifest_round_trip_and_splits(tmp_path):
    generate_dataset(tmp_path, n_train=3, n_val=2, size=32, seed=1, fmt="ppm")
    m = load_manifest(tmp_path / "manifest.jsonl")
    assert len(m.split("train")) == 3 and len(m.split("val")) == 2
    assert all(s.shape == (3, 32, 32) for s, _ in m.load_pairs())


def test_manifest_missing_file_is_config_error(tmp_path):
    generate_dataset(tmp_path, n_train=1, n_val=0, size=16, seed=1)
    (tmp_path / "train/0000_blur.png").unlink()
    with pytest.raises(ConfigError, match="0000_blur"):
        load_manifest(tmp_path / "manifest.jsonl")
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "absent.jsonl")

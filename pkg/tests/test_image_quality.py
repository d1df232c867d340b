import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from relit import image_quality as iq


def _pair(seed, shape=(24, 20, 3)):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, shape)
    return a, np.clip(a + rng.normal(0, 0.1, shape), 0, 1)


def test_identical_images_give_sentinel():
    a, _ = _pair(0)
    assert iq.psnr(a, a) == iq.PSNR_IDENTICAL == math.inf


def test_constant_offset_is_twenty_db():
    a = np.full((8, 8, 3), 0.3)
    assert iq.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_double_loop_oracle():
    a, b = _pair(1)
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    ref = 10 * math.log10(1.0 / (total / a.size))
    assert iq.psnr(a, b) == pytest.approx(ref, abs=1e-9)


def test_psnr_mask():
    a, b = _pair(2)
    mask = np.zeros(a.shape[:2], bool)
    mask[3:9, 4:10] = True
    assert iq.psnr(a, b, mask) == pytest.approx(iq.psnr(a[3:9, 4:10], b[3:9, 4:10]), abs=1e-12)


def test_size_mismatch():
    with pytest.raises(ValueError):
        iq.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        iq.ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_ssim_self_similarity_is_exact():
    a, _ = _pair(3)
    assert iq.ssim(a, a) == 1.0


def test_ssim_of_opposite_constants():
    assert iq.ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) < 0.01
    # closed form on constants: (c1)(c2) / ((1 + c1)(c2))
    c1 = 0.01**2
    assert iq.ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    a, b = _pair(seed, (32, 28, 3))
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, win_size=11)
    assert iq.ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_brute_force_window():
    a, b = _pair(9, (12, 12, 1))
    g = iq.gaussian_window()
    w = np.outer(g, g)
    vals = []
    for i in range(2):
        for j in range(2):
            pa, pb = a[i:i + 11, j:j + 11, 0], b[i:i + 11, j:j + 11, 0]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * pa * pa).sum() - ma**2, (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            c1, c2 = 1e-4, 9e-4
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert iq.ssim(a[..., 0], b[..., 0]) == pytest.approx(np.mean(vals), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError, match="smaller"):
        iq.ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@given(st.integers(0, 10_000))
def test_metrics_are_symmetric(seed):
    a, b = _pair(seed, (14, 14, 3))
    assert iq.psnr(a, b) == iq.psnr(b, a)
    assert iq.ssim(a, b) == pytest.approx(iq.ssim(b, a), abs=1e-15)
    assert -1.0 <= iq.ssim(a, b) <= 1.0


def test_psnr_decreases_with_noise():
    base = np.random.default_rng(0).uniform(0.2, 0.8, (32, 32, 3))
    for seed in range(5):
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(base.shape)
        vals = [iq.psnr(base, np.clip(base + s * noise, 0, 1)) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(vals, vals[1:]))


def test_report_serialization():
    rows = [iq.compare(*_pair(0), name="a"), {"name": "b", "psnr_db": math.inf, "ssim": 1.0}]
    rep = iq.report(rows)
    assert rep.psnr_db == rows[0]["psnr_db"]
    d = rep.to_dict()
    assert d["per_image"][1]["psnr_db"] == "inf"


def test_png_round_trip(tmp_path):
    a, _ = _pair(4, (5, 6, 3))
    iq.write_png(a, tmp_path / "a.png")
    back = iq.read_png(tmp_path / "a.png")
    assert np.abs(back - a).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(iq.to_uint8(back), iq.to_uint8(a))


def test_float_formats_round_trip(tmp_path):
    a, _ = _pair(5, (5, 7, 3))
    for ext in (".pfm", ".npy"):
        iq.write_image(a, tmp_path / f"a{ext}")
        back = iq.read_image(tmp_path / f"a{ext}")
        tol = 1e-6 if ext == ".pfm" else 0.0
        assert np.abs(back - a).max() <= tol


def test_corrupt_png(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(ValueError):
        iq.read_png(tmp_path / "bad.png")


def test_uint8_conversion():
    assert iq.from_uint8(np.array([0, 255]))[1] == 1.0

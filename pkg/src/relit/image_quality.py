"""PSNR / SSIM on unit-range images and image file I/O (PNG, PFM, NPY)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

PSNR_IDENTICAL = math.inf  # sentinel returned when the two images are identical


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)  # dicts with name, psnr_db, ssim

    def to_dict(self) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else x

        return {
            "schema_version": 1,
            "psnr_db": enc(self.psnr_db),
            "ssim": self.ssim,
            "per_image": [{**r, "psnr_db": enc(r["psnr_db"])} for r in self.per_image],
        }


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def from_uint8(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``PSNR_IDENTICAL``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, dtype=bool)]
        if sq.size == 0:
            raise ValueError("mask selects no pixels")
    mse = float(np.mean(sq))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of an (H, W) image with the 1-D kernel ``g``."""
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two single-channel images over fully-contained windows."""
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, sigma: float = 1.5, mask=None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    With ``mask`` only windows centred on masked pixels are averaged.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < window or w < window:
        raise ValueError(f"images of size {h}x{w} are smaller than the {window}x{window} window")
    r = window // 2
    sel = None
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)[r:h - r, r:w - r]
        if not sel.any():
            raise ValueError("mask selects no window centres")
    vals = []
    for c in range(a.shape[2]):
        m = ssim_map(a[..., c], b[..., c], window, sigma, k1, k2)
        vals.append(float(np.mean(m if sel is None else m[sel])))
    return float(np.mean(vals))


def compare(a, b, name: str = "", mask=None) -> dict:
    return {"name": name, "psnr_db": psnr(a, b, mask), "ssim": ssim(a, b, mask=mask)}


def report(rows: list) -> MetricReport:
    """Aggregate per-image rows; PSNR is averaged over finite values only."""
    finite = [r["psnr_db"] for r in rows if not math.isinf(r["psnr_db"])]
    mean_psnr = float(np.mean(finite)) if finite else PSNR_IDENTICAL
    return MetricReport(mean_psnr, float(np.mean([r["ssim"] for r in rows])), list(rows))


# ---------------------------------------------------------------------------
# image files

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(pixels, path) -> None:
    Image.fromarray(to_uint8(_as_array(pixels))).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return from_uint8(arr)


def write_pfm(pixels, path) -> None:
    """Little-endian colour PFM, rows stored bottom-to-top."""
    arr = np.asarray(_as_array(pixels), dtype="<f4")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path} is not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * chans:
        raise ValueError(f"{path}: truncated PFM data")
    arr = data.reshape(h, w, chans)[::-1].astype(np.float64)
    return np.repeat(arr, 3, axis=2) if chans == 1 else arr


def read_image(path) -> np.ndarray:
    """Load an ``(H, W, 3)`` float image from .png, .pfm or .npy."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".npy":
        arr = np.load(path)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"{path}: expected an (H, W, 3) array, got {arr.shape}")
        return arr.astype(np.float64)
    return read_png(path)


def write_image(pixels, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        write_pfm(pixels, path)
    elif suffix == ".npy":
        np.save(path, _as_array(pixels))
    else:
        write_png(pixels, path)

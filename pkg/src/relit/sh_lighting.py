"""Second-order real spherical-harmonics shading and least-squares lighting estimation.

Coefficient order within a channel is (l, m) lexicographic:
``Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

SCHEMA_VERSION = 1

C0 = 0.5 / np.sqrt(np.pi)  # 0.2820948
C1 = np.sqrt(3.0 / (4.0 * np.pi))  # 0.4886025
C2 = 0.5 * np.sqrt(15.0 / np.pi)  # 1.0925484
C3 = 0.25 * np.sqrt(5.0 / np.pi)  # 0.3153916
C4 = 0.25 * np.sqrt(15.0 / np.pi)  # 0.5462742


@dataclass(frozen=True)
class ShCoeffs:
    coeffs: np.ndarray  # (3, 9), rows R, G, B

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (3, 9):
            raise ValueError(f"SH coefficients must be 3x9, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("SH coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    def __add__(self, other):
        o = other.delta if isinstance(other, ShDelta) else other.coeffs
        return ShCoeffs(self.coeffs + o)

    @classmethod
    def zeros(cls) -> "ShCoeffs":
        return cls(np.zeros((3, 9)))

    @classmethod
    def ambient(cls, level) -> "ShCoeffs":
        """Constant lighting whose radiance is ``level`` (scalar or per channel)."""
        c = np.zeros((3, 9))
        c[:, 0] = np.broadcast_to(np.asarray(level, dtype=float), (3,)) / C0
        return cls(c)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "order": "l,m lexicographic", "channels": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ShCoeffs":
        return cls(np.asarray(d["channels"], dtype=float))


@dataclass(frozen=True)
class ShDelta:
    delta: np.ndarray  # (3, 9)

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float)
        if d.shape != (3, 9):
            raise ValueError(f"SH delta must be 3x9, got {d.shape}")
        object.__setattr__(self, "delta", d)


def save_sh(sh: ShCoeffs, path) -> None:
    Path(path).write_text(json.dumps(sh.to_dict(), indent=1))


def load_sh(path) -> ShCoeffs:
    return ShCoeffs.from_dict(json.loads(Path(path).read_text()))


def sh_basis(normal, check: bool = True) -> np.ndarray:
    """Real SH basis up to band 2 for unit normals of shape ``(..., 3)``; returns ``(..., 9)``."""
    n = np.asarray(normal, dtype=float)
    if check:
        lengths = np.linalg.norm(n, axis=-1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            raise ValueError("sh_basis expects unit normals (|n| = 1 +/- 1e-6)")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, C0),
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ], axis=-1)


def radiance(normal, albedo, sh: ShCoeffs) -> np.ndarray:
    """Unclamped-above radiance ``albedo * max(0, sh . Y(n))`` per channel."""
    y = sh_basis(normal)
    irr = y @ sh.coeffs.T
    return np.asarray(albedo, dtype=float) * np.maximum(irr, 0.0)


def shade(normal, albedo, sh: ShCoeffs) -> np.ndarray:
    """Shaded color in [0, 1]; broadcasts over leading dimensions of ``normal``."""
    albedo = np.asarray(albedo, dtype=float)
    if np.any(albedo < 0) or np.any(albedo > 1):
        raise ValueError("albedo must lie in [0, 1]")
    return np.clip(radiance(normal, albedo, sh), 0.0, 1.0)


def estimate_sh(image, normals_map, mask, albedo=None, rcond: float = 1e-10) -> ShCoeffs:
    """Per-channel least-squares SH fit via QR.

    ``image`` is an ``(H, W, 3)`` array or a RasterImage, ``normals_map`` holds
    unit normals ``(H, W, 3)`` and ``mask`` is ``(H, W)`` or per channel
    ``(H, W, 3)``.  ``albedo`` (scalar or ``(H, W, 3)``) multiplies the basis
    rows; it defaults to 1.
    """
    pixels = np.asarray(getattr(image, "pixels", image), dtype=float)
    normals_map = np.asarray(normals_map, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.repeat(mask[..., None], 3, axis=2)
    alb = np.ones_like(pixels) if albedo is None else np.broadcast_to(np.asarray(albedo, dtype=float), pixels.shape)

    out = np.zeros((3, 9))
    for c in range(3):
        m = mask[..., c]
        count = int(m.sum())
        if count < 9:
            raise ValueError(f"channel {c}: need at least 9 masked pixels, got {count}")
        a = sh_basis(normals_map[m]) * alb[..., c][m][:, None]
        b = pixels[..., c][m]
        q, r = np.linalg.qr(a)
        diag = np.abs(np.diag(r))
        if diag.min() <= rcond * max(diag.max(), 1e-300):
            raise ValueError(
                f"channel {c}: rank-deficient SH system (min |R_ii| = {diag.min():.3g}); "
                "normals do not span enough directions"
            )
        out[c] = solve_triangular(r, q.T @ b)
    return ShCoeffs(out)


def directional_sh(direction, intensity=1.0, ambient=0.0) -> ShCoeffs:
    """SH projection of a clamped-cosine lobe toward ``direction`` plus ambient.

    Uses the standard irradiance convolution weights (pi, 2pi/3, pi/4) so the
    resulting coefficients reproduce a soft directional light.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    band_w = np.array([np.pi, *([2 * np.pi / 3] * 3), *([np.pi / 4] * 5)]) / np.pi
    row = band_w * sh_basis(d)
    c = np.outer(np.broadcast_to(np.asarray(intensity, dtype=float), (3,)), row)
    c[:, 0] += np.broadcast_to(np.asarray(ambient, dtype=float), (3,)) / C0
    return ShCoeffs(c)

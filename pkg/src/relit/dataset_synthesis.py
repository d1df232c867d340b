"""Degraded/target training pairs by SH extrapolation, reshading and darkness-driven blur + noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .morphable_model import FaceCoefficients, MorphableModel, evaluate_model
from .sh_lighting import ShCoeffs, shade
from .soft_rasterizer import Camera, RasterConfig, RasterImage, build_cache, gbuffer, shade_cache

SHADING_FLOOR = 1e-3


@dataclass(frozen=True)
class DegradeConfig:
    lambda_sh_range: tuple = (1.0, 2.0)
    ideal_radius: float | None = None  # None -> 0.1 * ||mean||_2
    blur_max_sigma: float = 2.0
    noise_max_sigma: float = 0.05
    seed: int = 0
    min_brightness: float = 0.02  # pairs whose masked mean input brightness is lower are rejected
    blur_levels: int = 9

    def __post_init__(self):
        lo, hi = (float(x) for x in self.lambda_sh_range)
        if lo > hi:
            raise ValueError("lambda_sh_range must satisfy lo <= hi")
        object.__setattr__(self, "lambda_sh_range", (lo, hi))
        if self.ideal_radius is not None and self.ideal_radius < 0:
            raise ValueError("ideal_radius must be >= 0")
        if self.blur_max_sigma < 0 or self.noise_max_sigma < 0:
            raise ValueError("blur/noise strengths must be >= 0")
        if self.blur_levels < 2:
            raise ValueError("blur_levels must be >= 2")

    def radius_for(self, mean: ShCoeffs) -> float:
        if self.ideal_radius is not None:
            return float(self.ideal_radius)
        return 0.1 * float(np.linalg.norm(mean.coeffs))

    def snapshot(self) -> dict:
        d = asdict(self)
        d["lambda_sh_range"] = list(self.lambda_sh_range)
        return d


@dataclass(frozen=True)
class TrainingPair:
    input_image: RasterImage
    target_image: RasterImage
    sh_input: ShCoeffs
    sh_target: ShCoeffs
    lambda_used: float
    ideal_point: ShCoeffs
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def brightness(self) -> float:
        if not self.mask.any():
            return 0.0
        return float(self.input_image.pixels[self.mask].mean())


def pair_rng(seed: int, pair_index: int) -> np.random.Generator:
    """Per-pair generator seeded with ``seed XOR pair_index``."""
    return np.random.default_rng(int(seed) ^ int(pair_index))


def mean_sh(targets) -> ShCoeffs:
    targets = list(targets)
    if not targets:
        raise ValueError("mean_sh needs at least one coefficient set")
    return ShCoeffs(np.mean([t.coeffs for t in targets], axis=0))


def degrade_sh(sh_target: ShCoeffs, mean: ShCoeffs, cfg: DegradeConfig, rng: np.random.Generator):
    """Extrapolate the target lighting away from an ideal point sampled near the mean.

    The ideal point is uniform in the 27-dimensional L2 ball of radius
    ``cfg.radius_for(mean)``; the factor is uniform in ``cfg.lambda_sh_range``.
    Returns ``(sh_input, lambda_used, ideal_point)``.
    """
    direction = rng.standard_normal(27)
    direction /= np.linalg.norm(direction)
    r = cfg.radius_for(mean) * rng.uniform() ** (1.0 / 27.0)
    ideal = ShCoeffs(mean.coeffs + r * direction.reshape(3, 9))
    lo, hi = cfg.lambda_sh_range
    lam = float(rng.uniform(lo, hi))
    out = sh_target.coeffs + lam * (sh_target.coeffs - ideal.coeffs)
    return ShCoeffs(out), lam, ideal


def _default_mask(normals_map: np.ndarray) -> np.ndarray:
    return np.abs(np.linalg.norm(normals_map, axis=-1) - 1.0) < 1e-6


def reshade_image(I_t, normals_map, sh_target: ShCoeffs, sh_input: ShCoeffs, mask=None) -> RasterImage:
    """Swap the lighting of ``I_t`` by the ratio of white-albedo shadings.

    Masked pixels become ``I_t * s_in / max(s_t, 1e-3)`` (ratio exactly 1 where
    the two shadings agree); other pixels are copied.
    """
    pixels = np.asarray(getattr(I_t, "pixels", I_t), dtype=float)
    normals_map = np.asarray(normals_map, dtype=float)
    mask = _default_mask(normals_map) if mask is None else np.asarray(mask, dtype=bool)
    n = normals_map[mask]
    s_in = shade(n, 1.0, sh_input)
    s_t = shade(n, 1.0, sh_target)
    ratio = np.where(s_in == s_t, 1.0, s_in / np.maximum(s_t, SHADING_FLOOR))
    out = pixels.copy()
    out[mask] = np.clip(pixels[mask] * ratio, 0.0, 1.0)
    return RasterImage(out, getattr(I_t, "coverage", None))


def shading_map(normals_map, sh: ShCoeffs, mask) -> np.ndarray:
    """Channel-mean white-albedo shading on masked pixels, 1 elsewhere."""
    out = np.ones(np.shape(normals_map)[:2])
    mask = np.asarray(mask, dtype=bool)
    out[mask] = shade(np.asarray(normals_map)[mask], 1.0, sh).mean(axis=-1)
    return out


def apply_darkness_degradation(I_s, shading: np.ndarray, cfg: DegradeConfig, rng: np.random.Generator) -> RasterImage:
    """Blur and add noise with strength growing linearly with ``1 - shading``.

    The per-pixel blur sigma ``blur_max_sigma * (1 - 3x3 mean shading)`` is
    realised by interpolating between images blurred at evenly spaced sigma
    levels.  Noise sigma is ``noise_max_sigma * (1 - shading)``.  One
    standard-normal draw per pixel and channel is always consumed.
    """
    pixels = np.asarray(getattr(I_s, "pixels", I_s), dtype=float)
    shading = np.asarray(shading, dtype=float)
    if shading.shape != pixels.shape[:2]:
        raise ValueError("shading map must match the image size")
    if shading.min() < 0 or shading.max() > 1:
        raise ValueError("shading map must lie in [0, 1]")

    out = pixels
    if cfg.blur_max_sigma > 0:
        local = uniform_filter(shading, size=3, mode="nearest")
        sig = cfg.blur_max_sigma * np.clip(1.0 - local, 0.0, 1.0)
        levels = np.linspace(0.0, cfg.blur_max_sigma, cfg.blur_levels)
        stack = [pixels] + [gaussian_filter(pixels, sigma=(s, s, 0), mode="nearest") for s in levels[1:]]
        pos = sig / levels[1]
        lo = np.minimum(np.floor(pos).astype(int), cfg.blur_levels - 2)
        t = (pos - lo)[..., None]
        stack = np.stack(stack)
        rows, cols = np.indices(lo.shape)
        out = (1.0 - t) * stack[lo, rows, cols] + t * stack[lo + 1, rows, cols]

    noise = rng.standard_normal(pixels.shape)
    out = np.clip(out + noise * (cfg.noise_max_sigma * (1.0 - shading))[..., None], 0.0, 1.0)
    return RasterImage(out, getattr(I_s, "coverage", None))


def synthesize_input(I_t, normals_map, mask, sh_target: ShCoeffs, mean: ShCoeffs, cfg: DegradeConfig,
                     rng: np.random.Generator):
    """Degrade one target image; returns ``(I_s, sh_input, lambda_used, ideal_point)``."""
    sh_in, lam, ideal = degrade_sh(sh_target, mean, cfg, rng)
    reshaded = reshade_image(I_t, normals_map, sh_target, sh_in, mask)
    I_s = apply_darkness_degradation(reshaded, shading_map(normals_map, sh_in, mask), cfg, rng)
    return I_s, sh_in, lam, ideal


def build_pair(model: MorphableModel, coeffs: FaceCoefficients, camera: Camera, sh_target: ShCoeffs,
               mean: ShCoeffs, cfg: DegradeConfig, rng: np.random.Generator,
               cfg_raster: RasterConfig | None = None, pair_index: int | None = None) -> TrainingPair:
    """Render the target under ``sh_target`` and synthesize its degraded input."""
    cfg_raster = RasterConfig.for_camera(camera) if cfg_raster is None else cfg_raster
    cache = build_cache(evaluate_model(model, coeffs), camera, cfg_raster)
    rad, _, _ = shade_cache(cache, sh_target)
    normals, _, cov = gbuffer(cache)
    I_t = RasterImage(np.clip(rad, 0.0, 1.0), np.clip(cov, 0.0, 1.0))
    mask = cov >= 0.5
    I_s, sh_in, lam, ideal = synthesize_input(I_t, normals, mask, sh_target, mean, cfg, rng)
    provenance = {"seed": cfg.seed, "pair_index": pair_index, "config": cfg.snapshot(),
                  "raster": {"sigma": cfg_raster.sigma, "gamma_depth": cfg_raster.gamma_depth}}
    return TrainingPair(I_s, I_t, sh_in, sh_target, lam, ideal, mask, provenance)


def keep_pair(pair: TrainingPair, cfg: DegradeConfig) -> bool:
    """Automatic screening: reject inputs too dark to carry usable content."""
    return pair.brightness() >= cfg.min_brightness

"""Seeded synthetic lighting-correction scenes shared by tests, scripts and the CLI fixture."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lighting_correction import CorrectionConfig, fit_lighting, render_state, single_branch_fit
from .morphable_model import FaceCoefficients, Mesh, evaluate_model, make_synthetic_model, quaternion_to_matrix
from .sh_lighting import ShCoeffs, directional_sh
from .soft_rasterizer import Camera, RasterCache, RasterConfig, RasterImage, build_cache


@dataclass
class CorrectionScene:
    mesh: Mesh
    camera: Camera
    raster: RasterConfig
    cache: RasterCache
    sh_in: ShCoeffs
    sh_tgt: ShCoeffs
    I_s: RasterImage
    I_t: RasterImage


def random_lighting(rng: np.random.Generator, dark: bool = False) -> ShCoeffs:
    """A soft directional light plus ambient; ``dark`` gives a dimmer, more oblique light."""
    if dark:
        direction = rng.normal([0.0, 0.0, 1.0], 0.8)
        direction[2] = abs(direction[2]) + 0.2
        return directional_sh(direction, rng.uniform(0.3, 0.5), rng.uniform(0.12, 0.22))
    return directional_sh(rng.normal([0.0, 0.3, 1.0], 0.3), rng.uniform(0.6, 0.8), rng.uniform(0.35, 0.45))


def correction_scene(seed: int, size: int = 64, grid: int = 12) -> CorrectionScene:
    """Face blob with mild random shape/texture/pose and a (dark input, good target) lighting pair.

    Both images are exact renders, so the bi-branch objective has a zero-loss
    solution at the generating lighting pair.
    """
    rng = np.random.default_rng(seed)
    model = make_synthetic_model(grid, seed)
    q = np.r_[1.0, 0.08 * rng.standard_normal(3)]
    coeffs = FaceCoefficients(0.2 * rng.standard_normal(model.n_id), 0.1 * rng.standard_normal(model.n_exp),
                              0.2 * rng.standard_normal(model.n_tex), quaternion_to_matrix(q))
    mesh = evaluate_model(model, coeffs)
    cam = Camera(size, size)
    raster = RasterConfig.for_camera(cam)
    cache = build_cache(mesh, cam, raster)
    sh_in = random_lighting(rng, dark=True)
    sh_tgt = random_lighting(rng)
    return CorrectionScene(mesh, cam, raster, cache, sh_in, sh_tgt,
                           render_state(cache, sh_in), render_state(cache, sh_tgt))


ABLATION_SEEDS = tuple(range(100, 110))


def ablation(seeds=ABLATION_SEEDS, size: int = 32, cfg: CorrectionConfig | None = None) -> list:
    """Bi-branch versus single-branch lighting fits on seeded scenes.

    Both fits see the same exact renders and the same config; the single
    branch starts from the estimate on ``I_s`` like the bi-branch does.
    Returns one dict per scene with PSNR(I_g, I_t) for each method.
    """
    from .image_quality import psnr

    cfg = CorrectionConfig() if cfg is None else cfg
    rows = []
    for seed in seeds:
        s = correction_scene(seed, size=size)
        state = fit_lighting(s.mesh, s.camera, s.raster, s.I_s, s.I_t, cfg, cache=s.cache)
        single = single_branch_fit(s.mesh, s.camera, s.raster, s.I_t, cfg, I_s=s.I_s, cache=s.cache)
        rows.append({
            "seed": seed,
            "psnr_bi": psnr(render_state(s.cache, state.eps_crt), s.I_t),
            "psnr_single": psnr(render_state(s.cache, single), s.I_t),
            "err_bi": float(np.abs(state.eps_crt.coeffs - s.sh_tgt.coeffs).max()),
            "err_single": float(np.abs(single.coeffs - s.sh_tgt.coeffs).max()),
        })
    return rows

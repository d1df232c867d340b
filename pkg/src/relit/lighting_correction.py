"""Bi-branch lighting correction by direct optimization through the soft rasterizer.

Two SH sets are optimized: ``eps_est`` explains the input image ``I_s`` and
``delta_sh`` moves it to lighting whose render ``I_g`` matches the target
``I_t``.  The corrected lighting is always derived as ``eps_est + delta_sh``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .morphable_model import Mesh
from .optim import Adam
from .sh_lighting import ShCoeffs, ShDelta, estimate_sh
from .soft_rasterizer import Camera, RasterCache, RasterConfig, RasterImage, build_cache, gbuffer, shade_cache, sh_vjp

log = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class CorrectionConfig:
    lambda_crt: float = 1.0
    steps: int = 2000
    step_size: float = 1e-2
    adam_beta1: float = 0.95
    adam_beta2: float = 0.90
    seed: int = 0
    lr_decay: float = 0.5  # multiplies step_size every decay_every steps
    decay_every: int = 250
    init: str = "estimate"  # "estimate" | "zeros" | "random"
    precondition: bool = True  # run Adam in coordinates whitened by the shading Gram matrix

    def __post_init__(self):
        if self.lambda_crt < 0:
            raise ValueError("lambda_crt must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 < b < 1:
                raise ValueError("Adam betas must lie in (0, 1)")
        if self.init not in ("estimate", "zeros", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    def lr_at(self, step: int) -> float:
        return self.step_size * self.lr_decay ** (step // self.decay_every)


@dataclass
class CorrectionState:
    eps_est: ShCoeffs
    delta_sh: ShDelta
    loss_history: list = field(default_factory=list)  # (step, total, term_est, term_crt)

    @property
    def eps_crt(self) -> ShCoeffs:
        return self.eps_est + self.delta_sh


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=float)


def l1_mean(a, b, mask=None) -> float:
    """Mean absolute difference over masked pixels and all three channels."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask selects no pixels")
    return float(diff[mask].sum() / (3 * n))


def covered_mask(cache: RasterCache) -> np.ndarray:
    return cache.coverage() >= COVERAGE_THRESHOLD


def _check_size(cache: RasterCache, img, name: str) -> np.ndarray:
    px = _pixels(img)
    if px.shape != (cache.height, cache.width, 3):
        raise ValueError(f"{name} has shape {px.shape}, render target is {(cache.height, cache.width, 3)}")
    return px


def _branch(cache, sh: ShCoeffs, target: np.ndarray, mask: np.ndarray, weight: float):
    """L1 term value and its gradient w.r.t. the 3x9 lighting of one branch."""
    rad, lit, _ = shade_cache(cache, sh)
    img = np.clip(rad, 0.0, 1.0)
    n = 3 * int(mask.sum())
    diff = img - target
    term = float(np.abs(diff)[mask].sum() / n)
    if weight == 0.0:
        return term, None
    # subgradient sign(0) = 0; no gradient through the clamp where it is active
    g = np.sign(diff) * mask[..., None] * ((rad >= 0.0) & (rad <= 1.0)) * (weight / n)
    return term, sh_vjp(cache, lit, g)


def correction_loss(mesh: Mesh, camera: Camera, cfg_raster: RasterConfig, state: CorrectionState, I_s,
                    I_t=None, lambda_crt: float = 1.0, cache: RasterCache | None = None):
    """Return ``(total, term_est, term_crt)``; L1 means are taken over covered pixels."""
    cache = build_cache(mesh, camera, cfg_raster) if cache is None else cache
    mask = covered_mask(cache)
    if not mask.any():
        raise ValueError("no covered pixels")
    target_s = _check_size(cache, I_s, "I_s")
    term_est, _ = _branch(cache, state.eps_est, target_s, mask, 0.0)
    term_crt = 0.0
    if I_t is not None:
        term_crt, _ = _branch(cache, state.eps_crt, _check_size(cache, I_t, "I_t"), mask, 0.0)
    return term_est + lambda_crt * term_crt, term_est, term_crt


def initial_lighting(cache: RasterCache, image, cfg: CorrectionConfig) -> ShCoeffs:
    """Starting lighting: least-squares estimate on well-covered, unsaturated pixels."""
    if cfg.init == "zeros":
        return ShCoeffs.zeros()
    if cfg.init == "random":
        rng = np.random.default_rng(cfg.seed)
        return ShCoeffs(0.1 * rng.standard_normal((3, 9)))
    normals, albedo, cov = gbuffer(cache)
    px = _pixels(image)
    mask = (cov >= 0.99)[..., None] & (px > 0.0) & (px < 1.0) & (albedo > 1e-3)
    try:
        return estimate_sh(px, normals, mask, albedo=albedo)
    except ValueError as exc:
        log.warning("lighting estimate unavailable (%s); starting from zero lighting", exc)
        return ShCoeffs.zeros()


class _Whitener:
    """Change of variables ``sh_row = x_row @ T`` with ``T = L^-1`` for ``G = L L^T``.

    ``G`` is the Gram matrix of albedo-weighted basis rows over covered
    pixels, so the lighting-to-image map is close to orthonormal in ``x``.
    The identity transform is used when disabled or when ``G`` is singular.
    """

    def __init__(self, cache: RasterCache, mask: np.ndarray, enabled: bool):
        self.t = np.eye(9)
        if not enabled:
            return
        sel = mask.ravel()[cache.pix]
        rows = cache.basis[sel] * (cache.weight[sel] * cache.albedo[sel].mean(axis=1))[:, None]
        gram = rows.T @ rows / max(int(mask.sum()), 1)
        try:
            chol = np.linalg.cholesky(gram + 1e-12 * np.trace(gram) * np.eye(9))
        except np.linalg.LinAlgError:
            return
        self.t = np.linalg.inv(chol)

    def to_x(self, sh: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.t.T, sh.T).T

    def to_sh(self, x: np.ndarray) -> np.ndarray:
        return x @ self.t

    def grad_x(self, g_sh: np.ndarray) -> np.ndarray:
        return g_sh @ self.t.T


def _prepare(mesh, camera, cfg_raster, threads):
    cache = build_cache(mesh, camera, cfg_raster, threads=threads)
    mask = covered_mask(cache)
    if not mask.any():
        raise ValueError("camera sees no covered pixels; nothing to fit")
    return cache, mask


def fit_lighting(mesh: Mesh, camera: Camera, cfg_raster: RasterConfig, I_s, I_t, cfg: CorrectionConfig,
                 threads: int = 1, cache: RasterCache | None = None) -> CorrectionState:
    """Jointly fit ``eps_est`` (to ``I_s``) and ``delta_sh`` (to ``I_t``) with Adam.

    ``loss_history`` holds ``steps + 1`` rows: the loss before every update and
    the final loss.  ``I_t`` may be None, in which case ``delta_sh`` stays 0.
    """
    if cache is None:
        cache, mask = _prepare(mesh, camera, cfg_raster, threads)
    else:
        mask = covered_mask(cache)
    target_s = _check_size(cache, I_s, "I_s")
    target_t = None if I_t is None else _check_size(cache, I_t, "I_t")

    wh = _Whitener(cache, mask, cfg.precondition)
    params = {"eps_est": wh.to_x(initial_lighting(cache, target_s, cfg).coeffs), "delta_sh": np.zeros((3, 9))}
    opt = Adam(params, lr=cfg.step_size, betas=(cfg.adam_beta1, cfg.adam_beta2))
    history = []
    lam = cfg.lambda_crt
    for step in range(cfg.steps + 1):
        est = wh.to_sh(params["eps_est"])
        term_est, g_est = _branch(cache, ShCoeffs(est), target_s, mask, 1.0)
        term_crt, g_crt = 0.0, None
        if target_t is not None:
            crt = wh.to_sh(params["eps_est"] + params["delta_sh"])
            term_crt, g_crt = _branch(cache, ShCoeffs(crt), target_t, mask, lam)
        total = term_est + lam * term_crt
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite correction loss at step {step}")
        history.append((step, total, term_est, term_crt))
        if step == cfg.steps:
            break
        grads = {"eps_est": wh.grad_x(g_est if g_crt is None else g_est + g_crt)}
        if g_crt is not None:
            grads["delta_sh"] = wh.grad_x(g_crt)
        opt.step(grads, lr=cfg.lr_at(step))
        if step % 250 == 0:
            log.debug("step %d total %.6f est %.6f crt %.6f", step, total, term_est, term_crt)
    eps_est = wh.to_sh(params["eps_est"])
    delta = wh.to_sh(params["eps_est"] + params["delta_sh"]) - eps_est
    return CorrectionState(ShCoeffs(eps_est), ShDelta(delta), history)


def single_branch_fit(mesh: Mesh, camera: Camera, cfg_raster: RasterConfig, I_t, cfg: CorrectionConfig,
                      I_s=None, threads: int = 1, cache: RasterCache | None = None, return_history: bool = False):
    """Fit one lighting directly against ``I_t``.

    Initialization uses the estimate from ``I_s`` when given (the only image a
    single-branch predictor would see), otherwise from ``I_t`` itself.
    """
    if cache is None:
        cache, mask = _prepare(mesh, camera, cfg_raster, threads)
    else:
        mask = covered_mask(cache)
    target = _check_size(cache, I_t, "I_t")
    init_img = target if I_s is None else _check_size(cache, I_s, "I_s")
    wh = _Whitener(cache, mask, cfg.precondition)
    params = {"sh": wh.to_x(initial_lighting(cache, init_img, cfg).coeffs)}
    opt = Adam(params, lr=cfg.step_size, betas=(cfg.adam_beta1, cfg.adam_beta2))
    history = []
    for step in range(cfg.steps + 1):
        term, g = _branch(cache, ShCoeffs(wh.to_sh(params["sh"])), target, mask, 1.0)
        if not np.isfinite(term):
            raise FloatingPointError(f"non-finite single-branch loss at step {step}")
        history.append((step, term))
        if step == cfg.steps:
            break
        opt.step({"sh": wh.grad_x(g)}, lr=cfg.lr_at(step))
    sh = ShCoeffs(wh.to_sh(params["sh"]))
    return (sh, history) if return_history else sh


def render_state(cache: RasterCache, sh: ShCoeffs) -> RasterImage:
    rad, _, _ = shade_cache(cache, sh)
    return RasterImage(np.clip(rad, 0.0, 1.0), np.clip(cache.coverage(), 0.0, 1.0))

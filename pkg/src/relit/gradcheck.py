"""Central finite-difference checks for every analytic gradient in the package."""
from __future__ import annotations

import numpy as np

from . import neural_blocks as nb
from .morphable_model import Mesh, compute_vertex_normals
from .sh_lighting import ShCoeffs
from .soft_rasterizer import Camera, RasterConfig, render_with_grads

FD_STEP = 1e-4
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def numeric_jacobian(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of array-valued ``f()``; shape ``f().shape + x.shape``."""
    out0 = np.asarray(f())
    jac = np.zeros(out0.shape + x.shape)
    flat = x.reshape(-1)
    jflat = jac.reshape(out0.shape + (-1,))
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = np.asarray(f())
        flat[i] = old - h
        fm = np.asarray(f())
        flat[i] = old
        jflat[..., i] = (fp - fm) / (2.0 * h)
    return jac


# ---------------------------------------------------------------------------
# scenes and blocks

def random_scene(rng: np.random.Generator, size: int = 8, n_tris: int = 3):
    """Random triangles in front of an orthographic camera with positive band-0 lighting.

    Higher bands are kept small enough that ``sh . Y(n) > 0`` for every
    normal, so the radiance is smooth in the lighting and albedo.
    """
    cam = Camera(size, size, scale=size / 2.0)
    pos = np.concatenate([rng.uniform(-0.9, 0.9, (3 * n_tris, 2)), rng.uniform(0.0, 0.5, (3 * n_tris, 1))], axis=1)
    faces = np.arange(3 * n_tris).reshape(n_tris, 3)
    normals = compute_vertex_normals(pos, faces)
    normals[normals[:, 2] < 0] *= -1.0
    mesh = Mesh(pos, rng.uniform(0.2, 0.8, (3 * n_tris, 3)), normals, faces)
    coeffs = np.zeros((3, 9))
    coeffs[:, 0] = rng.uniform(2.0, 3.0, 3)
    coeffs[:, 1:] = rng.uniform(-0.1, 0.1, (3, 8))
    cfg = RasterConfig(sigma=rng.uniform(0.3, 1.5), gamma_depth=rng.uniform(0.05, 0.3),
                       background_color=tuple(rng.uniform(0, 1, 3)))
    return mesh, cam, ShCoeffs(coeffs), cfg


def check_renderer(seed: int, size: int = 8) -> dict:
    rng = np.random.default_rng(seed)
    mesh, cam, sh, cfg = random_scene(rng, size)
    res = render_with_grads(mesh, cam, sh, cfg)
    coeffs = sh.coeffs.copy()
    num_sh = numeric_jacobian(lambda: render_with_grads(mesh, cam, ShCoeffs(coeffs), cfg).radiance, coeffs)
    albedo = mesh.albedo.copy()

    def rad_albedo():
        m = Mesh(mesh.positions, albedo, mesh.normals, mesh.faces)
        return render_with_grads(m, cam, sh, cfg).radiance

    num_alb = numeric_jacobian(rad_albedo, albedo)  # (H, W, 3, V, 3)
    h, w = cam.height, cam.width
    analytic_alb = np.zeros_like(num_alb)
    for c in range(3):
        analytic_alb[:, :, c, :, c] = res.d_albedo[..., c]
    return {
        "d_sh": rel_error(res.d_sh, num_sh.reshape(h, w, 3, 27)),
        "d_albedo": rel_error(analytic_alb, num_alb),
    }


def _scalar_probe(shape, rng):
    return rng.standard_normal(shape)


def check_attention(seed: int, shape=(1, 4, 3, 3), guidance_factor: int = 2, dim: int = 4) -> float:
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    block = nb.AttentionBlock.init(3, c, dim, rng)
    feat = rng.standard_normal(shape)
    guidance = rng.standard_normal((n, 3, h * guidance_factor, w * guidance_factor))
    probe = _scalar_probe((n, dim, h, w), rng)

    def f():
        return float((nb.attention_forward(block, feat, guidance) * probe).sum())

    grads = nb.attention_backward(block, feat, guidance, probe)
    targets = {**block.parameters(), "feat_in": feat, "guidance": guidance}
    return max(rel_error(grads[k], numeric_grad(f, v)) for k, v in targets.items())


def check_multi_spade(seed: int, shape=(1, 2, 4, 4), cond_factor: int = 2) -> float:
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    block = nb.MultiSpadeBlock.init(c, 3, rng, gain=0.5)
    for p in block.parameters().values():
        if p.ndim == 1:
            p[...] = 0.1 * rng.standard_normal(p.shape)
    feat = rng.standard_normal(shape)
    I_g = rng.uniform(0, 1, (n, 3, h * cond_factor, w * cond_factor))
    I_s = rng.uniform(0, 1, (n, 3, h * cond_factor, w * cond_factor))
    probe = _scalar_probe(shape, rng)

    def f():
        return float((nb.multi_spade_forward(block, feat, I_g, I_s) * probe).sum())

    grads = nb.multi_spade_backward(block, feat, I_g, I_s, probe)
    targets = {**block.parameters(), "feat": feat, "I_g": I_g, "I_s": I_s}
    return max(rel_error(grads[k], numeric_grad(f, v)) for k, v in targets.items())


def check_gan_loss(seed: int) -> float:
    rng = np.random.default_rng(seed)
    real = [rng.uniform(0.1, 0.9, (1, 1, s, s)) for s in (4, 2, 1)]
    fake = [rng.uniform(0.1, 0.9, (1, 1, s, s)) for s in (4, 2, 1)]
    errs = []
    for from_logits in (False, True):
        r = [x if not from_logits else rng.standard_normal(x.shape) for x in real]
        fk = [x if not from_logits else rng.standard_normal(x.shape) for x in fake]
        g = nb.gan_loss_grads(r, fk, from_logits)
        for k in range(3):
            errs.append(rel_error(g["D_real"][k], numeric_grad(lambda: nb.gan_loss(r, fk, from_logits)[0], r[k])))
            errs.append(rel_error(g["D_fake"][k], numeric_grad(lambda: nb.gan_loss(r, fk, from_logits)[0], fk[k])))
            errs.append(rel_error(g["G_fake"][k], numeric_grad(lambda: nb.gan_loss(r, fk, from_logits)[1], fk[k])))
    return max(errs)


def check_feature_matching(seed: int, layers: int = 5) -> float:
    rng = np.random.default_rng(seed)
    real = [rng.standard_normal((1, 2, 3, 3)) for _ in range(layers)]
    fake = [rng.standard_normal((1, 2, 3, 3)) for _ in range(layers)]
    g = nb.feature_matching_grads(real, fake)
    return max(rel_error(g[i], numeric_grad(lambda: nb.feature_matching_loss(real, fake), fake[i]))
               for i in range(layers))


def check_perceptual(seed: int, size: int = 6) -> float:
    rng = np.random.default_rng(seed)
    ext = nb.FeatureExtractor(5, seed=seed)
    a = rng.uniform(0, 1, (1, 3, size, size))
    b = rng.uniform(0, 1, (1, 3, size, size))
    g = nb.perceptual_loss_grad(ext, a, b)
    num = numeric_grad(lambda: nb.perceptual_loss(ext, a, b), a)
    smooth = ~l1_kink_mask(ext, a, b)
    return rel_error(g[smooth], num[smooth])


def l1_kink_mask(ext, a, b, h: float = FD_STEP) -> np.ndarray:
    """True where the +-h stencil on ``a`` flips the sign of some feature residual.

    The L1 loss has a kink there, so a central difference does not estimate the derivative.
    """
    ref = [np.sign(fa - fb) for fa, fb in zip(ext.features(a), ext.features(b))]
    fb = ext.features(b)
    mask = np.zeros(a.shape, bool)
    flat, mflat = a.reshape(-1), mask.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        for step in (h, -h):
            flat[i] = old + step
            if any(np.any(np.sign(x - y) != r) for x, y, r in zip(ext.features(a), fb, ref)):
                mflat[i] = True
        flat[i] = old
    return mask


def run_suite(seed: int = 0, renderer_scenes: int = 3) -> dict:
    """Max relative error per block; the JSON body of the ``gradcheck`` command."""
    rend = [check_renderer(seed + i) for i in range(renderer_scenes)]
    return {
        "schema_version": 1,
        "fd_step": FD_STEP,
        "seed": seed,
        "max_rel_error": {
            "renderer_sh": max(r["d_sh"] for r in rend),
            "renderer_albedo": max(r["d_albedo"] for r in rend),
            "attention": check_attention(seed),
            "multi_spade": check_multi_spade(seed),
            "gan_loss": check_gan_loss(seed),
            "feature_matching_loss": check_feature_matching(seed),
            "perceptual_loss": check_perceptual(seed),
        },
    }

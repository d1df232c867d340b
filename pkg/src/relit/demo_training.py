"""Thin enhancement-stage training demo on tiny synthetic pairs.

Generator: conv+tanh encoder on ``I_s`` -> residual guidance-queried attention
-> Multi-SPADE conditioned on ``I_g`` then ``I_s`` -> conv + sigmoid decoder.
Discriminator: three patch discriminators on 1x, 1/2x and 1/4x images, each
exposing five feature layers (input, three hidden, output probability).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural_blocks as nb
from .dataset_synthesis import DegradeConfig, build_pair, mean_sh, pair_rng
from .morphable_model import FaceCoefficients, make_synthetic_model
from .optim import Adam
from .sh_lighting import directional_sh
from .soft_rasterizer import Camera, RasterConfig, render_guidance


@dataclass(frozen=True)
class DemoConfig:
    steps: int = 300
    size: int = 16
    num_pairs: int = 4
    channels: int = 4
    lr_g: float = 5e-3
    lr_d: float = 2e-4
    betas: tuple = (0.95, 0.90)
    seed: int = 0
    lambda_FM: float = 10.0
    lambda_percep: float = 10.0
    percep_reference: str = "input"  # "input" compares against I_s as written; "target" uses I_t


def make_pairs(cfg: DemoConfig):
    """Stacked ``(I_s, I_g, I_t)`` batches of shape ``(N, 3, size, size)``."""
    model = make_synthetic_model(8, cfg.seed)
    coeffs = FaceCoefficients.zeros(model)
    cam = Camera(cfg.size, cfg.size)
    raster = RasterConfig.for_camera(cam, sigma=0.3)
    rng = np.random.default_rng(cfg.seed)
    targets = [directional_sh(rng.normal([0, 0.3, 1], 0.3), rng.uniform(0.6, 0.9), rng.uniform(0.35, 0.5))
               for _ in range(cfg.num_pairs)]
    mean = mean_sh(targets)
    dcfg = DegradeConfig(seed=cfg.seed, blur_max_sigma=0.7, noise_max_sigma=0.02)
    I_s, I_g, I_t = [], [], []
    for i, sh in enumerate(targets):
        pair = build_pair(model, coeffs, cam, sh, mean, dcfg, pair_rng(cfg.seed, i), raster, i)
        I_s.append(pair.input_image.pixels)
        I_t.append(pair.target_image.pixels)
        I_g.append(render_guidance(model, coeffs, cam, sh, raster).pixels)
    to4 = lambda xs: np.stack(xs).transpose(0, 3, 1, 2).copy()  # noqa: E731
    return to4(I_s), to4(I_g), to4(I_t)


class Generator:
    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.w_enc = rng.standard_normal((c, 3, 3, 3)) / np.sqrt(27)
        self.b_enc = np.zeros(c)
        self.attn = nb.AttentionBlock.init(3, c, c, rng)
        self.spade = nb.MultiSpadeBlock.init(c, c, rng, gain=0.5)
        self.w_dec = rng.standard_normal((3, c, 3, 3)) / np.sqrt(9 * c)
        self.b_dec = np.zeros(3)

    def parameters(self) -> dict:
        p = {"w_enc": self.w_enc, "b_enc": self.b_enc, "w_dec": self.w_dec, "b_dec": self.b_dec}
        p.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        p.update({f"spade.{k}": v for k, v in self.spade.parameters().items()})
        return p

    def forward(self, I_s, I_g):
        pre, cols_e = nb.conv2d(I_s, self.w_enc, self.b_enc)
        f0 = np.tanh(pre)
        f1 = f0 + nb.attention_forward(self.attn, f0, I_g)
        f2 = nb.multi_spade_forward(self.spade, f1, I_g, I_s)
        logits, cols_d = nb.conv2d(f2, self.w_dec, self.b_dec)
        out = nb.sigmoid(logits)
        return out, dict(I_s=I_s, I_g=I_g, cols_e=cols_e, f0=f0, f1=f1, f2=f2, cols_d=cols_d, out=out)

    def backward(self, d_out, c) -> dict:
        d_logits = d_out * c["out"] * (1.0 - c["out"])
        df2, dw_dec, db_dec = nb.conv2d_backward(d_logits, c["cols_d"], self.w_dec, c["f2"].shape)
        gs = nb.multi_spade_backward(self.spade, c["f1"], c["I_g"], c["I_s"], df2)
        ga = nb.attention_backward(self.attn, c["f0"], c["I_g"], gs["feat"])
        df0 = gs["feat"] + ga["feat_in"]
        dpre = df0 * (1.0 - c["f0"] ** 2)
        _, dw_enc, db_enc = nb.conv2d_backward(dpre, c["cols_e"], self.w_enc, c["I_s"].shape)
        grads = {"w_enc": dw_enc, "b_enc": db_enc, "w_dec": dw_dec, "b_dec": db_dec}
        grads.update({f"attn.{k}": ga[k] for k in ("w_q", "w_k", "w_v")})
        grads.update({f"spade.{k}": v for k, v in gs.items() if k not in ("feat", "I_g", "I_s")})
        return grads


class PatchDiscriminator:
    def __init__(self, rng: np.random.Generator, width: int = 4):
        shapes = [(width, 3), (width, width), (width, width), (1, width)]
        self.layers = [[rng.standard_normal((o, i, 3, 3)) / np.sqrt(9 * i), np.zeros(o)] for o, i in shapes]

    def parameters(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def forward(self, x):
        """Returns ``(features, cache)``; features are input, 3 hidden maps and the probability map."""
        feats, caches = [x], []
        h = x
        for i, (w, b) in enumerate(self.layers):
            pre, cols = nb.conv2d(h, w, b)
            caches.append((cols, h.shape))
            h = np.tanh(pre) if i < len(self.layers) - 1 else nb.sigmoid(pre)
            feats.append(h)
        return feats, caches

    def backward(self, d_feats, feats, caches, prefix: str):
        """Backprop gradients given for every feature; returns ``(param_grads, d_input)``."""
        grads = {}
        dh = np.zeros_like(feats[-1])
        for i in range(len(self.layers) - 1, -1, -1):
            dh = dh + d_feats[i + 1]
            out = feats[i + 1]
            dpre = dh * (out * (1.0 - out) if i == len(self.layers) - 1 else 1.0 - out**2)
            cols, x_shape = caches[i]
            dh, dw, db = nb.conv2d_backward(dpre, cols, self.layers[i][0], x_shape)
            grads[f"{prefix}.w{i}"] = dw
            grads[f"{prefix}.b{i}"] = db
        return grads, dh + d_feats[0]


class MultiScaleDiscriminator:
    def __init__(self, rng: np.random.Generator, scales: int = 3):
        self.discs = [PatchDiscriminator(rng) for _ in range(scales)]

    def parameters(self) -> dict:
        out = {}
        for k, d in enumerate(self.discs):
            out.update(d.parameters(f"D{k}"))
        return out

    def forward(self, img):
        return [d.forward(nb.avg_pool(img, 2**k)) for k, d in enumerate(self.discs)]

    def backward(self, d_feats_per_scale, runs):
        grads, d_img = {}, None
        for k, (d, (feats, caches), dfs) in enumerate(zip(self.discs, runs, d_feats_per_scale)):
            g, dx = d.backward(dfs, feats, caches, f"D{k}")
            grads.update(g)
            dx = nb.avg_pool_backward(dx, 2**k)
            d_img = dx if d_img is None else d_img + dx
        return grads, d_img


def _zeros_like_feats(feats):
    return [np.zeros_like(f) for f in feats]


def train(cfg: DemoConfig = DemoConfig()) -> list:
    """Run alternating D/G Adam updates; returns per-step dicts of loss components.

    Components at each step are measured before that step's updates.
    """
    rng = np.random.default_rng(cfg.seed)
    I_s, I_g, I_t = make_pairs(cfg)
    G = Generator(cfg.channels, rng)
    D = MultiScaleDiscriminator(rng)
    ext = nb.FeatureExtractor(5, seed=cfg.seed + 1)
    weights = nb.LossWeights(cfg.lambda_FM, cfg.lambda_percep)
    opt_g = Adam(G.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    opt_d = Adam(D.parameters(), lr=cfg.lr_d, betas=cfg.betas)
    ref = I_s if cfg.percep_reference == "input" else I_t

    history = []
    for step in range(cfg.steps + 1):
        fake, gcache = G.forward(I_s, I_g)
        real_runs = D.forward(I_t)
        fake_runs = D.forward(fake)
        p_real = [feats[-1] for feats, _ in real_runs]
        p_fake = [feats[-1] for feats, _ in fake_runs]
        loss_d, loss_g = nb.gan_loss(p_real, p_fake)
        fm = sum(nb.feature_matching_loss(r[0], f[0]) for r, f in zip(real_runs, fake_runs))
        percep = nb.perceptual_loss(ext, fake, ref)
        total = nb.total_objective((loss_g, fm, percep), weights)
        history.append({"step": step, "loss_D": loss_d, "gan": loss_g, "fm": fm, "percep": percep,
                        "fm_percep": weights.lambda_FM * fm + weights.lambda_percep * percep, "total": total})
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite demo objective at step {step}")
        if step == cfg.steps:
            break

        # generator: adversarial + feature matching + perceptual, D held fixed
        gg = nb.gan_loss_grads(p_real, p_fake)
        fm_g = [nb.feature_matching_grads(r[0], f[0]) for r, f in zip(real_runs, fake_runs)]
        d_feats = []
        for k, (feats, _) in enumerate(fake_runs):
            dk = [weights.lambda_FM * g for g in fm_g[k]]
            dk[-1] = dk[-1] + gg["G_fake"][k]
            d_feats.append(dk)
        _, d_fake = D.backward(d_feats, fake_runs)
        d_fake = d_fake + weights.lambda_percep * nb.perceptual_loss_grad(ext, fake, ref)
        opt_g.step(G.backward(d_fake, gcache))

        # discriminator on the pre-update fake
        d_real_feats, d_fake_feats = [], []
        for k in range(len(D.discs)):
            dr = _zeros_like_feats(real_runs[k][0])
            df = _zeros_like_feats(fake_runs[k][0])
            dr[-1] = gg["D_real"][k]
            df[-1] = gg["D_fake"][k]
            d_real_feats.append(dr)
            d_fake_feats.append(df)
        grads_r, _ = D.backward(d_real_feats, real_runs)
        grads_f, _ = D.backward(d_fake_feats, fake_runs)
        opt_d.step({k: grads_r[k] + grads_f[k] for k in grads_r})
    return history

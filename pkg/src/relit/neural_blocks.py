"""Toy-scale forward/backward for the enhancement-stage blocks and losses.

Tensors are float64 numpy arrays laid out ``(batch, channels, height, width)``.
Every forward function has a matching backward that returns gradients in a
dict keyed by parameter or input name.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IN_EPS = 1e-5


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"{name} must be (batch, channels, height, width), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


# ---------------------------------------------------------------------------
# primitive layers

def conv2d(x, w, b):
    """3x3 (or kxk, odd) same-padded cross-correlation; returns ``(y, cols)``."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    y = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True) + b[None, :, None, None]
    return y, cols


def conv2d_backward(dy, cols, w, x_shape):
    k = w.shape[-1]
    p = k // 2
    dw = np.einsum("nohw,nchwij->ocij", dy, cols, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    n, c, h, wd = x_shape
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", dy, w[:, :, i, j], optimize=True)
    return dxp[:, :, p:p + h, p:p + wd], dw, db


def avg_pool(x, factor: int):
    if factor == 1:
        return x
    n, c, h, w = x.shape
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def avg_pool_backward(dy, factor: int):
    if factor == 1:
        return dy
    return np.repeat(np.repeat(dy, factor, axis=2), factor, axis=3) / (factor * factor)


def _resize_factor(src_hw, dst_hw):
    """Positive: average-pool factor; negative: nearest-upsample factor."""
    (sh, sw), (dh, dw) = src_hw, dst_hw
    if (sh, sw) == (dh, dw):
        return 1
    if sh % dh == 0 and sw % dw == 0 and sh // dh == sw // dw:
        return sh // dh
    if dh % sh == 0 and dw % sw == 0 and dh // sh == dw // sw:
        return -(dh // sh)
    raise ValueError(f"cannot resize {sh}x{sw} to {dh}x{dw} by an integer factor")


def resize(x, hw):
    f = _resize_factor(x.shape[2:], hw)
    if f >= 1:
        return avg_pool(x, f)
    return np.repeat(np.repeat(x, -f, axis=2), -f, axis=3)


def resize_backward(dy, src_hw):
    f = _resize_factor(src_hw, dy.shape[2:])
    if f >= 1:
        return avg_pool_backward(dy, f)
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // -f, -f, w // -f, -f).sum(axis=(3, 5))


def instance_norm(x, eps: float = IN_EPS):
    """Per-sample, per-channel normalization over space; returns ``(y, inv_std)``."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv


def instance_norm_backward(dy, y, inv):
    m_dy = dy.mean(axis=(2, 3), keepdims=True)
    m_dyy = (dy * y).mean(axis=(2, 3), keepdims=True)
    return inv * (dy - m_dy - y * m_dyy)


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# ---------------------------------------------------------------------------
# guidance-queried attention

class AvgPoolWarp:
    """Average-pool the guidance down to the feature grid (integer factor)."""

    def forward(self, guidance, hw):
        return resize(guidance, hw)

    def backward(self, d_warped, guidance_shape):
        return resize_backward(d_warped, guidance_shape[2:])


@dataclass
class AttentionBlock:
    """Queries from the warped guidance, keys and values from the input feature."""

    w_q: np.ndarray  # (Cg, D)
    w_k: np.ndarray  # (Cin, D)
    w_v: np.ndarray  # (Cin, D)
    scaled: bool = True  # divide logits by sqrt(D)
    warp: AvgPoolWarp = field(default_factory=AvgPoolWarp)

    def __post_init__(self):
        if self.w_q.shape[1] != self.w_k.shape[1] or self.w_k.shape[1] != self.w_v.shape[1]:
            raise ValueError("w_q, w_k and w_v must share the inner dimension D")
        if self.w_q.shape[1] < 1:
            raise ValueError("D must be positive")

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, c_guidance: int, c_in: int, dim: int, rng: np.random.Generator, scaled: bool = True):
        return cls(rng.standard_normal((c_guidance, dim)) / np.sqrt(c_guidance),
                   rng.standard_normal((c_in, dim)) / np.sqrt(c_in),
                   rng.standard_normal((c_in, dim)) / np.sqrt(c_in), scaled)

    def parameters(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention(block: AttentionBlock, feat, guidance):
    feat = as_tensor4(feat, "feat_in")
    guidance = as_tensor4(guidance, "guidance")
    n, c, h, w = feat.shape
    if guidance.shape[0] != n:
        raise ValueError("feature and guidance batch sizes differ")
    if c != block.w_k.shape[0] or guidance.shape[1] != block.w_q.shape[0]:
        raise ValueError("channel count does not match the block weights")
    warped = block.warp.forward(guidance, (h, w))
    if warped.shape[2:] != (h, w):
        raise ValueError("warped guidance does not match the feature grid")
    x = feat.reshape(n, c, h * w).transpose(0, 2, 1)  # (N, T, Cin)
    g = warped.reshape(n, warped.shape[1], h * w).transpose(0, 2, 1)  # (N, T, Cg)
    q, k, v = g @ block.w_q, x @ block.w_k, x @ block.w_v
    scale = 1.0 / np.sqrt(block.dim) if block.scaled else 1.0
    a = softmax_rows(q @ k.transpose(0, 2, 1) * scale)
    o = a @ v
    cache = dict(x=x, g=g, q=q, k=k, v=v, a=a, scale=scale, feat_shape=feat.shape, guidance_shape=guidance.shape)
    return o.transpose(0, 2, 1).reshape(n, block.dim, h, w), cache


def attention_forward(block: AttentionBlock, feat_in, guidance, return_attention: bool = False):
    """``softmax(Q K^T / sqrt(D)) V`` over spatial tokens; output is ``(N, D, h, w)``."""
    out, cache = _attention(block, feat_in, guidance)
    return (out, cache["a"]) if return_attention else out


def attention_backward(block: AttentionBlock, feat_in, guidance, upstream_grad) -> dict:
    _, c = _attention(block, feat_in, guidance)
    n, cin, h, w = c["feat_shape"]
    do = np.asarray(upstream_grad, dtype=float).reshape(n, block.dim, h * w).transpose(0, 2, 1)
    a, v, q, k, s = c["a"], c["v"], c["q"], c["k"], c["scale"]
    da = do @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * s
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dx = dk @ block.w_k.T + dv @ block.w_v.T
    dg = dq @ block.w_q.T
    d_warped = dg.transpose(0, 2, 1).reshape(n, -1, h, w)
    return {
        "w_q": np.einsum("ntc,ntd->cd", c["g"], dq),
        "w_k": np.einsum("ntc,ntd->cd", c["x"], dk),
        "w_v": np.einsum("ntc,ntd->cd", c["x"], dv),
        "feat_in": dx.transpose(0, 2, 1).reshape(n, cin, h, w),
        "guidance": block.warp.backward(d_warped, c["guidance_shape"]),
    }


# ---------------------------------------------------------------------------
# Multi-SPADE

@dataclass
class SpadeProducer:
    """Condition -> tanh(conv) hidden -> separate convs for scale (eta) and shift (phi)."""

    w_hidden: np.ndarray  # (Ch, Ccond, 3, 3)
    b_hidden: np.ndarray
    w_eta: np.ndarray  # (C, Ch, 3, 3)
    b_eta: np.ndarray
    w_phi: np.ndarray  # (C, Ch, 3, 3)
    b_phi: np.ndarray

    @classmethod
    def init(cls, c_cond: int, c_feat: int, c_hidden: int, rng: np.random.Generator, gain: float = 1.0):
        def w(o, i):
            return gain * rng.standard_normal((o, i, 3, 3)) / np.sqrt(9 * i)

        return cls(w(c_hidden, c_cond), np.zeros(c_hidden), w(c_feat, c_hidden), np.zeros(c_feat),
                   w(c_feat, c_hidden), np.zeros(c_feat))

    @classmethod
    def zero_output(cls, c_cond: int, c_feat: int, c_hidden: int, rng: np.random.Generator):
        p = cls.init(c_cond, c_feat, c_hidden, rng)
        for a in (p.w_eta, p.b_eta, p.w_phi, p.b_phi):
            a[...] = 0.0
        return p

    def parameters(self) -> dict:
        return {"w_hidden": self.w_hidden, "b_hidden": self.b_hidden, "w_eta": self.w_eta,
                "b_eta": self.b_eta, "w_phi": self.w_phi, "b_phi": self.b_phi}

    def forward(self, cond, hw):
        r = resize(cond, hw)
        pre, cols_h = conv2d(r, self.w_hidden, self.b_hidden)
        hid = np.tanh(pre)
        eta, cols_e = conv2d(hid, self.w_eta, self.b_eta)
        phi, _ = conv2d(hid, self.w_phi, self.b_phi)
        return eta, phi, dict(r=r, cols_h=cols_h, hid=hid, cols_e=cols_e, cond_shape=cond.shape)

    def backward(self, d_eta, d_phi, c):
        dh1, dw_eta, db_eta = conv2d_backward(d_eta, c["cols_e"], self.w_eta, c["hid"].shape)
        dh2, dw_phi, db_phi = conv2d_backward(d_phi, c["cols_e"], self.w_phi, c["hid"].shape)
        dpre = (dh1 + dh2) * (1.0 - c["hid"] ** 2)
        dr, dw_h, db_h = conv2d_backward(dpre, c["cols_h"], self.w_hidden, c["r"].shape)
        grads = {"w_hidden": dw_h, "b_hidden": db_h, "w_eta": dw_eta, "b_eta": db_eta,
                 "w_phi": dw_phi, "b_phi": db_phi}
        return grads, resize_backward(dr, c["cond_shape"][2:])


@dataclass
class MultiSpadeBlock:
    """Two cascaded SPADE layers: the first conditioned on the guidance, the second on the input."""

    guidance_branch: SpadeProducer
    input_branch: SpadeProducer

    @classmethod
    def init(cls, c_feat: int, c_hidden: int, rng: np.random.Generator, c_cond: int = 3, gain: float = 1.0):
        return cls(SpadeProducer.init(c_cond, c_feat, c_hidden, rng, gain),
                   SpadeProducer.init(c_cond, c_feat, c_hidden, rng, gain))

    def parameters(self) -> dict:
        out = {f"guidance.{k}": v for k, v in self.guidance_branch.parameters().items()}
        out.update({f"input.{k}": v for k, v in self.input_branch.parameters().items()})
        return out


def _multi_spade(block: MultiSpadeBlock, feat, I_g, I_s):
    feat = as_tensor4(feat, "feat")
    I_g = as_tensor4(I_g, "I_g")
    I_s = as_tensor4(I_s, "I_s")
    hw = feat.shape[2:]
    x1, inv1 = instance_norm(feat)
    eta_g, phi_g, cg = block.guidance_branch.forward(I_g, hw)
    y1 = x1 * (1.0 + eta_g) + phi_g
    x2, inv2 = instance_norm(y1)
    eta_s, phi_s, cs = block.input_branch.forward(I_s, hw)
    out = x2 * (1.0 + eta_s) + phi_s
    return out, dict(x1=x1, inv1=inv1, eta_g=eta_g, cg=cg, x2=x2, inv2=inv2, eta_s=eta_s, cs=cs)


def multi_spade_forward(block: MultiSpadeBlock, feat, I_g, I_s):
    """``IN(IN(feat) (1 + eta_g) + phi_g) (1 + eta_s) + phi_s``."""
    return _multi_spade(block, feat, I_g, I_s)[0]


def multi_spade_backward(block: MultiSpadeBlock, feat, I_g, I_s, upstream_grad) -> dict:
    _, c = _multi_spade(block, feat, I_g, I_s)
    dout = np.asarray(upstream_grad, dtype=float)
    dx2 = dout * (1.0 + c["eta_s"])
    gs, dI_s = block.input_branch.backward(dout * c["x2"], dout, c["cs"])
    dy1 = instance_norm_backward(dx2, c["x2"], c["inv2"])
    dx1 = dy1 * (1.0 + c["eta_g"])
    gg, dI_g = block.guidance_branch.backward(dy1 * c["x1"], dy1, c["cg"])
    grads = {f"guidance.{k}": v for k, v in gg.items()}
    grads.update({f"input.{k}": v for k, v in gs.items()})
    grads.update(feat=instance_norm_backward(dx1, c["x1"], c["inv1"]), I_g=dI_g, I_s=dI_s)
    return grads


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossWeights:
    lambda_FM: float = 10.0
    lambda_percep: float = 10.0

    def __post_init__(self):
        if self.lambda_FM < 0 or self.lambda_percep < 0:
            raise ValueError("loss weights must be >= 0")


def _probs(d, from_logits: bool):
    d = np.asarray(d, dtype=float)
    if from_logits:
        return sigmoid(d)
    if np.any(d <= 0) or np.any(d >= 1):
        raise ValueError("discriminator outputs must lie strictly inside (0, 1)")
    return d


def _log_sig(x):
    return -np.logaddexp(0.0, -x)


def gan_loss(d_outputs_real, d_outputs_fake, from_logits: bool = False):
    """Multi-scale adversarial losses, one patch map per scale, mean-reduced per scale.

    ``loss_D = sum_k -(mean log D_k(real) + mean log(1 - D_k(fake)))`` and the
    non-saturating generator term ``loss_G = sum_k -mean log D_k(fake)``.
    """
    loss_d = loss_g = 0.0
    for real, fake in zip(d_outputs_real, d_outputs_fake, strict=True):
        if from_logits:
            real, fake = np.asarray(real, dtype=float), np.asarray(fake, dtype=float)
            lr, lf, l1f = _log_sig(real), _log_sig(fake), _log_sig(-fake)
        else:
            pr, pf = _probs(real, False), _probs(fake, False)
            lr, lf, l1f = np.log(pr), np.log(pf), np.log1p(-pf)
        loss_d += -(lr.mean() + l1f.mean())
        loss_g += -lf.mean()
    return float(loss_d), float(loss_g)


def gan_loss_grads(d_outputs_real, d_outputs_fake, from_logits: bool = False) -> dict:
    """Gradients of ``loss_D`` w.r.t. real and fake outputs and of ``loss_G`` w.r.t. fake outputs."""
    d_real, d_fake_d, d_fake_g = [], [], []
    for real, fake in zip(d_outputs_real, d_outputs_fake, strict=True):
        real, fake = np.asarray(real, dtype=float), np.asarray(fake, dtype=float)
        if from_logits:
            d_real.append(-(1.0 - sigmoid(real)) / real.size)
            d_fake_d.append(sigmoid(fake) / fake.size)
            d_fake_g.append(-(1.0 - sigmoid(fake)) / fake.size)
        else:
            d_real.append(-1.0 / (real * real.size))
            d_fake_d.append(1.0 / ((1.0 - fake) * fake.size))
            d_fake_g.append(-1.0 / (fake * fake.size))
    return {"D_real": d_real, "D_fake": d_fake_d, "G_fake": d_fake_g}


def feature_matching_loss(feats_real, feats_fake) -> float:
    """``sum_i mean |fake_i - real_i|`` over the layer list of one discriminator."""
    total = 0.0
    for i, (r, f) in enumerate(zip(feats_real, feats_fake, strict=True)):
        r, f = np.asarray(r, dtype=float), np.asarray(f, dtype=float)
        if r.shape != f.shape:
            raise ValueError(f"layer {i}: shape mismatch {r.shape} vs {f.shape}")
        total += np.abs(f - r).sum() / r.size
    return float(total)


def feature_matching_grads(feats_real, feats_fake) -> list:
    """Gradient w.r.t. each fake layer (sign(0) = 0); the real-side gradient is its negative."""
    return [np.sign(np.asarray(f, float) - np.asarray(r, float)) / np.size(r)
            for r, f in zip(feats_real, feats_fake, strict=True)]


class FeatureExtractor:
    """Fixed stack of same-padded 3x3 conv + tanh layers; each layer's output is a feature.

    Stands in for the first layers of a pretrained classifier.  With
    ``num_layers=0`` the extractor returns the image itself as its only feature.
    """

    def __init__(self, num_layers: int = 5, channels: int = 4, in_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.layers = []
        c_in = in_channels
        for _ in range(num_layers):
            w = rng.standard_normal((channels, c_in, 3, 3)) / np.sqrt(9 * c_in)
            b = 0.1 * rng.standard_normal(channels)
            self.layers.append((w, b))
            c_in = channels

    def _run(self, img):
        x = as_tensor4(img, "image")
        if not self.layers:
            return [x], []
        feats, caches = [], []
        for w, b in self.layers:
            pre, cols = conv2d(x, w, b)
            caches.append((cols, x.shape))
            x = np.tanh(pre)
            feats.append(x)
        return feats, caches

    def features(self, img) -> list:
        return self._run(img)[0]

    def backward(self, img, d_feats) -> np.ndarray:
        feats, caches = self._run(img)
        if not self.layers:
            return np.asarray(d_feats[0], dtype=float)
        dx = np.zeros_like(feats[-1])
        for i in range(len(self.layers) - 1, -1, -1):
            dx = dx + d_feats[i]
            dpre = dx * (1.0 - feats[i] ** 2)
            cols, x_shape = caches[i]
            dx, _, _ = conv2d_backward(dpre, cols, self.layers[i][0], x_shape)
        return dx


def perceptual_loss(extractor: FeatureExtractor, img_a, img_b) -> float:
    """``sum_i mean |F_i(a) - F_i(b)|`` over the extractor's layers."""
    return feature_matching_loss(extractor.features(img_b), extractor.features(img_a))


def perceptual_loss_grad(extractor: FeatureExtractor, img_a, img_b) -> np.ndarray:
    """Gradient of :func:`perceptual_loss` w.r.t. ``img_a``."""
    d_feats = feature_matching_grads(extractor.features(img_b), extractor.features(img_a))
    return extractor.backward(img_a, d_feats)


def total_objective(parts, weights: LossWeights = LossWeights()) -> float:
    """``GAN + lambda_FM * FM + lambda_percep * percep`` from ``parts = (gan, fm, percep)``."""
    if isinstance(parts, dict):
        gan, fm, percep = parts["gan"], parts["fm"], parts["percep"]
    else:
        gan, fm, percep = parts
    vals = np.array([gan, fm, percep], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("loss parts must be finite")
    return float(gan + weights.lambda_FM * fm + weights.lambda_percep * percep)

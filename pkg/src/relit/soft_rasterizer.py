"""Soft rasterization of SH-lit meshes with analytic lighting and albedo gradients.

Pixel i aggregates every triangle j with weight

    w_j = d_j exp(z_j / gamma) / (sum_k d_k exp(z_k / gamma) + exp(z_b / gamma))

where ``d_j = sigmoid(+-dist^2 / sigma)`` (positive inside the projected
triangle), ``z_j`` is the barycentric-interpolated normalized nearness in
[0, 1] and ``z_b`` the background nearness.  Weights depend on geometry only,
so a :class:`RasterCache` built once can be re-shaded under any lighting.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .morphable_model import FaceCoefficients, Mesh, MorphableModel, evaluate_model
from .sh_lighting import ShCoeffs, sh_basis

_AREA_EPS = 1e-12


@dataclass(frozen=True)
class Camera:
    """Pinhole or orthographic camera looking down -z from ``(0, 0, eye_distance)``.

    Image rows grow downward.  ``scale`` is pixels per model unit for the
    orthographic camera and the focal length in pixels for the perspective one.
    ``near``/``far`` are camera-space depths that map to nearness 1 and 0.
    """

    height: int
    width: int
    kind: str = "orthographic"
    scale: float | None = None
    cx: float | None = None
    cy: float | None = None
    eye_distance: float = 3.0
    near: float = 1.0
    far: float = 5.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be at least 1x1")
        if self.kind not in ("orthographic", "perspective"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.scale is None:
            default = 0.45 * min(self.height, self.width)
            if self.kind == "perspective":
                default *= self.eye_distance - 1.0
            object.__setattr__(self, "scale", default)
        if self.scale <= 0:
            raise ValueError("scale/focal length must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        if not self.far > self.near:
            raise ValueError("far must exceed near")

    def project(self, points: np.ndarray):
        """Return screen coordinates ``(N, 2)`` in pixels and camera depth ``(N,)``."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        depth = self.eye_distance - points[:, 2]
        if self.kind == "orthographic":
            f = np.full_like(depth, self.scale)
        else:
            if np.any(depth <= 0):
                raise ValueError("points behind the perspective camera")
            f = self.scale / depth
        xy = np.stack([self.cx + f * points[:, 0], self.cy - f * points[:, 1]], axis=1)
        return xy, depth

    def nearness(self, depth: np.ndarray) -> np.ndarray:
        return (self.far - depth) / (self.far - self.near)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("height", "width", "kind", "scale", "cx", "cy", "eye_distance", "near", "far")}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass(frozen=True)
class RasterConfig:
    sigma: float = 0.5  # pixels^2
    gamma_depth: float = 1e-2
    background_color: tuple = (0.0, 0.0, 0.0)
    background_nearness: float = 1e-3
    weight_floor: float = 1e-15  # entries below this weight are dropped

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.gamma_depth > 0:
            raise ValueError("gamma_depth must be positive")
        bg = tuple(float(c) for c in self.background_color)
        if len(bg) != 3 or min(bg) < 0 or max(bg) > 1:
            raise ValueError("background_color must be an rgb triple in [0, 1]")
        object.__setattr__(self, "background_color", bg)

    @classmethod
    def for_camera(cls, camera: Camera, **kw) -> "RasterConfig":
        """Default softness ``1e-4 * min(H, W)^2``."""
        kw.setdefault("sigma", 1e-4 * min(camera.height, camera.width) ** 2)
        return cls(**kw)


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    coverage: np.ndarray | None = None  # (H, W)

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class RasterCache:
    """Sparse per-(pixel, triangle) aggregation entries, sorted by pixel then triangle."""

    height: int
    width: int
    num_vertices: int
    pix: np.ndarray  # (E,) flat pixel index
    tri: np.ndarray  # (E,)
    weight: np.ndarray  # (E,)
    bary: np.ndarray  # (E, 3)
    verts: np.ndarray  # (E, 3) vertex ids of the triangle
    normal: np.ndarray  # (E, 3) interpolated unit normal
    basis: np.ndarray  # (E, 9)
    albedo: np.ndarray  # (E, 3)
    bg_weight: np.ndarray  # (P,)
    background: np.ndarray  # (3,)

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def coverage(self) -> np.ndarray:
        return np.bincount(self.pix, weights=self.weight, minlength=self.num_pixels).reshape(self.height, self.width)

    def weight_sums(self) -> np.ndarray:
        """Sum of triangle and background weights per pixel (1 up to pruning)."""
        return self.coverage().ravel() + self.bg_weight


@dataclass(frozen=True)
class RenderResult:
    image: RasterImage
    radiance: np.ndarray  # (H, W, 3) before the [0, 1] clamp
    clamp_mask: np.ndarray  # (H, W, 3) True where the clamp changed the value
    d_sh: np.ndarray  # (H, W, 3, 27): d radiance[c] / d sh.coeffs.ravel()
    d_albedo: np.ndarray  # (H, W, V, 3): d radiance[c] / d albedo[v, c]


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _rasterize_rows(rows, tri_xy, tri_near, area, cfg: RasterConfig, width: int):
    """Aggregation weights and barycentrics for pixel rows ``rows`` against all triangles."""
    cols = np.arange(width)
    r, c = np.meshgrid(rows, cols, indexing="ij")
    px = (c + 0.5).ravel()[:, None]
    py = (r + 0.5).ravel()[:, None]
    pcount = px.shape[0]
    nf = tri_xy.shape[0]
    valid = np.abs(area) > _AREA_EPS
    if nf == 0 or not valid.any():
        z = np.zeros((0,))
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), z,
                np.zeros((0, 3)), np.ones(pcount))

    ax, ay = tri_xy[None, :, 0, 0], tri_xy[None, :, 0, 1]
    bx, by = tri_xy[None, :, 1, 0], tri_xy[None, :, 1, 1]
    cx, cy = tri_xy[None, :, 2, 0], tri_xy[None, :, 2, 1]

    # signed sub-areas opposite each vertex, normalized by the signed total
    safe_area = np.where(valid, area, 1.0)[None, :]
    l0 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / safe_area
    l1 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / safe_area
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)

    d2 = None
    for (sx, sy), (ex, ey) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)), ((cx, cy), (ax, ay))):
        vx, vy = ex - sx, ey - sy
        t = np.clip(((px - sx) * vx + (py - sy) * vy) / np.maximum(vx * vx + vy * vy, _AREA_EPS), 0.0, 1.0)
        dx, dy = px - sx - t * vx, py - sy - t * vy
        e = dx * dx + dy * dy
        d2 = e if d2 is None else np.minimum(d2, e)

    log_d = _log_sigmoid(np.where(inside, d2, -d2) / cfg.sigma)

    bary = np.stack([l0, l1, l2], axis=-1)
    bary = np.clip(bary, 0.0, 1.0)
    bary = bary / bary.sum(axis=-1, keepdims=True)
    z = (bary * tri_near[None, :, :]).sum(axis=-1)

    logits = np.where(valid[None, :], log_d + z / cfg.gamma_depth, -np.inf)
    bg_logit = cfg.background_nearness / cfg.gamma_depth
    m = np.maximum(logits.max(axis=1), bg_logit)
    e = np.exp(logits - m[:, None])
    eb = np.exp(bg_logit - m)
    denom = e.sum(axis=1) + eb
    w = e / denom[:, None]
    bg_w = eb / denom

    keep = w > cfg.weight_floor
    pi, ti = np.nonzero(keep)
    return pi, ti, w[pi, ti], bary[pi, ti], bg_w


def build_cache(mesh: Mesh, camera: Camera, cfg: RasterConfig, threads: int = 1,
                max_chunk: int = 1 << 19) -> RasterCache:
    """Precompute geometry-dependent aggregation entries.

    Work is split into blocks of whole image rows; every quantity of a pixel
    is computed from that pixel's row of the (pixel, triangle) grid alone, so
    results are bit-identical for any ``threads`` value.
    """
    h, w = camera.height, camera.width
    faces = np.asarray(mesh.faces, dtype=np.int64).reshape(-1, 3)
    nf = faces.shape[0]
    xy, depth = camera.project(mesh.positions)
    near = camera.nearness(depth)
    tri_xy = xy[faces] if nf else np.zeros((0, 3, 2))
    tri_near = near[faces] if nf else np.zeros((0, 3))
    if nf:
        a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    else:
        area = np.zeros(0)

    rows_per_block = max(1, min(h, max_chunk // max(1, w * max(nf, 1))))
    blocks = [np.arange(s, min(h, s + rows_per_block)) for s in range(0, h, rows_per_block)]

    def run(rows):
        return _rasterize_rows(rows, tri_xy, tri_near, area, cfg, w)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(rows) for rows in blocks]

    pix, tri, wts, bary, bg = [], [], [], [], []
    for rows, (pi, ti, wi, bi, bgi) in zip(blocks, parts):
        pix.append(pi + rows[0] * w)
        tri.append(ti)
        wts.append(wi)
        bary.append(bi)
        bg.append(bgi)
    pix = np.concatenate(pix).astype(np.int64)
    tri = np.concatenate(tri).astype(np.int64)
    wts = np.concatenate(wts)
    bary = np.concatenate(bary).reshape(-1, 3)
    bg_weight = np.concatenate(bg)

    verts = faces[tri] if nf else np.zeros((0, 3), dtype=np.int64)
    normals = np.asarray(mesh.normals, dtype=float)
    albedo = np.asarray(mesh.albedo, dtype=float)
    n = np.einsum("ek,ekd->ed", bary, normals[verts]) if len(tri) else np.zeros((0, 3))
    length = np.linalg.norm(n, axis=1)
    n = np.where(length[:, None] > 1e-12, n / np.maximum(length, 1e-12)[:, None], np.array([0.0, 0.0, 1.0]))
    alb = np.einsum("ek,ekd->ed", bary, albedo[verts]) if len(tri) else np.zeros((0, 3))
    return RasterCache(
        height=h, width=w, num_vertices=mesh.num_vertices, pix=pix, tri=tri, weight=wts, bary=bary,
        verts=verts, normal=n, basis=sh_basis(n, check=False), albedo=alb, bg_weight=bg_weight,
        background=np.asarray(cfg.background_color, dtype=float),
    )


def _segment_sum(cache: RasterCache, values: np.ndarray) -> np.ndarray:
    """Sum entry rows into their pixels in entry order; returns ``(P, ...)``."""
    out = np.zeros((cache.num_pixels,) + values.shape[1:])
    if len(cache.pix) == 0:
        return out
    starts = np.flatnonzero(np.r_[True, cache.pix[1:] != cache.pix[:-1]])
    out[cache.pix[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def shade_cache(cache: RasterCache, sh: ShCoeffs):
    """Return ``(radiance (H, W, 3), lit (E, 3) bool, irradiance (E, 3))`` for cached geometry."""
    irr = cache.basis @ sh.coeffs.T
    lit = irr >= 0.0
    color = cache.albedo * np.where(lit, irr, 0.0)
    rad = _segment_sum(cache, cache.weight[:, None] * color)
    rad += cache.bg_weight[:, None] * cache.background[None, :]
    return rad.reshape(cache.height, cache.width, 3), lit, irr


def sh_vjp(cache: RasterCache, lit: np.ndarray, grad_radiance: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of ``sum(grad_radiance * radiance)`` w.r.t. the 3x9 SH."""
    g = grad_radiance.reshape(-1, 3)[cache.pix]  # (E, 3)
    s = g * cache.weight[:, None] * cache.albedo * lit
    return s.T @ cache.basis


def to_image(cache: RasterCache, rad: np.ndarray) -> RasterImage:
    return RasterImage(np.clip(rad, 0.0, 1.0), np.clip(cache.coverage(), 0.0, 1.0))


def render(mesh: Mesh, camera: Camera, sh: ShCoeffs, cfg: RasterConfig, threads: int = 1) -> RasterImage:
    cache = build_cache(mesh, camera, cfg, threads=threads)
    rad, _, _ = shade_cache(cache, sh)
    return to_image(cache, rad)


def render_with_grads(mesh: Mesh, camera: Camera, sh: ShCoeffs, cfg: RasterConfig,
                      threads: int = 1) -> RenderResult:
    """Render and return dense Jacobians of the unclamped radiance.

    At ``sh . Y(n) = 0`` the floor's subgradient is taken as 1, so an all-zero
    lighting still reports the ``albedo * w * basis`` structure.
    """
    cache = build_cache(mesh, camera, cfg, threads=threads)
    rad, lit, irr = shade_cache(cache, sh)
    p = cache.num_pixels

    per_entry = (cache.weight[:, None] * cache.albedo * lit)[:, :, None] * cache.basis[:, None, :]  # (E, 3, 9)
    d_sh_block = _segment_sum(cache, per_entry)  # (P, 3, 9)
    d_sh = np.zeros((p, 3, 3, 9))
    for c in range(3):
        d_sh[:, c, c, :] = d_sh_block[:, c, :]
    d_sh = d_sh.reshape(cache.height, cache.width, 3, 27)

    d_alb = np.zeros((p, cache.num_vertices, 3))
    shading = cache.weight[:, None] * np.where(lit, irr, 0.0)  # (E, 3)
    for k in range(3):
        np.add.at(d_alb, (cache.pix, cache.verts[:, k]), cache.bary[:, k:k + 1] * shading)
    d_alb = d_alb.reshape(cache.height, cache.width, cache.num_vertices, 3)

    image = to_image(cache, rad)
    return RenderResult(image, rad, image.pixels != rad, d_sh, d_alb)


def render_guidance(model: MorphableModel, coeffs: FaceCoefficients, camera: Camera, sh: ShCoeffs,
                    cfg: RasterConfig, threads: int = 1) -> RasterImage:
    """Evaluate the face model and render it; yields the guidance or reconstruction image."""
    return render(evaluate_model(model, coeffs), camera, sh, cfg, threads=threads)


def gbuffer(cache: RasterCache):
    """Weight-averaged normal map ``(H, W, 3)``, albedo map ``(H, W, 3)`` and coverage ``(H, W)``."""
    cov = cache.coverage()
    n = _segment_sum(cache, cache.weight[:, None] * cache.normal)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(length > 1e-12, n / np.maximum(length, 1e-12), np.array([0.0, 0.0, 1.0]))
    a = _segment_sum(cache, cache.weight[:, None] * cache.albedo)
    a = a / np.maximum(cov.reshape(-1, 1), 1e-12)
    shape = (cache.height, cache.width, 3)
    return n.reshape(shape), np.clip(a, 0.0, 1.0).reshape(shape), cov

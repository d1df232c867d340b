"""Linear morphable face model: evaluation, synthetic assets, normals and file I/O.

Shape and albedo are mean + basis @ coefficients.  Bases are stored as
``(3V, N)`` matrices whose rows are laid out vertex-major (x0, y0, z0, x1, ...).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray  # (V, 3)
    mean_albedo: np.ndarray  # (V, 3) in [0, 1]
    basis_id: np.ndarray  # (3V, Nid)
    basis_exp: np.ndarray  # (3V, Nexp)
    basis_tex: np.ndarray  # (3V, Ntex)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        v = self.mean_shape.shape[0]
        if self.mean_shape.shape != (v, 3) or self.mean_albedo.shape != (v, 3):
            raise ValueError("mean_shape and mean_albedo must both be (V, 3)")
        for name in ("basis_id", "basis_exp", "basis_tex"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != 3 * v:
                raise ValueError(f"{name} must have 3V={3 * v} rows, got shape {b.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")
        if np.any(self.mean_albedo < 0) or np.any(self.mean_albedo > 1):
            raise ValueError("mean_albedo entries must lie in [0, 1]")
        for arr in (self.mean_shape, self.mean_albedo, self.basis_id, self.basis_exp, self.basis_tex, self.faces):
            arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def n_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_tex(self) -> int:
        return self.basis_tex.shape[1]


@dataclass(frozen=True)
class FaceCoefficients:
    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or not np.isclose(np.linalg.det(r), 1.0, atol=1e-8):
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def zeros(cls, model: MorphableModel) -> "FaceCoefficients":
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp), np.zeros(model.n_tex))


@dataclass(frozen=True)
class Mesh:
    positions: np.ndarray  # (V, 3)
    albedo: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "Mesh":
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros((0, 3), dtype=np.int64))


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the quaternion is normalized first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def compute_vertex_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals.

    Each face contributes its unnormalized cross product (twice its area times
    the unit normal) to its three vertices.  Vertices whose accumulated normal
    vanishes, including vertices referenced by no face, receive the mesh's
    average normal direction.
    """
    positions = np.asarray(positions, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    acc = np.zeros_like(positions)
    if len(faces):
        p0, p1, p2 = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
        fn = np.cross(p1 - p0, p2 - p0)
        for k in range(3):
            np.add.at(acc, faces[:, k], fn)
        avg = fn.sum(axis=0)
    else:
        avg = np.zeros(3)
    avg_norm = np.linalg.norm(avg)
    avg = avg / avg_norm if avg_norm > 1e-12 else np.array([0.0, 0.0, 1.0])

    lengths = np.linalg.norm(acc, axis=1)
    scale = np.abs(positions).max() if positions.size else 1.0
    degenerate = lengths <= 1e-12 * max(scale, 1.0) ** 2
    out = np.empty_like(acc)
    out[~degenerate] = acc[~degenerate] / lengths[~degenerate, None]
    out[degenerate] = avg
    return out


def evaluate_model(model: MorphableModel, coeffs: FaceCoefficients) -> Mesh:
    """Evaluate shape and albedo, apply the rigid pose and recompute normals."""
    for name, basis, vec in (
        ("basis_id", model.basis_id, coeffs.alpha),
        ("basis_exp", model.basis_exp, coeffs.beta),
        ("basis_tex", model.basis_tex, coeffs.zeta),
    ):
        if np.shape(vec) != (basis.shape[1],):
            raise ValueError(
                f"{name} has {basis.shape[1]} columns but the coefficient vector has shape {np.shape(vec)}"
            )
    v = model.num_vertices
    shape = model.mean_shape + (model.basis_id @ coeffs.alpha + model.basis_exp @ coeffs.beta).reshape(v, 3)
    albedo = np.clip(model.mean_albedo + (model.basis_tex @ coeffs.zeta).reshape(v, 3), 0.0, 1.0)
    rot = np.asarray(coeffs.rotation, dtype=float)
    positions = shape @ rot.T + np.asarray(coeffs.translation, dtype=float)
    faces = np.asarray(model.faces)
    return Mesh(positions, albedo, compute_vertex_normals(positions, faces), faces)


def grid_faces(n: int) -> np.ndarray:
    """Two counter-clockwise triangles per quad of an n x n vertex grid (row-major, y up)."""
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b, c, d = a + 1, a + n, a + n + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if cols == 0:
        return np.zeros((rows, 0))
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_synthetic_model(
    num_vertices_per_axis: int,
    seed: int,
    n_id: int = 10,
    n_exp: int = 5,
    n_tex: int = 10,
    extent: float = 0.7,
) -> MorphableModel:
    """Deterministic sphere-cap "face blob" with random orthonormal bases.

    Vertices form a regular grid over ``[-extent, extent]^2`` lifted onto the
    unit sphere (z = sqrt(1 - x^2 - y^2)), so the cap faces +z.  The three
    bases share one orthonormal frame, which keeps every pair of basis columns
    orthogonal.
    """
    n = int(num_vertices_per_axis)
    if n < 3:
        raise ValueError("num_vertices_per_axis must be >= 3")
    if not 0 < extent < 1 / np.sqrt(2):
        raise ValueError("extent must lie in (0, 1/sqrt(2)) so the grid stays on the sphere")
    rng = np.random.default_rng(seed)
    u = np.linspace(-extent, extent, n)
    x, y = np.meshgrid(u, u)  # row index follows y
    z = np.sqrt(1.0 - x**2 - y**2)
    mean_shape = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    v = n * n
    skin = np.array([0.78, 0.58, 0.48])
    r2 = (x**2 + y**2).ravel()
    mean_albedo = skin[None, :] * (1.0 - 0.15 * r2[:, None] / (2 * extent**2))
    mean_albedo = np.clip(mean_albedo + 0.02 * rng.standard_normal((v, 3)), 0.05, 0.95)

    rows = 3 * v
    n_id, n_exp, n_tex = (min(k, rows) for k in (n_id, n_exp, n_tex))
    shape_cols = min(n_id + n_exp, rows)
    shape_basis = _orthonormal_columns(rng, rows, shape_cols)
    basis_id = shape_basis[:, :n_id]
    basis_exp = shape_basis[:, n_id:shape_cols]
    if basis_exp.shape[1] < n_exp:
        basis_exp = np.hstack([basis_exp, np.zeros((rows, n_exp - basis_exp.shape[1]))])
    basis_tex = _orthonormal_columns(rng, rows, n_tex)
    return MorphableModel(mean_shape, mean_albedo, basis_id, basis_exp, basis_tex, grid_faces(n))


# ---------------------------------------------------------------------------
# JSON / OBJ

def model_to_dict(model: MorphableModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "morphable_model",
        "num_vertices": model.num_vertices,
        "num_faces": int(model.faces.shape[0]),
        "n_id": model.n_id,
        "n_exp": model.n_exp,
        "n_tex": model.n_tex,
        "mean_shape": model.mean_shape.tolist(),
        "mean_albedo": model.mean_albedo.tolist(),
        "basis_id": model.basis_id.tolist(),
        "basis_exp": model.basis_exp.tolist(),
        "basis_tex": model.basis_tex.tolist(),
        "faces": model.faces.tolist(),
    }


def model_from_dict(d: dict) -> MorphableModel:
    v = int(d["num_vertices"])

    def mat(key, cols):
        a = np.asarray(d[key], dtype=float)
        return a.reshape(3 * v, cols) if a.size == 0 else a

    model = MorphableModel(
        np.asarray(d["mean_shape"], dtype=float).reshape(v, 3),
        np.asarray(d["mean_albedo"], dtype=float).reshape(v, 3),
        mat("basis_id", int(d["n_id"])),
        mat("basis_exp", int(d["n_exp"])),
        mat("basis_tex", int(d["n_tex"])),
        np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
    )
    if (model.n_id, model.n_exp, model.n_tex) != (int(d["n_id"]), int(d["n_exp"]), int(d["n_tex"])):
        raise ValueError("basis column counts disagree with the declared n_id/n_exp/n_tex")
    if model.faces.shape[0] != int(d["num_faces"]):
        raise ValueError("face count disagrees with num_faces")
    return model


def coeffs_to_dict(c: FaceCoefficients) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "face_coefficients",
        "n_id": int(len(c.alpha)),
        "n_exp": int(len(c.beta)),
        "n_tex": int(len(c.zeta)),
        "alpha": np.asarray(c.alpha).tolist(),
        "beta": np.asarray(c.beta).tolist(),
        "zeta": np.asarray(c.zeta).tolist(),
        "pose": {
            "rotation": np.asarray(c.rotation).tolist(),
            "translation": np.asarray(c.translation).tolist(),
        },
    }


def coeffs_from_dict(d: dict) -> FaceCoefficients:
    pose = d.get("pose", {})
    if "quaternion" in pose:
        rot = quaternion_to_matrix(pose["quaternion"])
    else:
        rot = np.asarray(pose.get("rotation", np.eye(3)), dtype=float)
    alpha = np.asarray(d["alpha"], dtype=float)
    beta = np.asarray(d["beta"], dtype=float)
    zeta = np.asarray(d["zeta"], dtype=float)
    for key, vec in (("n_id", alpha), ("n_exp", beta), ("n_tex", zeta)):
        if key in d and int(d[key]) != len(vec):
            raise ValueError(f"{key}={d[key]} but the vector has length {len(vec)}")
    return FaceCoefficients(alpha, beta, zeta, rot, np.asarray(pose.get("translation", np.zeros(3)), dtype=float))


def dumps(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=1)


def save_model(model: MorphableModel, path) -> None:
    Path(path).write_text(dumps(model_to_dict(model)))


def load_model(path) -> MorphableModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def save_coeffs(coeffs: FaceCoefficients, path) -> None:
    Path(path).write_text(dumps(coeffs_to_dict(coeffs)))


def load_coeffs(path) -> FaceCoefficients:
    return coeffs_from_dict(json.loads(Path(path).read_text()))


def write_obj(mesh: Mesh, path) -> None:
    lines = []
    for p, a in zip(mesh.positions, mesh.albedo):
        lines.append("v {:.9g} {:.9g} {:.9g} {:.9g} {:.9g} {:.9g}".format(*p, *a))
    for n in mesh.normals:
        lines.append("vn {:.9g} {:.9g} {:.9g}".format(*n))
    for f in mesh.faces:
        lines.append("f {0}//{0} {1}//{1} {2}//{2}".format(*(np.asarray(f) + 1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    """Read positions, optional per-vertex colors and triangular faces.

    Normals are always recomputed from the geometry; polygons with more than
    three vertices are fan-triangulated.
    """
    pos, col, faces = [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(t) for t in parts[1:]]
            pos.append(vals[:3])
            col.append(vals[3:6] if len(vals) >= 6 else [1.0, 1.0, 1.0])
        elif parts[0] == "f":
            idx = [int(t.split("/")[0]) for t in parts[1:]]
            idx = [i - 1 if i > 0 else len(pos) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    positions = np.asarray(pos, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    albedo = np.clip(np.asarray(col, dtype=float).reshape(-1, 3), 0.0, 1.0)
    return Mesh(positions, albedo, compute_vertex_normals(positions, faces), faces)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from relit.morphable_model import (
    FaceCoefficients,
    Mesh,
    coeffs_from_dict,
    coeffs_to_dict,
    compute_vertex_normals,
    dumps,
    evaluate_model,
    load_model,
    make_synthetic_model,
    model_from_dict,
    model_to_dict,
    quaternion_to_matrix,
    read_obj,
    save_model,
    write_obj,
)


def test_zero_coefficients_give_mean(small_model):
    mesh = evaluate_model(small_model, FaceCoefficients.zeros(small_model))
    assert np.array_equal(mesh.positions, small_model.mean_shape)
    assert np.array_equal(mesh.albedo, small_model.mean_albedo)


def test_albedo_clamps_at_one(small_model):
    zeta = np.zeros(small_model.n_tex)
    col = small_model.basis_tex[:, 0]
    k = int(np.argmax(np.abs(col)))
    zeta[0] = (1.3 - small_model.mean_albedo.ravel()[k]) / col[k]
    raw = small_model.mean_albedo.ravel() + small_model.basis_tex @ zeta
    assert raw[k] == pytest.approx(1.3)
    mesh = evaluate_model(small_model, FaceCoefficients(np.zeros(small_model.n_id), np.zeros(small_model.n_exp), zeta))
    assert mesh.albedo.ravel()[k] == 1.0
    assert mesh.albedo.min() >= 0.0 and mesh.albedo.max() <= 1.0


def test_unit_identity_coefficient_adds_first_column(small_model):
    alpha = np.zeros(small_model.n_id)
    alpha[0] = 1.0
    mesh = evaluate_model(small_model, FaceCoefficients(alpha, np.zeros(small_model.n_exp), np.zeros(small_model.n_tex)))
    # independent dense product, accumulated row by row
    v = small_model.num_vertices
    col = np.array([sum(small_model.basis_id[r, j] * alpha[j] for j in range(small_model.n_id)) for r in range(3 * v)])
    np.testing.assert_allclose(mesh.positions, small_model.mean_shape + col.reshape(v, 3), atol=1e-14)
    np.testing.assert_allclose(mesh.positions - small_model.mean_shape,
                               small_model.basis_id[:, 0].reshape(v, 3), atol=1e-14)


def test_dimension_mismatch_names_basis(small_model):
    bad = FaceCoefficients(np.zeros(small_model.n_id + 1), np.zeros(small_model.n_exp), np.zeros(small_model.n_tex))
    with pytest.raises(ValueError, match="basis_id"):
        evaluate_model(small_model, bad)
    bad = FaceCoefficients(np.zeros(small_model.n_id), np.zeros(small_model.n_exp), np.zeros(2))
    with pytest.raises(ValueError, match="basis_tex"):
        evaluate_model(small_model, bad)


def test_synthetic_model_is_deterministic():
    a = dumps(model_to_dict(make_synthetic_model(8, 42)))
    b = dumps(model_to_dict(make_synthetic_model(8, 42)))
    assert a.encode() == b.encode()
    assert a != dumps(model_to_dict(make_synthetic_model(8, 43)))


def test_synthetic_model_counts():
    m = make_synthetic_model(3, 0)
    assert m.num_vertices == 9
    assert m.faces.shape == (8, 3)  # (n-1)^2 quads, two triangles each


def test_synthetic_bases_orthonormal():
    m = make_synthetic_model(8, 1)
    for basis in (np.hstack([m.basis_id, m.basis_exp]), m.basis_tex):
        gram = basis.T @ basis
        off = gram - np.diag(np.diag(gram))
        assert np.abs(off).max() < 1e-8
        np.testing.assert_allclose(np.diag(gram), 1.0, atol=1e-12)


def test_synthetic_model_rejects_tiny_grid():
    with pytest.raises(ValueError):
        make_synthetic_model(2, 0)


def test_rotation_must_be_proper():
    with pytest.raises(ValueError):
        FaceCoefficients(np.zeros(1), np.zeros(1), np.zeros(1), rotation=np.diag([1.0, 1.0, -1.0]))


def test_planar_quad_normals():
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    n = compute_vertex_normals(pos, np.array([[0, 1, 2], [0, 2, 3]]))
    np.testing.assert_allclose(n, np.tile([0.0, 0.0, 1.0], (4, 1)), atol=1e-15)


def uv_sphere(n_lat, n_lon):
    verts = [[0.0, 0.0, 1.0]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    verts.append([0.0, 0.0, -1.0])
    verts = np.array(verts)
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    faces = []
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((len(verts) - 1, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, c, d), (a, d, b)]
    return verts, np.array(faces)


def test_sphere_normals_converge_to_positions():
    errors = []
    for n in (6, 12, 24, 48):
        verts, faces = uv_sphere(n, 2 * n)
        normals = compute_vertex_normals(verts, faces)
        cosang = np.clip(np.sum(normals * verts, axis=1), -1, 1)
        errors.append(np.degrees(np.arccos(cosang)).max())
    assert all(b < a for a, b in zip(errors, errors[1:]))
    # first-order convergence: doubling the resolution roughly halves the error
    assert all(b < 0.6 * a for a, b in zip(errors, errors[1:]))


def test_isolated_vertex_gets_mean_normal():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    n = compute_vertex_normals(pos, np.array([[0, 1, 2]]))
    np.testing.assert_allclose(n[3], [0.0, 0.0, 1.0])


coef = st.floats(-0.05, 0.05)


@given(st.floats(0.1, 3.0), st.integers(0, 5))
def test_linearity_before_clamp(c, idx):
    m = make_synthetic_model(5, 11)
    rng = np.random.default_rng(idx)
    base = FaceCoefficients(0.01 * rng.standard_normal(m.n_id), 0.01 * rng.standard_normal(m.n_exp),
                            0.01 * rng.standard_normal(m.n_tex))
    scaled = FaceCoefficients(c * base.alpha, c * base.beta, c * base.zeta)
    e1 = evaluate_model(m, base)
    e2 = evaluate_model(m, scaled)
    np.testing.assert_allclose(e2.positions - m.mean_shape, c * (e1.positions - m.mean_shape), atol=1e-12)
    np.testing.assert_allclose(e2.albedo - m.mean_albedo, c * (e1.albedo - m.mean_albedo), atol=1e-12)


@given(st.integers(0, 10_000))
def test_pose_is_rigid(seed):
    m = make_synthetic_model(4, 2)
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=seed).as_matrix()
    coeffs = FaceCoefficients(np.zeros(m.n_id), np.zeros(m.n_exp), np.zeros(m.n_tex), rot, rng.normal(size=3))
    p0 = evaluate_model(m, FaceCoefficients.zeros(m)).positions
    p1 = evaluate_model(m, coeffs).positions
    d0 = np.linalg.norm(p0[:, None] - p0[None], axis=-1)
    d1 = np.linalg.norm(p1[:, None] - p1[None], axis=-1)
    np.testing.assert_allclose(d1, d0, rtol=1e-9, atol=1e-12)


@given(st.integers(0, 10_000))
def test_normals_rotate_with_mesh(seed):
    m = make_synthetic_model(5, 4)
    rot = Rotation.random(random_state=seed).as_matrix()
    n0 = compute_vertex_normals(m.mean_shape, m.faces)
    n1 = compute_vertex_normals(m.mean_shape @ rot.T, m.faces)
    np.testing.assert_allclose(n1, n0 @ rot.T, atol=1e-6)


def test_normals_unit_length(face_mesh):
    np.testing.assert_allclose(np.linalg.norm(face_mesh.normals, axis=1), 1.0, atol=1e-6)


def test_quaternion_matches_scipy():
    q = np.array([0.9, 0.1, -0.3, 0.2])
    ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    np.testing.assert_allclose(quaternion_to_matrix(q), ref, atol=1e-12)


def test_json_round_trip(tmp_path, small_model):
    save_model(small_model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for k in ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_tex", "faces"):
        assert np.array_equal(getattr(back, k), getattr(small_model, k))
    c = FaceCoefficients(np.arange(small_model.n_id) * 0.1, np.ones(small_model.n_exp), np.zeros(small_model.n_tex),
                         quaternion_to_matrix([1, 0.2, 0, 0]), np.array([1.0, 2.0, 3.0]))
    c2 = coeffs_from_dict(coeffs_to_dict(c))
    assert np.array_equal(c2.alpha, c.alpha) and np.array_equal(c2.rotation, c.rotation)


def test_json_rejects_inconsistent_dimensions(small_model):
    d = model_to_dict(small_model)
    d["n_id"] += 1
    with pytest.raises(ValueError):
        model_from_dict(d)
    cd = coeffs_to_dict(FaceCoefficients.zeros(small_model))
    cd["n_exp"] = 99
    with pytest.raises(ValueError, match="n_exp"):
        coeffs_from_dict(cd)


def test_quaternion_pose_in_json(small_model):
    d = coeffs_to_dict(FaceCoefficients.zeros(small_model))
    d["pose"] = {"quaternion": [0.0, 0.0, 0.0, 1.0], "translation": [0, 0, 0]}
    c = coeffs_from_dict(d)
    np.testing.assert_allclose(c.rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_obj_round_trip(tmp_path, face_mesh):
    write_obj(face_mesh, tmp_path / "f.obj")
    back = read_obj(tmp_path / "f.obj")
    np.testing.assert_allclose(back.positions, face_mesh.positions, atol=1e-8)
    np.testing.assert_allclose(back.albedo, face_mesh.albedo, atol=1e-8)
    assert np.array_equal(back.faces, face_mesh.faces)
    np.testing.assert_allclose(back.normals, face_mesh.normals, atol=1e-6)


def test_obj_quads_are_triangulated(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = read_obj(tmp_path / "q.obj")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert np.all(mesh.albedo == 1.0)


def test_empty_mesh():
    assert Mesh.empty().num_vertices == 0

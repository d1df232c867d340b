import numpy as np
import pytest
from hypothesis import settings

from relit.morphable_model import FaceCoefficients, Mesh, compute_vertex_normals, evaluate_model, make_synthetic_model
from relit.sh_lighting import ShCoeffs
from relit.soft_rasterizer import Camera, RasterConfig

settings.register_profile("relit", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("relit")


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def quad_mesh(half: float = 2.0, z: float = 0.0, albedo=(0.6, 0.5, 0.4)) -> Mesh:
    pos = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(pos, np.tile(albedo, (4, 1)), compute_vertex_normals(pos, faces), faces)


def soft_lighting(rng=None, scale=0.1) -> ShCoeffs:
    """Band-0 dominant lighting that stays positive for every normal."""
    rng = np.random.default_rng(0) if rng is None else rng
    c = np.zeros((3, 9))
    c[:, 0] = rng.uniform(1.5, 2.5, 3)
    c[:, 1:] = rng.uniform(-scale, scale, (3, 8))
    return ShCoeffs(c)


@pytest.fixture
def small_model():
    return make_synthetic_model(6, 3)


@pytest.fixture
def face_mesh(small_model):
    return evaluate_model(small_model, FaceCoefficients.zeros(small_model))


@pytest.fixture
def cam16():
    return Camera(16, 16)


@pytest.fixture
def raster16(cam16):
    return RasterConfig.for_camera(cam16, sigma=0.3)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

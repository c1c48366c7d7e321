import math

import numpy as np
import pytest

from specsplat import Camera, GaussianCloud, SpectralBasis
from specsplat.core import num_sh_coeffs

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def front_camera(size: int = 8, distance: float = 3.0, fov_deg: float = 45.0) -> Camera:
    return Camera.look_at((0.0, -distance, 0.0), (0.0, 0.0, 0.0), width=size, height=size, fov_deg=fov_deg)


def random_cloud(rng, count: int = 5, bands: int = 6, degree: int = 2, spread: float = 0.4,
                 dtype=np.float64, basis: SpectralBasis | None = None) -> GaussianCloud:
    if basis is None:
        basis = SpectralBasis(tuple(float(x) for x in np.linspace(420, 780, bands)))
    bands = basis.band_count
    sh = rng.normal(0.0, 0.15, size=(count, bands, num_sh_coeffs(degree)))
    sh[:, :, 0] = rng.uniform(-0.5, 1.5, size=(count, bands))
    q = rng.standard_normal((count, 4))
    return GaussianCloud.create(
        rng.uniform(-spread, spread, size=(count, 3)), sh, basis,
        log_scales=np.log(rng.uniform(0.08, 0.3, size=(count, 3))),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity_logits=rng.uniform(-1.0, 3.0, size=count),
        dtype=dtype,
    )


def sh0_for(value: float) -> float:
    """Degree-0 coefficient that decodes to ``value``."""
    return (value - 0.5) / 0.28209479177387814


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return front_camera()


@pytest.fixture
def cloud(rng):
    return random_cloud(rng)


__all__ = ["front_camera", "random_cloud", "sh0_for", "math"]

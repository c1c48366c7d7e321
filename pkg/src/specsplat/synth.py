"""Seeded synthetic scenes whose ground truth comes from the library's own renderer."""
from __future__ import annotations

import math

import numpy as np

from . import colorpipe, rasterizer
from .colorpipe import ColorPipeConfig
from .core import Camera, ContractError, GaussianCloud, SpectralBasis, logit, num_sh_coeffs
from .scene_io import PointSet, Scene, View
from .sh import C0, C1, RADIANCE_OFFSET

SCENE_RADIUS = 1.0
CAMERA_DISTANCE = 4.0
FOV_DEG = 50.0
TEST_EVERY = 4
POINTS_PER_GAUSSIAN = 2
POSITION_JITTER = 0.05
SPECTRUM_JITTER = 0.05


def smooth_spectra(rng: np.random.Generator, basis: SpectralBasis, count: int) -> np.ndarray:
    """Reflectance-like spectra in [0.05, 0.9]: a floor plus one or two broad bumps."""
    wl = np.asarray(basis.wavelengths_nm)
    out = np.empty((count, wl.size))
    for i in range(count):
        s = np.full(wl.size, rng.uniform(0.05, 0.3))
        for _ in range(rng.integers(1, 3)):
            center = rng.uniform(400.0, 820.0)
            width = rng.uniform(40.0, 150.0)
            s += rng.uniform(0.2, 0.6) * np.exp(-0.5 * ((wl - center) / width) ** 2)
        out[i] = np.clip(s, 0.05, 0.9)
    return out


def random_cloud(rng: np.random.Generator, count: int, basis: SpectralBasis, sh_degree: int = 3,
                 view_dependence: float = 0.02) -> tuple[GaussianCloud, np.ndarray]:
    """Ground-truth cloud and its view-independent base spectra."""
    pos = rng.uniform(-SCENE_RADIUS, SCENE_RADIUS, size=(count, 3)) * 0.8
    log_scales = np.log(rng.uniform(0.05, 0.16, size=(count, 3)))
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity = rng.uniform(0.5, 0.95, size=count)
    base = smooth_spectra(rng, basis, count)
    sh = np.zeros((count, basis.band_count, num_sh_coeffs(sh_degree)))
    sh[:, :, 0] = (base - RADIANCE_OFFSET) / C0
    if sh_degree >= 1 and view_dependence > 0:
        # a gentle per-Gaussian directional tint shared by all bands
        tint = rng.uniform(-1, 1, size=(count, 1, 3)) * (view_dependence / C1)
        sh[:, :, 1:4] = tint * base[:, :, None]
    cloud = GaussianCloud.create(pos, sh, basis, log_scales=log_scales, rotations=quats,
                                 opacity_logits=logit(opacity))
    return cloud, base


def ring_cameras(n_views: int, resolution: int, rng: np.random.Generator) -> list[Camera]:
    """Cameras on a sphere around the origin, alternating elevation, looking inward."""
    cams = []
    for i in range(n_views):
        azimuth = 2 * math.pi * i / n_views + rng.uniform(-0.1, 0.1)
        elevation = math.radians(25.0 if i % 2 == 0 else -15.0) + rng.uniform(-0.1, 0.1)
        eye = CAMERA_DISTANCE * np.array([math.cos(elevation) * math.cos(azimuth),
                                          math.cos(elevation) * math.sin(azimuth),
                                          math.sin(elevation)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), width=resolution, height=resolution, fov_deg=FOV_DEG))
    return cams


def jittered_points(rng: np.random.Generator, cloud: GaussianCloud, base: np.ndarray, n_points: int) -> PointSet:
    """Seed points near the ground-truth centres with noisy base spectra."""
    idx = np.arange(n_points) % cloud.count
    pos = cloud.positions[idx] + rng.normal(0.0, POSITION_JITTER, size=(n_points, 3))
    spectra = np.clip(base[idx] + rng.normal(0.0, SPECTRUM_JITTER, size=(n_points, base.shape[1])), 0.0, 1.0)
    return PointSet(pos, spectra)


def synthesize(seed: int = 0, n_gaussians: int = 100, n_bands: int = 16, n_views: int = 12,
               resolution: int = 64, *, n_points: int | None = None, sh_degree: int = 3,
               color: ColorPipeConfig = ColorPipeConfig(),
               settings: rasterizer.RenderSettings = rasterizer.DEFAULT_SETTINGS) -> Scene:
    """Complete scene: ground-truth cloud, spectral and RGB renders, seed points.

    Every ``TEST_EVERY``-th view is held out.  RGB ground truth is the
    pixel-level conversion of the spectral render.
    """
    if min(n_gaussians, n_bands, n_views, resolution) < 1:
        raise ContractError("synthetic scene sizes must all be positive")
    rng = np.random.default_rng(seed)
    basis = SpectralBasis.standard(n_bands)
    cloud, base = random_cloud(rng, n_gaussians, basis, sh_degree)
    cameras = ring_cameras(n_views, resolution, rng)
    views = []
    for i, cam in enumerate(cameras):
        spectral, _ = rasterizer.rasterize(cloud, cam, settings)
        spectral.data = spectral.data.astype(np.float32)
        rgb = colorpipe.convert_pixel_level(spectral, color)
        rgb.data = rgb.data.astype(np.float32)
        split = "test" if n_views >= TEST_EVERY and i % TEST_EVERY == TEST_EVERY - 1 else "train"
        views.append(View(f"view_{i:03d}", cam, spectral, rgb, split))
    points = jittered_points(rng, cloud, base, n_points or POINTS_PER_GAUSSIAN * n_gaussians)
    extras = {"synthetic": {"seed": seed, "n_gaussians": n_gaussians, "n_bands": n_bands,
                            "n_views": n_views, "resolution": resolution}}
    return Scene(basis, views, points, cloud, None, extras)

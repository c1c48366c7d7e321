"""Spectral to RGB conversion with the CIE 1931 2-degree observer.

Pipeline per spectrum ``L`` over the basis bands::

    XYZ = (sum_b L_b xbar_b, sum_b L_b ybar_b, sum_b L_b zbar_b)
    XYZ <- XYZ / Y_white                    (optional exposure normalization)
    XYZ <- XYZ * (Xw_ref / Xw, 1, Zw_ref / Zw)   (optional white balance)
    rgb  = M @ XYZ                           (linear RGB)
    rgb  <- encode(rgb)                      (optional sRGB / power gamma)

The sums are plain band sums, no wavelength-step weights, unless
``quadrature`` is enabled.  The scene white ``(Xw, Yw, Zw)`` is the XYZ of a
flat unit spectrum on the basis.

Two placements of the conversion are supported: after compositing (pixel
level) and per Gaussian before compositing (Gaussian level).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from . import rasterizer
from .core import (CMF_MAX_NM, CMF_MIN_NM, Camera, ColorSpace, ContractError, DomainError, GaussianCloud,
                   RgbImage, SpectralBasis, SpectralImage)

CMF_FILE = "cie1931_2deg_1nm.txt"
CMF_SHA256 = "0e1a2d1667da28d9a2be97e4ef76583c441c22191cdcab336a14ac2d552b7f1c"

WHITE_POINTS_XY = {
    "D65": (0.31270, 0.32900),
    "E": (1.0 / 3.0, 1.0 / 3.0),
}
SRGB_PRIMARIES_XY = ((0.64, 0.33), (0.30, 0.60), (0.15, 0.06))


@dataclass(frozen=True)
class CmfTable:
    wavelengths: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    zbar: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.xbar, self.ybar, self.zbar], axis=1)


@lru_cache(maxsize=1)
def load_cmf_table() -> CmfTable:
    """The embedded 1 nm table over 360-830 nm."""
    raw = resources.files("specsplat.data").joinpath(CMF_FILE).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != CMF_SHA256:
        raise RuntimeError(f"CMF data file checksum mismatch: {digest}")
    rows = np.loadtxt(raw.decode().splitlines(), comments="#", dtype=np.float64)
    wl = np.arange(CMF_MIN_NM, CMF_MAX_NM + 1.0)
    if rows.shape != (wl.size, 3):
        raise RuntimeError(f"CMF table has shape {rows.shape}, expected {(wl.size, 3)}")
    for arr in (wl, rows):
        arr.setflags(write=False)
    return CmfTable(wl, rows[:, 0], rows[:, 1], rows[:, 2])


def resample_cmf(basis: SpectralBasis) -> np.ndarray:
    """(x̄, ȳ, z̄) at each band wavelength by linear interpolation, shape (N, 3)."""
    table = load_cmf_table()
    wl = np.asarray(basis.wavelengths_nm, dtype=np.float64)
    if np.any(wl < CMF_MIN_NM) or np.any(wl > CMF_MAX_NM):
        raise DomainError(f"wavelengths must lie in [{CMF_MIN_NM}, {CMF_MAX_NM}] nm")
    return np.stack([np.interp(wl, table.wavelengths, col) for col in (table.xbar, table.ybar, table.zbar)], axis=1)


def quadrature_weights(basis: SpectralBasis) -> np.ndarray:
    """Trapezoidal wavelength-step weights (nm) for a possibly non-uniform basis."""
    wl = np.asarray(basis.wavelengths_nm, dtype=np.float64)
    if wl.size == 1:
        return np.ones(1)
    gaps = np.diff(wl)
    w = np.zeros_like(wl)
    w[:-1] += gaps / 2
    w[1:] += gaps / 2
    return w


def spectral_to_xyz(spectrum, cmf: np.ndarray) -> np.ndarray:
    """Tristimulus values as plain band sums; works on (..., N) arrays.

    Accumulates band by band in index order so the result is reproducible
    bit for bit.
    """
    spectrum = np.asarray(spectrum)
    cmf = np.asarray(cmf)
    if spectrum.shape[-1] != cmf.shape[0]:
        raise ContractError(f"spectrum has {spectrum.shape[-1]} bands, CMF table has {cmf.shape[0]}")
    cmf = cmf.astype(spectrum.dtype if spectrum.dtype.kind == "f" else np.float64)
    acc = np.zeros(spectrum.shape[:-1] + (3,), dtype=cmf.dtype)
    for b in range(cmf.shape[0]):
        acc += spectrum[..., b:b + 1] * cmf[b]
    return acc


def xy_to_xyz(xy, Y: float = 1.0) -> np.ndarray:
    x, y = xy
    return np.array([x / y * Y, Y, (1 - x - y) / y * Y])


def rgb_matrix_for_white(white_xyz) -> np.ndarray:
    """XYZ -> linear RGB with sRGB primaries, normalized so ``white_xyz`` maps to gray."""
    prim = np.stack([xy_to_xyz(p) for p in SRGB_PRIMARIES_XY], axis=1)
    scale = np.linalg.solve(prim, np.asarray(white_xyz, dtype=np.float64) / white_xyz[1])
    return np.linalg.inv(prim * scale)


SRGB_MATRIX = rgb_matrix_for_white(xy_to_xyz(WHITE_POINTS_XY["D65"]))


@dataclass(frozen=True)
class ColorPipeConfig:
    apply_white_balance: bool = True
    # "D65", "E" (equal energy) or an explicit (X, Y, Z) triple
    white_point: str | tuple = "D65"
    apply_gamma: bool = True
    # "srgb" or a power-law exponent
    gamma: str | float = "srgb"
    # None derives sRGB primaries adapted to the white point
    matrix: tuple | None = None
    normalize: bool = True
    quadrature: bool = False

    def white_xyz(self) -> np.ndarray:
        if isinstance(self.white_point, str):
            key = {"EQUALENERGY": "E", "EQUAL_ENERGY": "E"}.get(self.white_point.upper(), self.white_point.upper())
            if key not in WHITE_POINTS_XY:
                raise DomainError(f"unknown white point {self.white_point!r}")
            return xy_to_xyz(WHITE_POINTS_XY[key])
        xyz = np.asarray(self.white_point, dtype=np.float64)
        if xyz.shape != (3,) or xyz[1] <= 0:
            raise DomainError("custom white point must be (X, Y, Z) with Y > 0")
        return xyz / xyz[1]

    def rgb_matrix(self) -> np.ndarray:
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
            if abs(np.linalg.det(m)) < 1e-12:
                raise DomainError("xyz_to_linear_rgb matrix must be invertible")
            return m
        return rgb_matrix_for_white(self.white_xyz()) if self.apply_white_balance else SRGB_MATRIX

    @property
    def is_linear(self) -> bool:
        return not self.apply_gamma


SRGB_THRESHOLD = 0.0031308


def encode_gamma(x: np.ndarray, gamma) -> np.ndarray:
    """Display encoding, extended to negative inputs (linear segment / odd power)."""
    if gamma == "srgb":
        hi = 1.055 * np.power(np.maximum(x, SRGB_THRESHOLD), 1 / 2.4) - 0.055
        return np.where(x <= SRGB_THRESHOLD, 12.92 * x, hi)
    g = float(gamma)
    return np.sign(x) * np.power(np.abs(x), 1 / g)


def encode_gamma_grad(x: np.ndarray, gamma) -> np.ndarray:
    if gamma == "srgb":
        hi = (1.055 / 2.4) * np.power(np.maximum(x, SRGB_THRESHOLD), 1 / 2.4 - 1)
        return np.where(x <= SRGB_THRESHOLD, 12.92, hi)
    g = float(gamma)
    return np.power(np.maximum(np.abs(x), 1e-12), 1 / g - 1) / g


class ColorPipe:
    """A :class:`ColorPipeConfig` bound to a spectral basis.

    Everything up to the gamma step is one linear map, ``spectrum @ linear_map``.
    """

    def __init__(self, config: ColorPipeConfig, basis: SpectralBasis):
        if config.gamma != "srgb" and not (isinstance(config.gamma, (int, float)) and config.gamma > 0):
            raise DomainError(f"gamma must be 'srgb' or a positive number, got {config.gamma!r}")
        self.config = config
        self.basis = basis
        cmf = resample_cmf(basis)
        if config.quadrature:
            cmf = cmf * quadrature_weights(basis)[:, None]
        self.cmf = cmf
        self.scene_white = spectral_to_xyz(np.ones(basis.band_count), cmf)
        if self.scene_white[1] <= 0:
            raise DomainError("basis has zero luminance response")
        self.norm = 1.0 / self.scene_white[1] if config.normalize else 1.0
        if config.apply_white_balance:
            ref = config.white_xyz() * self.scene_white[1]
            # a basis with no X (or Z) response never produces that component; leave it unscaled
            with np.errstate(divide="ignore", invalid="ignore"):
                gains = ref / self.scene_white
            self.wb = np.array([gains[0] if self.scene_white[0] > 0 else 1.0, 1.0,
                                gains[2] if self.scene_white[2] > 0 else 1.0])
        else:
            self.wb = np.ones(3)
        self.matrix = config.rgb_matrix()
        self.linear_map = (cmf * (self.norm * self.wb)) @ self.matrix.T

    @property
    def is_linear(self) -> bool:
        return self.config.is_linear

    def xyz_to_linear(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz)
        dt = xyz.dtype if xyz.dtype.kind == "f" else np.float64
        return (xyz * (self.norm * self.wb).astype(dt)) @ self.matrix.T.astype(dt)

    def encode(self, linear: np.ndarray, clamp: bool = True) -> np.ndarray:
        out = encode_gamma(linear, self.config.gamma) if self.config.apply_gamma else linear
        return self.clamp(out) if clamp else out

    def clamp(self, rgb: np.ndarray) -> np.ndarray:
        """Output range policy: [0, 1] when encoded, nonnegative when linear."""
        return np.clip(rgb, 0.0, 1.0) if self.config.apply_gamma else np.maximum(rgb, 0.0)

    def xyz_to_rgb(self, xyz, clamp: bool = True) -> np.ndarray:
        return self.encode(self.xyz_to_linear(xyz), clamp=clamp)

    def spectra_to_linear(self, spectra: np.ndarray) -> np.ndarray:
        return spectra @ self.linear_map.astype(spectra.dtype)

    def spectra_to_rgb(self, spectra: np.ndarray, clamp: bool = False) -> np.ndarray:
        """(..., N) spectra to (..., 3) RGB.  Unclamped by default (training path)."""
        return self.encode(self.spectra_to_linear(spectra), clamp=clamp)

    def spectra_to_rgb_vjp(self, spectra: np.ndarray, grad_rgb: np.ndarray) -> np.ndarray:
        """Gradient of the unclamped :meth:`spectra_to_rgb` w.r.t. the spectra."""
        g = grad_rgb
        if self.config.apply_gamma:
            g = g * encode_gamma_grad(self.spectra_to_linear(spectra), self.config.gamma)
        return g @ self.linear_map.T.astype(spectra.dtype)


@lru_cache(maxsize=64)
def _cached_pipe(config: ColorPipeConfig, basis: SpectralBasis) -> ColorPipe:
    return ColorPipe(config, basis)


def get_pipe(config: ColorPipeConfig, basis: SpectralBasis) -> ColorPipe:
    return _cached_pipe(config, basis)


def xyz_to_rgb(xyz, config: ColorPipeConfig, basis: SpectralBasis) -> np.ndarray:
    """Linear XYZ to (clamped, if encoded) RGB using the scene white of ``basis``."""
    return get_pipe(config, basis).xyz_to_rgb(np.asarray(xyz, dtype=np.float64))


def _rgb_image(data: np.ndarray, config: ColorPipeConfig) -> RgbImage:
    return RgbImage(data, ColorSpace.ENCODED if config.apply_gamma else ColorSpace.LINEAR)


def convert_pixel_level(image: SpectralImage, config: ColorPipeConfig) -> RgbImage:
    """Convert an accumulated spectral image to RGB, pixel by pixel."""
    pipe = get_pipe(config, image.basis)
    xyz = spectral_to_xyz(image.data, pipe.cmf)
    return _rgb_image(pipe.xyz_to_rgb(xyz), config)


def convert_pixel_level_vjp(image: SpectralImage, config: ColorPipeConfig, grad_rgb) -> np.ndarray:
    """H x W x N gradient of the unclamped pixel-level conversion."""
    return get_pipe(config, image.basis).spectra_to_rgb_vjp(image.data, np.asarray(grad_rgb, dtype=image.data.dtype))


@dataclass
class GaussianLevelAux:
    projection: rasterizer.Projection
    color_cache: rasterizer.ColorCache
    composite: rasterizer.CompositeAux
    composite_colors: np.ndarray
    with_spectral: bool
    settings: rasterizer.RenderSettings


def render_gaussian_level(cloud: GaussianCloud, camera: Camera, config: ColorPipeConfig,
                          settings: rasterizer.RenderSettings = rasterizer.DEFAULT_SETTINGS,
                          with_spectral: bool = False):
    """Convert each Gaussian's radiance to RGB, then composite.

    Returns ``(rgb, spectral_or_None, aux)`` where ``rgb`` is unclamped.  With
    ``with_spectral`` the N-band image is composited in the same pass,
    sharing projection, sorting and binning.
    """
    rasterizer._prepare(cloud, camera)
    pipe = get_pipe(config, cloud.basis)
    proj = rasterizer.project(cloud, camera, settings)
    cache = rasterizer.decode_colors(cloud, proj)
    rgb_colors = pipe.spectra_to_rgb(cache.colors)
    colors = np.concatenate([cache.colors, rgb_colors], axis=1) if with_spectral else rgb_colors
    image, caux = rasterizer.composite(proj, colors, camera, settings)
    n = cloud.basis.band_count
    spectral = image[..., :n] if with_spectral else None
    rgb = image[..., n:] if with_spectral else image
    return rgb, spectral, GaussianLevelAux(proj, cache, caux, colors, with_spectral, settings)


def render_gaussian_level_backward(cloud: GaussianCloud, camera: Camera, config: ColorPipeConfig,
                                   aux: GaussianLevelAux, grad_rgb, grad_spectral=None) -> rasterizer.ParamGradients:
    pipe = get_pipe(config, cloud.basis)
    dt = cloud.dtype
    grad_rgb = np.asarray(grad_rgb, dtype=dt)
    if aux.with_spectral:
        if grad_spectral is None:
            grad_spectral = np.zeros(grad_rgb.shape[:2] + (cloud.basis.band_count,), dtype=dt)
        grad = np.concatenate([np.asarray(grad_spectral, dtype=dt), grad_rgb], axis=2)
    else:
        grad = grad_rgb
    g_colors, g_mean, g_conic, g_opac = rasterizer.composite_backward(
        aux.projection, aux.composite_colors, aux.composite, grad, aux.settings)
    n = cloud.basis.band_count
    g_rgb_colors = g_colors[:, n:] if aux.with_spectral else g_colors
    g_spec = pipe.spectra_to_rgb_vjp(aux.color_cache.colors, g_rgb_colors)
    if aux.with_spectral:
        g_spec = g_spec + g_colors[:, :n]
    return rasterizer.backward_from_colors(cloud, camera, aux.projection, aux.color_cache,
                                           g_spec, g_mean, g_conic, g_opac)


def convert_gaussian_level(cloud: GaussianCloud, camera: Camera, config: ColorPipeConfig,
                           settings: rasterizer.RenderSettings = rasterizer.DEFAULT_SETTINGS) -> RgbImage:
    rgb, _, _ = render_gaussian_level(cloud, camera, config, settings)
    return _rgb_image(get_pipe(config, cloud.basis).clamp(rgb), config)

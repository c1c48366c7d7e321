"""Domain types shared across the package.

Geometry is stored once per Gaussian; only the spherical-harmonic radiance
coefficients carry a band axis.  Scales live in log space and opacities in
logit space so that unconstrained optimizer updates stay valid.
"""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

CMF_MIN_NM = 360.0
CMF_MAX_NM = 830.0
MAX_SH_DEGREE = 3

# 8 bands over 400-750 nm (filter-wheel captures) and a 16-band 415-808 nm
# snapshot-sensor layout; 415, 431, 680 and 808 nm are fixed points of the latter.
BANDS_8 = tuple(float(x) for x in np.linspace(400.0, 750.0, 8))
BANDS_16 = tuple(float(415 + 16 * k) for k in range(14)) + (680.0, 808.0)


class SpecsplatError(Exception):
    """Base class for package errors."""


class ContractError(SpecsplatError):
    """An operation was called with inputs that violate its preconditions."""


class DomainError(SpecsplatError, ValueError):
    """A numeric argument lies outside the supported domain."""


class ConversionStage(str, enum.Enum):
    GAUSSIAN = "gaussian"
    PIXEL = "pixel"


class LossMode(str, enum.Enum):
    RGB = "rgb"
    MS = "ms"
    DUAL = "dual"


class ColorSpace(str, enum.Enum):
    LINEAR = "linear"
    ENCODED = "encoded"


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class SpectralBasis:
    """Ordered wavelength bands (nm) a scene is sampled at."""

    wavelengths_nm: tuple[float, ...]

    def __post_init__(self):
        wl = tuple(float(w) for w in self.wavelengths_nm)
        object.__setattr__(self, "wavelengths_nm", wl)
        if not wl:
            raise DomainError("a spectral basis needs at least one band")
        for w in wl:
            if not (CMF_MIN_NM <= w <= CMF_MAX_NM) or not math.isfinite(w):
                raise DomainError(f"wavelength {w} nm outside [{CMF_MIN_NM}, {CMF_MAX_NM}]")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise DomainError(f"wavelengths must be strictly increasing: {wl}")

    @property
    def band_count(self) -> int:
        return len(self.wavelengths_nm)

    def __len__(self) -> int:
        return len(self.wavelengths_nm)

    def subset(self, indices: Sequence[int]) -> "SpectralBasis":
        return SpectralBasis(tuple(self.wavelengths_nm[i] for i in indices))

    @classmethod
    def standard(cls, n_bands: int) -> "SpectralBasis":
        """Band layout used by the synthetic scenes.

        8 and 16 bands reproduce the two capture layouts; any other count is
        spread evenly over 415-808 nm.
        """
        if n_bands == 8:
            return cls(BANDS_8)
        if n_bands == 16:
            return cls(BANDS_16)
        if n_bands == 1:
            return cls((555.0,))
        return cls(tuple(float(x) for x in np.linspace(415.0, 808.0, n_bands)))


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene.

    ``sh_coeffs`` has shape ``(count, bands, (sh_degree + 1) ** 2)``.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int
    basis: SpectralBasis

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.positions.dtype

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return replace(self, **{k: v.copy() for k, v in self.params().items()})

    def astype(self, dtype) -> "GaussianCloud":
        return replace(self, **{k: np.array(v, dtype=dtype) for k, v in self.params().items()})

    def take(self, index) -> "GaussianCloud":
        """Row subset (index array or boolean mask)."""
        return replace(self, **{k: v[index].copy() for k, v in self.params().items()})

    def with_bands(self, band_indices: Sequence[int]) -> "GaussianCloud":
        idx = list(band_indices)
        return replace(self, sh_coeffs=self.sh_coeffs[:, idx, :].copy(), basis=self.basis.subset(idx))

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= np.where(norms > 0, norms, 1)

    @classmethod
    def create(
        cls,
        positions,
        sh_coeffs,
        basis: SpectralBasis,
        *,
        log_scales=None,
        rotations=None,
        opacity_logits=None,
        dtype=np.float64,
    ) -> "GaussianCloud":
        positions = np.asarray(positions, dtype=dtype).reshape(-1, 3)
        n = positions.shape[0]
        sh_coeffs = np.asarray(sh_coeffs, dtype=dtype)
        if sh_coeffs.ndim != 3 or sh_coeffs.shape[0] != n:
            raise ContractError(f"sh_coeffs must have shape (count, bands, K), got {sh_coeffs.shape}")
        degree = int(round(math.sqrt(sh_coeffs.shape[2]))) - 1
        if num_sh_coeffs(degree) != sh_coeffs.shape[2] or not 0 <= degree <= MAX_SH_DEGREE:
            raise ContractError(f"sh_coeffs last axis {sh_coeffs.shape[2]} is not (L+1)^2 for L <= 3")
        if log_scales is None:
            log_scales = np.full((n, 3), math.log(0.1))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if opacity_logits is None:
            opacity_logits = np.full(n, logit(0.5))
        return cls(
            positions=positions,
            log_scales=np.asarray(log_scales, dtype=dtype).reshape(n, 3),
            rotations=np.asarray(rotations, dtype=dtype).reshape(n, 4),
            opacity_logits=np.asarray(opacity_logits, dtype=dtype).reshape(n),
            sh_coeffs=sh_coeffs,
            sh_degree=degree,
            basis=basis,
        )

    def equals(self, other: "GaussianCloud") -> bool:
        """Bit-exact comparison of every field."""
        if self.sh_degree != other.sh_degree or self.basis != other.basis:
            return False
        for name in self.PARAM_NAMES:
            a, b = getattr(self, name), getattr(other, name)
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def validate_cloud(cloud: GaussianCloud, tol: float = 1e-6, check_norms: bool = True) -> list[str]:
    """Return a description of every invariant violation in ``cloud``.

    ``check_norms=False`` skips the unit-quaternion check; renderers
    normalize internally and accept any nonzero quaternion.
    """
    problems: list[str] = []
    n = cloud.count
    if cloud.positions.ndim != 2 or cloud.positions.shape[1] != 3:
        problems.append(f"positions: expected shape (count, 3), got {cloud.positions.shape}")
    for name, shape in (("log_scales", (n, 3)), ("rotations", (n, 4)), ("opacity_logits", (n,))):
        arr = getattr(cloud, name)
        if arr.shape != shape:
            problems.append(f"{name}: expected shape {shape}, got {arr.shape}")
    if not 0 <= cloud.sh_degree <= MAX_SH_DEGREE:
        problems.append(f"sh_degree: {cloud.sh_degree} outside [0, {MAX_SH_DEGREE}]")
    want = (n, cloud.basis.band_count, num_sh_coeffs(cloud.sh_degree))
    if cloud.sh_coeffs.shape != want:
        problems.append(f"sh_coeffs shape: expected {want}, got {cloud.sh_coeffs.shape}")
    if cloud.rotations.shape == (n, 4) and check_norms:
        norms = np.linalg.norm(cloud.rotations, axis=1)
        for i in np.flatnonzero(np.abs(norms - 1.0) > tol):
            problems.append(f"rotations[{i}]: norm {norms[i]:.6g} is not unit")
    for name in GaussianCloud.PARAM_NAMES:
        arr = getattr(cloud, name)
        bad = ~np.isfinite(arr)
        if bad.any():
            rows = sorted({int(i) for i in np.argwhere(bad)[:, 0]})
            problems.extend(f"{name}[{i}]: non-finite value" for i in rows)
    return problems


def check_cloud(cloud: GaussianCloud, check_norms: bool = True) -> None:
    problems = validate_cloud(cloud, check_norms=check_norms)
    if problems:
        raise ContractError("invalid GaussianCloud: " + "; ".join(problems[:5]))


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    Pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.near, self.far = float(self.near), float(self.far)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self) -> list[str]:
        problems = []
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            problems.append("world_to_camera rotation is not orthonormal")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1]):
            problems.append("world_to_camera last row must be [0, 0, 0, 1]")
        if not 0 < self.near < self.far:
            problems.append(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width <= 0 or self.height <= 0:
            problems.append("image size must be positive")
        return problems

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                fov_deg: float = 50.0, near: float = 0.01, far: float = 100.0) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, w2c, near, far)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                   np.asarray(d["world_to_camera"]), d.get("near", 0.01), d.get("far", 100.0))


@dataclass
class SpectralImage:
    """H x W x N linear radiance cube."""

    data: np.ndarray
    basis: SpectralBasis

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != self.basis.band_count:
            raise ContractError(
                f"spectral image shape {self.data.shape} does not match {self.basis.band_count} bands")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def with_bands(self, band_indices: Sequence[int]) -> "SpectralImage":
        idx = list(band_indices)
        return SpectralImage(self.data[:, :, idx].copy(), self.basis.subset(idx))


@dataclass
class RgbImage:
    data: np.ndarray
    color_space: ColorSpace = ColorSpace.ENCODED

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class LearningRates:
    position: float = 1.6e-4
    position_final: float = 1.6e-6
    scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    sh0: float = 2.5e-3
    sh_rest: float = 1.25e-4


@dataclass
class DensifyConfig:
    enabled: bool = False
    interval: int = 100
    grad_threshold: float = 2e-4
    opacity_prune_threshold: float = 0.005
    scale_split_threshold: float = 0.1
    start_iter: int = 500
    stop_iter: int = 15000
    max_count: int = 100000

    def validate(self) -> list[str]:
        problems = []
        if self.start_iter >= self.stop_iter:
            problems.append("densify.start_iter must be < densify.stop_iter")
        if self.interval <= 0:
            problems.append("densify.interval must be positive")
        if self.grad_threshold <= 0:
            problems.append("densify.grad_threshold must be positive")
        if not 0 < self.opacity_prune_threshold < 1:
            problems.append("densify.opacity_prune_threshold must be in (0, 1)")
        return problems


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: LearningRates = field(default_factory=LearningRates)
    spatial_lr_scale: float | None = None
    lambda_ms: float = 1.0
    lambda_rgb: float = 1.0
    conversion_stage: ConversionStage = ConversionStage.PIXEL
    loss_mode: LossMode = LossMode.DUAL
    dssim_weight: float = 0.2
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    apply_gamma: bool = True
    apply_white_balance: bool = True
    sh_degree: int = 3
    precision: str = "float32"
    eval_interval: int = 500
    opacity_reset_interval: int = 0

    def __post_init__(self):
        self.conversion_stage = ConversionStage(self.conversion_stage)
        self.loss_mode = LossMode(self.loss_mode)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def validate(self) -> list[str]:
        problems = []
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        for f in fields(LearningRates):
            if getattr(self.lr, f.name) <= 0:
                problems.append(f"lr.{f.name} must be positive")
        if self.lambda_ms < 0 or self.lambda_rgb < 0:
            problems.append("lambda_ms and lambda_rgb must be nonnegative")
        if self.loss_mode is LossMode.DUAL and self.lambda_ms + self.lambda_rgb <= 0:
            problems.append("lambda_ms + lambda_rgb must be positive for dual loss")
        if not 0.0 <= self.dssim_weight <= 1.0:
            problems.append("dssim_weight must be in [0, 1]")
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            problems.append("sh_degree must be in [0, 3]")
        if self.precision not in ("float32", "float64"):
            problems.append("precision must be 'float32' or 'float64'")
        problems.extend(self.densify.validate() if self.densify.enabled else [])
        return problems

    def check(self) -> "TrainConfig":
        problems = self.validate()
        if problems:
            raise ContractError("invalid TrainConfig: " + "; ".join(problems))
        return self

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(copy.deepcopy(self), **kw)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)

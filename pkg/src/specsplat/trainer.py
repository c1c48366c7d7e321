"""Optimization loop: point initialization, dual-loss steps, Adam, densify/prune."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import colorpipe, losses, rasterizer
from .colorpipe import ColorPipeConfig
from .core import (Camera, ContractError, ConversionStage, DensifyConfig, GaussianCloud, LossMode, SpecsplatError,
                   SpectralBasis, TrainConfig, logit, num_sh_coeffs, sigmoid)
from .losses import LossBreakdown
from .rasterizer import ParamGradients, RenderSettings
from .scene_io import PointSet, Scene, View
from .sh import C0, RADIANCE_OFFSET

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15
INIT_OPACITY = 0.1
SPLIT_SHRINK = 1.6


class EmptyCloudError(SpecsplatError):
    """Pruning would remove every Gaussian."""


# ---------------------------------------------------------------- initialization

def init_from_points(points, basis: SpectralBasis, sh_degree: int = 3, dtype=np.float64) -> GaussianCloud:
    """Cloud seeded from points with base spectra in [0, 1].

    The degree-0 coefficient inverts the radiance decoding so that every
    Gaussian initially shows its base spectrum from all directions.  Scales
    are isotropic, the mean distance to the three nearest neighbours.
    """
    if isinstance(points, PointSet):
        pos, spectra = points.positions, points.spectra
    else:
        points = list(points)
        if not points:
            raise ContractError("cannot initialize from an empty point set")
        pos = np.array([p for p, _ in points], dtype=np.float64)
        spectra = np.array([s for _, s in points], dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    spectra = np.asarray(spectra, dtype=np.float64)
    n = pos.shape[0]
    if n == 0:
        raise ContractError("cannot initialize from an empty point set")
    if spectra.shape != (n, basis.band_count):
        raise ContractError(f"base spectra shape {spectra.shape} does not match ({n}, {basis.band_count})")
    if spectra.min() < 0 or spectra.max() > 1:
        raise ContractError("base spectra must lie in [0, 1]")

    if n > 1:
        k = min(3, n - 1)
        dist, _ = cKDTree(pos).query(pos, k=k + 1)
        mean_nn = np.asarray(dist).reshape(n, k + 1)[:, 1:].mean(axis=1)
    else:
        mean_nn = np.full(1, 0.01)
    log_scale = np.log(np.maximum(mean_nn, 1e-7))

    sh = np.zeros((n, basis.band_count, num_sh_coeffs(sh_degree)))
    sh[:, :, 0] = (spectra - RADIANCE_OFFSET) / C0
    return GaussianCloud.create(
        pos, sh, basis,
        log_scales=np.repeat(log_scale[:, None], 3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        dtype=dtype,
    )


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    # densification statistics
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> "OptimizerState":
        params = cloud.params()
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   grad_accum=np.zeros(cloud.count, dtype=np.float64),
                   grad_count=np.zeros(cloud.count, dtype=np.int64))

    def reset_stats(self, n: int) -> None:
        self.grad_accum = np.zeros(n, dtype=np.float64)
        self.grad_count = np.zeros(n, dtype=np.int64)


def learning_rates(config: TrainConfig, cloud: GaussianCloud, step: int, spatial_scale: float) -> dict:
    """Per-parameter learning rates (arrays broadcastable to each parameter)."""
    lr = config.lr
    total = max(config.iterations, 1)
    frac = min(max(step / total, 0.0), 1.0)
    pos = math.exp((1 - frac) * math.log(lr.position) + frac * math.log(lr.position_final)) * spatial_scale
    sh_lr = np.full(num_sh_coeffs(cloud.sh_degree), lr.sh_rest)
    sh_lr[0] = lr.sh0
    return {
        "positions": pos,
        "log_scales": lr.scale,
        "rotations": lr.rotation,
        "opacity_logits": lr.opacity,
        "sh_coeffs": sh_lr.astype(cloud.dtype),
    }


def adam_update(cloud: GaussianCloud, state: OptimizerState, grads: ParamGradients, lrs: dict) -> None:
    """One bias-corrected Adam step, in place; quaternions renormalized afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1 - BETA1 ** t
    bc2 = 1 - BETA2 ** t
    for name, g in grads.as_dict().items():
        p = getattr(cloud, name)
        g = g.astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p -= (np.asarray(lrs[name], dtype=p.dtype) * step).astype(p.dtype)
    cloud.normalize_rotations()


# ---------------------------------------------------------------- one iteration

def pipe_config_for(config: TrainConfig, base: ColorPipeConfig | None = None) -> ColorPipeConfig:
    base = base or ColorPipeConfig()
    return replace(base, apply_gamma=config.apply_gamma, apply_white_balance=config.apply_white_balance)


@dataclass
class TrainView:
    camera: Camera
    gt_ms: np.ndarray | None = None
    gt_rgb: np.ndarray | None = None

    @classmethod
    def from_view(cls, view: View, dtype=np.float32) -> "TrainView":
        return cls(view.camera,
                   None if view.spectral is None else np.asarray(view.spectral.data, dtype=dtype),
                   None if view.rgb is None else np.asarray(view.rgb.data, dtype=dtype))


def loss_and_grads(cloud: GaussianCloud, view: TrainView, config: TrainConfig,
                   color: ColorPipeConfig | None = None,
                   settings: RenderSettings = rasterizer.DEFAULT_SETTINGS) -> tuple[LossBreakdown, ParamGradients]:
    """Objective value and exact gradients for one view, through the configured conversion stage."""
    color = color or pipe_config_for(config)
    mode = config.loss_mode
    need_ms = mode in (LossMode.MS, LossMode.DUAL)
    need_rgb = mode in (LossMode.RGB, LossMode.DUAL)
    if need_ms and view.gt_ms is None:
        raise ContractError(f"loss mode {mode.value} needs a spectral ground truth")
    if need_rgb and view.gt_rgb is None:
        raise ContractError(f"loss mode {mode.value} needs an RGB ground truth")
    pipe = colorpipe.get_pipe(color, cloud.basis)
    dt = cloud.dtype

    if config.conversion_stage is ConversionStage.PIXEL:
        img, aux = rasterizer.rasterize(cloud, view.camera, settings)
        pred_ms = img.data
        pred_rgb = pipe.spectra_to_rgb(pred_ms) if need_rgb else None
        breakdown, g_ms, g_rgb = losses.dual_loss(pred_ms if need_ms else None, view.gt_ms,
                                                  pred_rgb, view.gt_rgb, config)
        g_img = np.zeros_like(pred_ms)
        if g_ms is not None:
            g_img += g_ms
        if g_rgb is not None:
            g_img += pipe.spectra_to_rgb_vjp(pred_ms, g_rgb.astype(dt))
        grads = rasterizer.rasterize_backward(cloud, view.camera, aux, g_img)
    else:
        rgb, spec, aux = colorpipe.render_gaussian_level(cloud, view.camera, color, settings, with_spectral=need_ms)
        breakdown, g_ms, g_rgb = losses.dual_loss(spec, view.gt_ms, rgb if need_rgb else None,
                                                  view.gt_rgb, config)
        if g_rgb is None:
            g_rgb = np.zeros_like(rgb)
        grads = colorpipe.render_gaussian_level_backward(cloud, view.camera, color, aux, g_rgb, g_ms)
    return breakdown, grads


def train_step(cloud: GaussianCloud, state: OptimizerState, view: TrainView, config: TrainConfig,
               color: ColorPipeConfig | None = None,
               settings: RenderSettings = rasterizer.DEFAULT_SETTINGS,
               spatial_scale: float = 1.0) -> LossBreakdown:
    """Forward, backward and one Adam update for a single view (in place)."""
    breakdown, grads = loss_and_grads(cloud, view, config, color, settings)
    if state.grad_accum is not None and grads.mean2d is not None:
        cam = view.camera
        ndc = grads.mean2d.astype(np.float64) * np.array([0.5 * cam.width, 0.5 * cam.height])
        norm = np.linalg.norm(ndc, axis=1)
        seen = norm > 0
        state.grad_accum[seen] += norm[seen]
        state.grad_count[seen] += 1
    adam_update(cloud, state, grads, learning_rates(config, cloud, state.step, spatial_scale))
    return breakdown


# ---------------------------------------------------------------- densification

def _sample_within_sigma(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.standard_normal((n, 3))
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    return np.where(norm > 1, z / np.maximum(norm, 1e-12), z)


def densify_and_prune(cloud: GaussianCloud, state: OptimizerState, mean_grads: np.ndarray,
                      config: DensifyConfig, rng: np.random.Generator) -> tuple[GaussianCloud, OptimizerState]:
    """Clone small / split large high-gradient Gaussians, then drop transparent ones.

    Clones are offset by a sample inside the parent's 1-sigma ellipsoid.  A
    split replaces its parent by two children drawn from the parent's
    Gaussian, with scales divided by 1.6 and opacity ``1 - sqrt(1 - a)`` so the
    overlapping pair keeps the parent's peak opacity.
    """
    mean_grads = np.asarray(mean_grads, dtype=np.float64)
    n = cloud.count
    selected = mean_grads > config.grad_threshold
    scales = np.exp(cloud.log_scales.astype(np.float64))
    big = scales.max(axis=1) > config.scale_split_threshold
    room = max(config.max_count - n, 0)
    clone_idx = np.flatnonzero(selected & ~big)[:room]
    split_idx = np.flatnonzero(selected & big)[: max(room - len(clone_idx), 0)]

    rot = rasterizer.quaternion_to_rotation(cloud.rotations.astype(np.float64))
    params = {k: v for k, v in cloud.params().items()}
    new_rows: dict[str, list[np.ndarray]] = {k: [] for k in params}

    if len(clone_idx):
        off = _sample_within_sigma(rng, len(clone_idx)) * scales[clone_idx]
        off = np.einsum("gij,gj->gi", rot[clone_idx], off)
        for k, v in params.items():
            new_rows[k].append(v[clone_idx].copy())
        new_rows["positions"][-1] += off.astype(cloud.dtype)

    if len(split_idx):
        parent_op = sigmoid(cloud.opacity_logits[split_idx].astype(np.float64))
        child_op = np.clip(1 - np.sqrt(np.maximum(1 - parent_op, 0)), 1e-6, 1 - 1e-6)
        for _ in range(2):
            z = rng.standard_normal((len(split_idx), 3)) * scales[split_idx]
            off = np.einsum("gij,gj->gi", rot[split_idx], z)
            for k, v in params.items():
                new_rows[k].append(v[split_idx].copy())
            new_rows["positions"][-1] += off.astype(cloud.dtype)
            new_rows["log_scales"][-1] -= cloud.dtype.type(math.log(SPLIT_SHRINK))
            new_rows["opacity_logits"][-1] = logit(child_op).astype(cloud.dtype)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    grown = {k: np.concatenate([v[keep]] + new_rows[k], axis=0) for k, v in params.items()}
    added = sum(len(r) for r in new_rows["positions"])
    m = {k: np.concatenate([state.m[k][keep], np.zeros((added,) + state.m[k].shape[1:], state.m[k].dtype)])
         for k in params}
    v = {k: np.concatenate([state.v[k][keep], np.zeros((added,) + state.v[k].shape[1:], state.v[k].dtype)])
         for k in params}

    alive = sigmoid(grown["opacity_logits"].astype(np.float64)) >= config.opacity_prune_threshold
    if not alive.any():
        raise EmptyCloudError("every Gaussian fell below the opacity prune threshold")
    out = replace(cloud, **{k: arr[alive] for k, arr in grown.items()})
    new_state = OptimizerState({k: a[alive] for k, a in m.items()}, {k: a[alive] for k, a in v.items()}, state.step)
    new_state.reset_stats(out.count)
    return out, new_state


# ---------------------------------------------------------------- evaluation

def render_rgb(cloud: GaussianCloud, camera: Camera, stage: ConversionStage, color: ColorPipeConfig,
               settings: RenderSettings = rasterizer.DEFAULT_SETTINGS, spectral=None) -> np.ndarray:
    """Display RGB (clamped) through the given conversion stage."""
    if stage is ConversionStage.PIXEL:
        if spectral is None:
            spectral = rasterizer.rasterize(cloud, camera, settings)[0]
        return colorpipe.convert_pixel_level(spectral, color).data
    return colorpipe.convert_gaussian_level(cloud, camera, color, settings).data


def evaluate(cloud: GaussianCloud, views: Sequence[View], stage: ConversionStage, color: ColorPipeConfig,
             settings: RenderSettings = rasterizer.DEFAULT_SETTINGS) -> dict:
    """Per-view-averaged spectral/RGB PSNR and SSIM."""
    if not views:
        return {}
    ms_psnr, band_psnr, ms_ssim, rgb_psnr, rgb_ssim = [], [], [], [], []
    for view in views:
        spec, _ = rasterizer.rasterize(cloud, view.camera, settings)
        if view.spectral is not None:
            gt = view.spectral.data
            ms_psnr.append(losses.psnr(spec.data, gt))
            band_psnr.append(losses.psnr_per_channel(spec.data, gt))
            ms_ssim.append(losses.ssim(spec.data, gt))
        if view.rgb is not None:
            rgb = render_rgb(cloud, view.camera, stage, color, settings, spectral=spec)
            rgb_psnr.append(losses.psnr(rgb, view.rgb.data))
            rgb_ssim.append(losses.ssim(rgb, view.rgb.data))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return {
        "psnr_ms": mean(ms_psnr),
        "psnr_ms_per_band": [float(x) for x in np.mean(band_psnr, axis=0)] if band_psnr else [],
        "ssim_ms": mean(ms_ssim),
        "psnr_rgb": mean(rgb_psnr),
        "ssim_rgb": mean(rgb_ssim),
        "views": len(views),
    }


# ---------------------------------------------------------------- full loop

@dataclass
class TrainReport:
    history: list[LossBreakdown] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final_count: int = 0
    wall_clock_s: float = field(default=0.0, compare=False)

    @property
    def final_metrics(self) -> dict:
        return self.evals[-1] if self.evals else {}

    def log_records(self) -> list[dict]:
        return [{"iteration": i + 1, **h.as_dict(), "count": c}
                for i, (h, c) in enumerate(zip(self.history, self.counts))]


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the camera centres around their mean, padded by 10%."""
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max() or 1.0)


def train(scene: Scene, config: TrainConfig, *, color: ColorPipeConfig | None = None,
          settings: RenderSettings = rasterizer.DEFAULT_SETTINGS,
          init_cloud: GaussianCloud | None = None,
          on_iteration: Callable[[int, GaussianCloud, LossBreakdown], None] | None = None) -> tuple[GaussianCloud, TrainReport]:
    """Fit a cloud to the scene's training views.

    Views are visited in a seeded shuffle per epoch; held-out (``test``)
    views are evaluated every ``eval_interval`` iterations and at the end.
    """
    config.check()
    color = pipe_config_for(config, color)
    start = time.perf_counter()
    dtype = config.dtype
    if init_cloud is not None:
        cloud = init_cloud.astype(dtype)
    elif scene.points is not None:
        cloud = init_from_points(scene.points, scene.basis, config.sh_degree, dtype=dtype)
    else:
        raise ContractError("scene has no seed points and no initial cloud was given")
    train_views = scene.split("train")
    if not train_views:
        raise ContractError("scene has no training views")
    test_views = scene.split("test")
    prepared = [TrainView.from_view(v, dtype) for v in train_views]
    spatial = config.spatial_lr_scale or scene_extent([v.camera for v in scene.views])

    rng = np.random.default_rng(config.seed)
    state = OptimizerState.for_cloud(cloud)
    report = TrainReport()
    queue: list[int] = []
    dcfg = config.densify
    for it in range(1, config.iterations + 1):
        if not queue:
            queue = list(rng.permutation(len(prepared)))
        view = prepared[queue.pop()]
        breakdown = train_step(cloud, state, view, config, color, settings, spatial)
        report.history.append(breakdown)
        report.counts.append(cloud.count)

        if dcfg.enabled and dcfg.start_iter <= it < dcfg.stop_iter and it % dcfg.interval == 0:
            mean_grads = state.grad_accum / np.maximum(state.grad_count, 1)
            cloud, state = densify_and_prune(cloud, state, mean_grads, dcfg, rng)
        if config.opacity_reset_interval and it % config.opacity_reset_interval == 0 and it < config.iterations:
            cloud.opacity_logits = np.minimum(cloud.opacity_logits, cloud.dtype.type(logit(0.01)))
            state.m["opacity_logits"][:] = 0
            state.v["opacity_logits"][:] = 0
        if on_iteration is not None:
            on_iteration(it, cloud, breakdown)
        if test_views and config.eval_interval and it % config.eval_interval == 0 and it != config.iterations:
            report.evals.append({"iteration": it, **evaluate(cloud, test_views, config.conversion_stage, color, settings)})
    if test_views:
        report.evals.append({"iteration": config.iterations,
                             **evaluate(cloud, test_views, config.conversion_stage, color, settings)})
    report.final_count = cloud.count
    report.wall_clock_s = time.perf_counter() - start
    return cloud, report

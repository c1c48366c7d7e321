"""Finite-difference harness for the full training objective.

Random small scenes are drawn with a seeded generator. Configurations that
sit within a margin of one of the objective's non-smooth points are redrawn,
because a central difference straddling them measures a jump rather than a
derivative. The non-smooth points are:

- a pixel alpha at the 1/255 cutoff;
- transmittance at the early-stop threshold;
- the radiance clamp at 0;
- the sRGB segment switch;
- an L1 residual at 0;
- two Gaussians at equal depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from specsplat import colorpipe, losses, rasterizer
from specsplat.colorpipe import SRGB_THRESHOLD, ColorPipeConfig
from specsplat.core import (Camera, ConversionStage, GaussianCloud, LossMode, SpectralBasis, TrainConfig,
                            num_sh_coeffs)
from specsplat.rasterizer import DEFAULT_SETTINGS
from specsplat.trainer import TrainView, loss_and_grads

H_STEP = 1e-5
MARGIN_LOG_ALPHA = 2e-3
MARGIN_VALUE = 2e-4
MARGIN_DEPTH = 1e-3


@dataclass
class GradCase:
    cloud: GaussianCloud
    camera: Camera
    view: TrainView
    config: TrainConfig
    color: ColorPipeConfig


def random_case(rng: np.random.Generator, stage: ConversionStage, mode: LossMode, size: int = 8,
                n_gaussians: int | None = None, n_bands: int | None = None) -> GradCase:
    g = n_gaussians or int(rng.integers(1, 6))
    n = n_bands or int(rng.integers(4, 17))
    degree = int(rng.integers(0, 4))
    basis = SpectralBasis(tuple(float(x) for x in np.sort(rng.choice(np.arange(400, 801, 5), n, replace=False))))
    camera = Camera.look_at((0.0, -3.0, 0.4), (0.0, 0.0, 0.0), width=size, height=size, fov_deg=45.0)
    pos = rng.uniform(-0.35, 0.35, size=(g, 3))
    sh = rng.normal(0.0, 0.15, size=(g, n, num_sh_coeffs(degree)))
    sh[:, :, 0] = rng.uniform(-0.6, 1.5, size=(g, n))
    quats = rng.standard_normal((g, 4))
    cloud = GaussianCloud.create(pos, sh, basis,
                                 log_scales=np.log(rng.uniform(0.08, 0.3, size=(g, 3))),
                                 rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
                                 opacity_logits=rng.uniform(-1.5, 2.5, size=g))
    view = TrainView(camera, rng.uniform(0.0, 1.0, size=(size, size, n)), rng.uniform(0.0, 1.0, size=(size, size, 3)))
    config = TrainConfig(conversion_stage=stage, loss_mode=mode, precision="float64")
    return GradCase(cloud, camera, view, config, ColorPipeConfig())


def _predictions(case: GradCase, cloud: GaussianCloud):
    pipe = colorpipe.get_pipe(case.color, cloud.basis)
    if case.config.conversion_stage is ConversionStage.PIXEL:
        spec, _ = rasterizer.rasterize(cloud, case.camera)
        return spec.data, pipe.spectra_to_rgb(spec.data)
    rgb, spec, _ = colorpipe.render_gaussian_level(cloud, case.camera, case.color, with_spectral=True)
    return spec, rgb


def objective(case: GradCase, cloud: GaussianCloud) -> float:
    ms, rgb = _predictions(case, cloud)
    breakdown, _, _ = losses.dual_loss(ms, case.view.gt_ms, rgb, case.view.gt_rgb, case.config)
    return breakdown.l_total


def objective_terms(case: GradCase, cloud: GaussianCloud) -> tuple[np.ndarray, float]:
    """Per-element contributions to the objective and the constant they omit.

    ``sum(terms) + constant`` equals :func:`objective`.  Differencing two
    term vectors element by element before summing avoids the cancellation
    of subtracting two O(1) totals, whose rounding (about 1e-16 / h) would
    otherwise swamp gradients near 1e-8.
    """
    ms, rgb = _predictions(case, cloud)
    lam_ms, lam_rgb = losses.loss_weights(case.config)
    w = case.config.dssim_weight
    parts, constant = [], 0.0
    for lam, pred, gt in ((lam_ms, ms, case.view.gt_ms), (lam_rgb, rgb, case.view.gt_rgb)):
        if lam == 0:
            continue
        size = pred.size
        parts.append((lam * (1 - w) / size) * np.abs(pred - gt).ravel())
        parts.append((-lam * w / 2 / size) * losses.ssim_map(pred, gt).ravel())
        constant += lam * w / 2
    return np.concatenate(parts), constant


def kink_distance_ok(case: GradCase) -> bool:
    """False when the configuration is within a margin of a non-smooth point."""
    s = DEFAULT_SETTINGS
    cloud, cam = case.cloud, case.camera
    proj = rasterizer.project(cloud, cam)
    order = list(proj.order)
    if len(order) == 0:
        return False
    depths = np.sort(proj.depth[order])
    if len(depths) > 1 and np.min(np.diff(depths)) < MARGIN_DEPTH:
        return False
    cache = rasterizer.decode_colors(cloud, proj)
    if np.any(np.abs(cache.raw[order]) < MARGIN_VALUE):
        return False
    pipe = colorpipe.get_pipe(case.color, cloud.basis)
    if case.config.conversion_stage is ConversionStage.GAUSSIAN:
        lin = pipe.spectra_to_linear(cache.colors[order])
        if np.any(np.abs(lin - SRGB_THRESHOLD) < MARGIN_VALUE):
            return False
    log_amin, log_tmin = math.log(s.alpha_min), math.log(s.t_min)
    for v in range(cam.height):
        for u in range(cam.width):
            log_t = 0.0
            for i in order:
                dx, dy = u + 0.5 - proj.mean2d[i, 0], v + 0.5 - proj.mean2d[i, 1]
                a_, b_, c_ = proj.conic[i]
                log_alpha = math.log(proj.opacity[i]) - 0.5 * (a_ * dx * dx + 2 * b_ * dx * dy + c_ * dy * dy)
                if abs(log_alpha - log_amin) < MARGIN_LOG_ALPHA or log_alpha > math.log(s.alpha_max) - MARGIN_LOG_ALPHA:
                    return False
                if log_alpha <= log_amin:
                    continue
                nxt = log_t + math.log1p(-math.exp(log_alpha))
                if abs(nxt - log_tmin) < MARGIN_LOG_ALPHA:
                    return False
                if nxt < log_tmin:
                    break
                log_t = nxt
    ms, rgb = _predictions(case, cloud)
    if np.any(np.abs(ms - case.view.gt_ms) < MARGIN_VALUE) or np.any(np.abs(rgb - case.view.gt_rgb) < MARGIN_VALUE):
        return False
    if case.config.conversion_stage is ConversionStage.PIXEL:
        if np.any(np.abs(pipe.spectra_to_linear(ms) - SRGB_THRESHOLD) < MARGIN_VALUE):
            return False
    return True


def draw_case(rng: np.random.Generator, stage: ConversionStage, mode: LossMode, **kw) -> tuple[GradCase, int]:
    """A random case away from non-smooth points, and how many draws were rejected."""
    rejected = 0
    while True:
        case = random_case(rng, stage, mode, **kw)
        if kink_distance_ok(case):
            return case, rejected
        rejected += 1


@dataclass
class GradReport:
    group: str
    checked: int
    worst_rel: float
    worst_index: tuple


def check_gradients(case: GradCase, h: float = H_STEP, grad_floor: float = 1e-8) -> list[GradReport]:
    """Compare the analytic gradient with central differences for every entry of every group."""
    _, grads = loss_and_grads(case.cloud, case.view, case.config, case.color)
    reports = []
    for name, analytic in grads.as_dict().items():
        base = getattr(case.cloud, name)
        worst, worst_idx, checked = 0.0, (), 0
        for idx in np.ndindex(base.shape):
            a = float(analytic[idx])
            probe = case.cloud.copy()
            arr = getattr(probe, name)
            arr[idx] = base[idx] + h
            t_plus, _ = objective_terms(case, probe)
            arr[idx] = base[idx] - h
            t_minus, _ = objective_terms(case, probe)
            fd = math.fsum(t_plus - t_minus) / (2 * h)
            if max(abs(a), abs(fd)) <= grad_floor:
                continue
            checked += 1
            rel = abs(a - fd) / max(abs(a), abs(fd))
            if rel > worst:
                worst, worst_idx = rel, idx
        reports.append(GradReport(name, checked, worst, worst_idx))
    return reports

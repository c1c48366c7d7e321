"""Tile-based differentiable splatting of N-channel Gaussians.

Forward: EWA projection of each Gaussian, a global depth sort, binning into
square pixel tiles and front-to-back alpha compositing

    C(p) = sum_i c_i a_i(p) prod_{j<i} (1 - a_j(p)).

Backward: the exact adjoint of the same computation.  Per-tile weights are
recomputed from the stored tile lists instead of being kept from the forward
pass, so memory stays proportional to the contributor counts.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .core import Camera, ContractError, GaussianCloud, SpectralImage, check_cloud, quaternion_to_rotation, sigmoid


@dataclass(frozen=True)
class RenderSettings:
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_min: float = 1e-4
    blur: float = 0.3
    tile_size: int = 16
    # culling margin around the image, as a fraction of its size
    guard_band: float = 0.3
    background: float = 0.0
    threads: int = 1


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Projection:
    """Per-Gaussian projection state (arrays over the whole cloud)."""

    visible: np.ndarray
    cam_points: np.ndarray
    mean2d: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    scales2: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    order: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return self.cam_points[:, 2]


@dataclass
class ColorCache:
    colors: np.ndarray
    raw: np.ndarray
    basis: np.ndarray
    basis_jac: np.ndarray


@dataclass
class CompositeAux:
    """What the backward pass needs to replay the compositing."""

    height: int
    width: int
    channels: int
    tiles: list
    final_transmittance: np.ndarray
    n_contrib: np.ndarray


@dataclass
class RenderAux:
    projection: Projection
    color_cache: ColorCache
    composite: CompositeAux
    fingerprint: str
    settings: RenderSettings

    @property
    def final_transmittance(self) -> np.ndarray:
        return self.composite.final_transmittance

    def contributors(self, row: int, col: int) -> list[tuple[int, float, float]]:
        """Ordered (gaussian_index, alpha, transmittance_before) for one pixel."""
        ts = self.settings.tile_size
        tile = next(t for t in self.composite.tiles if t.y0 == (row // ts) * ts and t.x0 == (col // ts) * ts)
        fwd = _tile_forward(tile, self.projection, self.color_cache.colors, self.settings, want_image=False)
        p = (row - tile.y0) * (tile.x1 - tile.x0) + (col - tile.x0)
        out = []
        for k in np.flatnonzero(fwd.alpha[p] > 0):
            out.append((int(tile.ids[k]), float(fwd.alpha[p, k]), float(fwd.t_before[p, k])))
        return out


@dataclass
class ParamGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    # screen-space mean gradient (pixels), used for densification statistics
    mean2d: np.ndarray = field(default=None, repr=False)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GaussianCloud.PARAM_NAMES}

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "ParamGradients":
        return cls(**{k: np.zeros_like(v) for k, v in cloud.params().items()},
                   mean2d=np.zeros((cloud.count, 2), dtype=cloud.dtype))


@dataclass
class _Tile:
    x0: int
    y0: int
    x1: int
    y1: int
    ids: np.ndarray


@dataclass
class _TileState:
    alpha: np.ndarray
    t_before: np.ndarray
    weights: np.ndarray
    final_t: np.ndarray
    gauss: np.ndarray
    raw: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    image: np.ndarray | None


def fingerprint(cloud: GaussianCloud, camera: Camera, settings: RenderSettings) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in cloud.params().values():
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(camera.world_to_camera.tobytes())
    h.update(repr((camera.width, camera.height, camera.fx, camera.fy, camera.cx, camera.cy,
                   camera.near, camera.far, settings, cloud.basis)).encode())
    return h.hexdigest()


def project(cloud: GaussianCloud, camera: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> Projection:
    """EWA projection of every Gaussian; culled Gaussians have ``visible`` False."""
    dt = cloud.dtype
    w_rot = camera.rotation.astype(dt)
    t = cloud.positions @ w_rot.T + camera.translation.astype(dt)
    depth = t[:, 2]

    qn = np.linalg.norm(cloud.rotations, axis=1)
    qu = cloud.rotations / qn[:, None]
    rot = quaternion_to_rotation(qu)
    s2 = np.exp(2 * cloud.log_scales)
    sigma = np.einsum("gij,gj,gkj->gik", rot, s2, rot)
    cov_cam = np.einsum("ij,gjk,lk->gil", w_rot, sigma, w_rot)

    in_depth = (depth > camera.near) & (depth < camera.far)
    tz = np.where(in_depth, depth, 1).astype(dt)
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    jac = np.zeros((cloud.count, 2, 3), dtype=dt)
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * t[:, 0] / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * t[:, 1] / tz**2
    cov = np.einsum("gij,gjk,glk->gil", jac, cov_cam, jac)
    a = cov[:, 0, 0] + settings.blur
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + settings.blur
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([fx * t[:, 0] / tz + camera.cx, fy * t[:, 1] / tz + camera.cy], axis=1).astype(dt)

    opacity = sigmoid(cloud.opacity_logits)
    mid = 0.5 * (a + c)
    lam1 = mid + np.sqrt(np.maximum(mid * mid - det, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        cut = np.where(opacity > settings.alpha_min, 2 * np.log(opacity / settings.alpha_min), 0)
    radius = np.sqrt(lam1 * cut)

    gw, gh = settings.guard_band * camera.width, settings.guard_band * camera.height
    visible = (
        in_depth
        & (opacity > settings.alpha_min)
        & (mean2d[:, 0] >= -gw) & (mean2d[:, 0] <= camera.width + gw)
        & (mean2d[:, 1] >= -gh) & (mean2d[:, 1] <= camera.height + gh)
        & (mean2d[:, 0] + radius >= 0.5) & (mean2d[:, 0] - radius <= camera.width - 0.5)
        & (mean2d[:, 1] + radius >= 0.5) & (mean2d[:, 1] - radius <= camera.height - 0.5)
    )

    rel = cloud.positions - camera.center.astype(dt)
    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / np.where(dist > 0, dist, 1)[:, None]

    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.argsort(depth[vis_idx], kind="stable")]
    return Projection(visible, t, mean2d, jac, cov_cam, rot, s2, qu, qn,
                      np.stack([a, b, c], axis=1), conic, radius, opacity, dirs, dist, order)


def decode_colors(cloud: GaussianCloud, proj: Projection) -> ColorCache:
    basis = sh.sh_basis(cloud.sh_degree, proj.view_dirs)
    colors, raw = sh.decode(cloud.sh_coeffs, basis)
    return ColorCache(colors, raw, basis, sh.sh_basis_jacobian(cloud.sh_degree, proj.view_dirs))


def _bin_tiles(proj: Projection, width: int, height: int, ts: int) -> list[_Tile]:
    ids = proj.order
    m = proj.mean2d[ids]
    r = proj.radius[ids]
    u_lo = np.clip(np.ceil(m[:, 0] - r - 0.5), 0, width - 1).astype(int) // ts
    u_hi = np.clip(np.floor(m[:, 0] + r - 0.5), 0, width - 1).astype(int) // ts
    v_lo = np.clip(np.ceil(m[:, 1] - r - 0.5), 0, height - 1).astype(int) // ts
    v_hi = np.clip(np.floor(m[:, 1] + r - 0.5), 0, height - 1).astype(int) // ts
    tiles = []
    for ty in range(-(-height // ts)):
        rows = (v_lo <= ty) & (v_hi >= ty)
        for tx in range(-(-width // ts)):
            sel = rows & (u_lo <= tx) & (u_hi >= tx)
            tiles.append(_Tile(tx * ts, ty * ts, min((tx + 1) * ts, width), min((ty + 1) * ts, height), ids[sel]))
    return tiles


def _tile_forward(tile: _Tile, proj: Projection, colors: np.ndarray, settings: RenderSettings,
                  want_image: bool = True) -> _TileState:
    dt = colors.dtype
    xs = np.arange(tile.x0, tile.x1, dtype=dt) + dt.type(0.5)
    ys = np.arange(tile.y0, tile.y1, dtype=dt) + dt.type(0.5)
    px = np.tile(xs, len(ys))
    py = np.repeat(ys, len(xs))
    ids = tile.ids
    mean = proj.mean2d[ids]
    con = proj.conic[ids]
    dx = px[:, None] - mean[None, :, 0]
    dy = py[:, None] - mean[None, :, 1]
    q = con[:, 0] * dx * dx + 2 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
    gauss = np.exp(-0.5 * q)
    raw = proj.opacity[ids] * gauss
    alpha = np.minimum(raw, dt.type(settings.alpha_max))
    alpha = np.where(alpha > settings.alpha_min, alpha, 0).astype(dt)
    if settings.t_min > 0:
        keep = np.cumprod(1 - alpha, axis=1) >= settings.t_min
        alpha = np.where(keep, alpha, 0).astype(dt)
    t_after = np.cumprod(1 - alpha, axis=1)
    t_before = np.empty_like(alpha)
    t_before[:, :1] = 1
    t_before[:, 1:] = t_after[:, :-1]
    final_t = t_after[:, -1] if len(ids) else np.ones(len(px), dtype=dt)
    weights = alpha * t_before
    image = None
    if want_image:
        image = weights @ colors[ids]
        if settings.background:
            image = image + final_t[:, None] * dt.type(settings.background)
    return _TileState(alpha, t_before, weights, final_t, gauss, raw, dx, dy, image)


def _map_tiles(fn, tiles, threads: int):
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tiles))
    return [fn(t) for t in tiles]


def composite(proj: Projection, colors: np.ndarray, camera: Camera,
              settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[np.ndarray, CompositeAux]:
    """Alpha-composite per-Gaussian ``colors`` (G x C) into an H x W x C image."""
    h, w = camera.height, camera.width
    channels = colors.shape[1]
    tiles = _bin_tiles(proj, w, h, settings.tile_size)
    image = np.zeros((h, w, channels), dtype=colors.dtype)
    final_t = np.ones((h, w), dtype=colors.dtype)
    n_contrib = np.zeros((h, w), dtype=np.int32)

    def run(tile):
        return _tile_forward(tile, proj, colors, settings)

    for tile, st in zip(tiles, _map_tiles(run, tiles, settings.threads)):
        th, tw = tile.y1 - tile.y0, tile.x1 - tile.x0
        image[tile.y0:tile.y1, tile.x0:tile.x1] = st.image.reshape(th, tw, channels)
        final_t[tile.y0:tile.y1, tile.x0:tile.x1] = st.final_t.reshape(th, tw)
        n_contrib[tile.y0:tile.y1, tile.x0:tile.x1] = (st.alpha > 0).sum(axis=1).reshape(th, tw)
    return image, CompositeAux(h, w, channels, tiles, final_t, n_contrib)


def composite_backward(proj: Projection, colors: np.ndarray, aux: CompositeAux, grad_image: np.ndarray,
                       settings: RenderSettings = DEFAULT_SETTINGS):
    """Adjoint of :func:`composite`.

    Returns gradients w.r.t. colors (G x C), mean2d (G x 2), conic (G x 3)
    and opacity (G,).
    """
    if grad_image.shape != (aux.height, aux.width, aux.channels):
        raise ContractError(f"grad_image shape {grad_image.shape} does not match the render "
                            f"({aux.height}, {aux.width}, {aux.channels})")
    dt = colors.dtype
    n = colors.shape[0]
    g_colors = np.zeros_like(colors)
    g_mean = np.zeros((n, 2), dtype=dt)
    g_conic = np.zeros((n, 3), dtype=dt)
    g_opac = np.zeros(n, dtype=dt)
    bg = dt.type(settings.background)

    def run(tile):
        ids = tile.ids
        if len(ids) == 0:
            return None
        st = _tile_forward(tile, proj, colors, settings, want_image=False)
        gp = grad_image[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, aux.channels)
        col = colors[ids]
        u = gp @ col.T
        v = u * st.weights
        after = np.cumsum(v[:, ::-1], axis=1)[:, ::-1] - v
        if bg:
            after = after + (gp.sum(axis=1) * bg * st.final_t)[:, None]
        active = st.alpha > 0
        g_alpha = np.where(active, u * st.t_before - after / (1 - st.alpha), 0)
        g_raw = np.where(active & (st.raw < settings.alpha_max), g_alpha, 0)
        gc = st.weights.T @ gp
        go = (g_raw * st.gauss).sum(axis=0)
        g_q = g_raw * (-0.5 * st.raw)
        con = proj.conic[ids]
        gA = (g_q * st.dx * st.dx).sum(axis=0)
        gB = (g_q * 2 * st.dx * st.dy).sum(axis=0)
        gC = (g_q * st.dy * st.dy).sum(axis=0)
        gmx = -2 * (g_q * (con[:, 0] * st.dx + con[:, 1] * st.dy)).sum(axis=0)
        gmy = -2 * (g_q * (con[:, 1] * st.dx + con[:, 2] * st.dy)).sum(axis=0)
        return ids, gc, go, np.stack([gA, gB, gC], axis=1), np.stack([gmx, gmy], axis=1)

    for res in _map_tiles(run, aux.tiles, settings.threads):
        if res is None:
            continue
        ids, gc, go, gq, gm = res
        g_colors[ids] += gc
        g_opac[ids] += go
        g_conic[ids] += gq
        g_mean[ids] += gm
    return g_colors, g_mean, g_conic, g_opac


def project_backward(cloud: GaussianCloud, camera: Camera, proj: Projection, g_mean2d: np.ndarray,
                     g_conic: np.ndarray, g_opacity: np.ndarray, g_dirs: np.ndarray | None = None) -> dict:
    """Chain screen-space gradients back to positions, scales, rotations, opacity logits."""
    dt = cloud.dtype
    vis = proj.visible[:, None]
    g_mean2d = np.where(vis, g_mean2d, 0)
    g_conic = np.where(vis, g_conic, 0)
    g_opacity = np.where(proj.visible, g_opacity, 0)
    t = proj.cam_points
    tz = np.where(proj.visible, t[:, 2], 1)
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)

    # conic = inverse(cov2d): dL/dcov = -K G K with G the symmetric conic gradient
    A, B, C = proj.conic.T
    gA, gB, gC = g_conic.T
    gK = np.stack([np.stack([gA, 0.5 * gB], -1), np.stack([0.5 * gB, gC], -1)], -2)
    K = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    g_cov2d = -K @ gK @ K

    jac = proj.jac
    m = proj.cov_cam
    g_m = np.einsum("gji,gjk,gkl->gil", jac, g_cov2d, jac)
    g_jac = 2 * np.einsum("gij,gjk,gkl->gil", g_cov2d, jac, m)

    g_t = np.zeros_like(t)
    g_t[:, 0] = g_mean2d[:, 0] * fx / tz + g_jac[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] = g_mean2d[:, 1] * fy / tz + g_jac[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] = (
        -(g_mean2d[:, 0] * fx * t[:, 0] + g_mean2d[:, 1] * fy * t[:, 1]) / tz**2
        - g_jac[:, 0, 0] * fx / tz**2 + g_jac[:, 0, 2] * 2 * fx * t[:, 0] / tz**3
        - g_jac[:, 1, 1] * fy / tz**2 + g_jac[:, 1, 2] * 2 * fy * t[:, 1] / tz**3
    )
    w_rot = camera.rotation.astype(dt)
    g_pos = g_t @ w_rot

    g_sigma = np.einsum("ji,gjk,kl->gil", w_rot, g_m, w_rot)
    rot, s2 = proj.rot, proj.scales2
    g_rot = 2 * np.einsum("gij,gjk,gk->gik", g_sigma, rot, s2)
    g_s2 = np.einsum("gji,gjk,gki->gi", rot, g_sigma, rot)
    g_log_scales = g_s2 * 2 * s2

    w, x, y, z = proj.quat_unit.T
    G = g_rot
    gq = 2 * np.stack([
        -z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1],
        y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
        + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2],
        -2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
        - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2],
        -2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
        + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1],
    ], axis=1)
    qu = proj.quat_unit
    g_quat = (gq - qu * (qu * gq).sum(axis=1, keepdims=True)) / proj.quat_norm[:, None]

    if g_dirs is not None:
        d = proj.view_dirs
        tangential = g_dirs - d * (d * g_dirs).sum(axis=1, keepdims=True)
        g_pos = g_pos + tangential / np.where(proj.view_dist > 0, proj.view_dist, 1)[:, None]

    op = proj.opacity
    return {
        "positions": g_pos.astype(dt),
        "log_scales": np.where(vis, g_log_scales, 0).astype(dt),
        "rotations": np.where(vis, g_quat, 0).astype(dt),
        "opacity_logits": (g_opacity * op * (1 - op)).astype(dt),
    }


def decode_colors_backward(cloud: GaussianCloud, cache: ColorCache, g_colors: np.ndarray):
    """Gradients of decoded radiance w.r.t. SH coefficients and view directions."""
    return sh.decode_vjp(cloud.sh_coeffs, cache.basis, cache.basis_jac, cache.raw, g_colors)


def _prepare(cloud: GaussianCloud, camera: Camera):
    check_cloud(cloud, check_norms=False)
    problems = camera.validate()
    if problems:
        raise ContractError("invalid Camera: " + "; ".join(problems))


def rasterize(cloud: GaussianCloud, camera: Camera,
              settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[SpectralImage, RenderAux]:
    """Render the N-band radiance image of ``cloud`` seen from ``camera``."""
    _prepare(cloud, camera)
    proj = project(cloud, camera, settings)
    cache = decode_colors(cloud, proj)
    image, caux = composite(proj, cache.colors, camera, settings)
    aux = RenderAux(proj, cache, caux, fingerprint(cloud, camera, settings), settings)
    return SpectralImage(image, cloud.basis), aux


def backward_from_colors(cloud: GaussianCloud, camera: Camera, proj: Projection, cache: ColorCache,
                         g_colors, g_mean2d, g_conic, g_opacity) -> ParamGradients:
    """Finish the backward pass once per-Gaussian color gradients are known."""
    g_sh, g_dirs = decode_colors_backward(cloud, cache, np.where(proj.visible[:, None], g_colors, 0))
    geo = project_backward(cloud, camera, proj, g_mean2d, g_conic, g_opacity, g_dirs)
    return ParamGradients(sh_coeffs=g_sh.astype(cloud.dtype), mean2d=g_mean2d, **geo)


def rasterize_backward(cloud: GaussianCloud, camera: Camera, aux: RenderAux, grad_image) -> ParamGradients:
    """Gradients of ``sum(grad_image * C)`` w.r.t. every cloud parameter."""
    settings = aux.settings
    if fingerprint(cloud, camera, settings) != aux.fingerprint:
        raise ContractError("RenderAux was produced for a different cloud, camera or settings")
    grad_image = np.asarray(grad_image, dtype=cloud.dtype)
    g_colors, g_mean, g_conic, g_opac = composite_backward(
        aux.projection, aux.color_cache.colors, aux.composite, grad_image, settings)
    return backward_from_colors(cloud, camera, aux.projection, aux.color_cache, g_colors, g_mean, g_conic, g_opac)


def reference_composite(proj: Projection, colors: np.ndarray, camera: Camera,
                        settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force per-pixel compositing over every visible Gaussian, no tiling.

    Slow; kept as an oracle for the tiled path.  Returns (image, final transmittance).
    """
    h, w = camera.height, camera.width
    image = np.zeros((h, w, colors.shape[1]), dtype=np.float64)
    final_t = np.ones((h, w))
    order = [int(i) for i in proj.order]
    means = proj.mean2d.astype(np.float64)
    conics = proj.conic.astype(np.float64)
    ops = proj.opacity.astype(np.float64)
    cols = colors.astype(np.float64)
    for v in range(h):
        for u in range(w):
            px, py = u + 0.5, v + 0.5
            T = 1.0
            acc = np.zeros(colors.shape[1])
            for i in order:
                ddx, ddy = px - means[i, 0], py - means[i, 1]
                A, B, C = conics[i]
                a = min(settings.alpha_max, ops[i] * math.exp(-0.5 * (A * ddx * ddx + 2 * B * ddx * ddy + C * ddy * ddy)))
                if a <= settings.alpha_min:
                    continue
                test_t = T * (1 - a)
                if test_t < settings.t_min:
                    break
                acc += cols[i] * (a * T)
                T = test_t
            image[v, u] = acc + T * settings.background
            final_t[v, u] = T
    return image, final_t


def reference_rasterize(cloud: GaussianCloud, camera: Camera,
                        settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    proj = project(cloud, camera, settings)
    return reference_composite(proj, decode_colors(cloud, proj).colors, camera, settings)[0]

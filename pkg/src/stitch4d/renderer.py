"""Differentiable splatting of time-varying Gaussians into pinhole views.

Projection is the standard EWA linearization: with W the world-to-camera
rotation and J the Jacobian of the pixel projection at the Gaussian center,

    Sigma_2d = J W Sigma W^T J^T + 0.3 * I   (px^2; the floor low-passes
                                              sub-pixel Gaussians)

Gaussians are culled behind the 0.05 m near plane, when their center falls
outside 1.3x the view frustum (the linearization is meaningless there and
produces unboundedly smeared splats), and when their 3-sigma screen
bounding box misses the image.  Survivors are depth-sorted (ties by input
index) and composited front to back; see `_kernels` for the exact
cutoff/clamp/termination rules shared by the fast path and the naive
oracle below.

`render_backward` recomputes the forward pass and returns analytic
gradients for every Gaussian parameter; only the RGB output carries
gradient (accum/depth are diagnostics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import ALPHA_CLAMP, ALPHA_CUTOFF, T_TERMINATE, TILE_SIZE
from .geometry import PinholeCamera
from .scene import GaussianScene, SceneEval, SceneGradients, eval_backward, eval_scene

NEAR_CLIP = 0.05      # meters
COV_FLOOR = 0.3       # px^2 added to the diagonal of every 2D covariance
CULL_SIGMA = 3.0      # screen-space culling radius, in sigmas
TILE_SIGMA = 3.5      # tile-assignment radius; > sqrt(2 ln 255) so nothing
                      # above the 1/255 cutoff can land outside its tiles
FRUSTUM_GUARD = 1.3   # centers outside this multiple of the view frustum are
                      # culled: the EWA linearization degenerates there
                      # (|X|/Z grows without bound) and smears phantom splats
                      # across the image


@dataclass
class ProjectedGaussian:
    """One Gaussian after projection (screen space)."""

    mean2d: np.ndarray   # (2,) continuous pixel coords
    cov2d: np.ndarray    # (2, 2) including the +0.3 floor
    conic: np.ndarray    # (3,) packed inverse covariance (A, B, C)
    depth: float
    sigma_t: float
    radius: float        # 3-sigma screen radius, px


@dataclass
class RenderOutput:
    rgb: np.ndarray           # (H, W, 3)
    accum_weight: np.ndarray  # (H, W), 1 - final transmittance
    depth_map: np.ndarray     # (H, W) meters, alpha-weighted mean


def _project_arrays(mu: np.ndarray, Sigma: np.ndarray, cam: PinholeCamera):
    """Vectorized projection; returns per-Gaussian arrays plus a keep mask."""
    R = cam.pose.matrix()
    m_c = (mu - cam.pose.position) @ R  # row form of R^T (mu - p)
    X, Y, Z = m_c[:, 0], m_c[:, 1], m_c[:, 2]
    in_frustum = (
        (np.abs(X) <= FRUSTUM_GUARD * math.tan(cam.fov_x / 2.0) * Z)
        & (np.abs(Y) <= FRUSTUM_GUARD * math.tan(cam.fov_y / 2.0) * Z)
    )
    valid = (Z > NEAR_CLIP) & in_frustum
    Zs = np.where(valid, Z, 1.0)  # avoid divide warnings on culled rows

    fx, fy = cam.fx, cam.fy
    mean2d = np.stack([cam.cx + fx * X / Zs, cam.cy - fy * Y / Zs], axis=1)

    J = np.zeros((mu.shape[0], 2, 3))
    J[:, 0, 0] = fx / Zs
    J[:, 0, 2] = -fx * X / Zs**2
    J[:, 1, 1] = -fy / Zs
    J[:, 1, 2] = fy * Y / Zs**2

    M = np.einsum("ji,njk,kl->nil", R, Sigma, R)  # W Sigma W^T, W = R^T
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)

    on_image = (
        (mean2d[:, 0] + radius > 0.0)
        & (mean2d[:, 0] - radius < cam.width)
        & (mean2d[:, 1] + radius > 0.0)
        & (mean2d[:, 1] - radius < cam.height)
    )
    keep = valid & on_image
    return {
        "m_c": m_c, "mean2d": mean2d, "J": J, "M": M, "cov2d": cov2d,
        "conic": conic, "lam_max": lam_max, "radius": radius, "R": R,
    }, keep


def project_gaussian(mu, Sigma, cam: PinholeCamera, sigma_t: float = 1.0):
    """Project one Gaussian; returns None when culled (near plane, frustum guard, or screen)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 3)
    Sigma = np.asarray(Sigma, dtype=np.float64).reshape(1, 3, 3)
    arrays, keep = _project_arrays(mu, Sigma, cam)
    if not keep[0]:
        return None
    return ProjectedGaussian(
        mean2d=arrays["mean2d"][0],
        cov2d=arrays["cov2d"][0],
        conic=arrays["conic"][0],
        depth=float(arrays["m_c"][0, 2]),
        sigma_t=float(sigma_t),
        radius=float(arrays["radius"][0]),
    )


def splat_alpha(pg: ProjectedGaussian, pixel) -> float:
    """Alpha of a projected Gaussian at a pixel coordinate (no cutoff/clamp)."""
    d = np.asarray(pixel, dtype=np.float64) - pg.mean2d
    q = pg.conic[0] * d[0] ** 2 + 2.0 * pg.conic[1] * d[0] * d[1] + pg.conic[2] * d[1] ** 2
    return float(pg.sigma_t * math.exp(-0.5 * q))


class _Prepared:
    """Projected, depth-sorted scene for one (camera, t): kernel inputs."""

    def __init__(self, scene: GaussianScene, cam: PinholeCamera, t: float):
        self.cam = cam
        self.ev: SceneEval = eval_scene(scene, t)
        arrays, keep = _project_arrays(self.ev.mu, self.ev.Sigma, cam)
        idx = np.nonzero(keep)[0]
        depth = arrays["m_c"][idx, 2]
        order = np.lexsort((idx, depth))  # depth asc, ties by scene index
        self.idx = idx[order]
        self.m_c = arrays["m_c"][self.idx]
        self.mean2d = arrays["mean2d"][self.idx]
        self.J = arrays["J"][self.idx]
        self.M = arrays["M"][self.idx]
        self.conic = arrays["conic"][self.idx]
        self.lam_max = arrays["lam_max"][self.idx]
        self.R = arrays["R"]
        self.depth = self.m_c[:, 2].copy()
        self.sigma = self.ev.sigma_t[self.idx]
        self.color = self.ev.color[self.idx]

    def tile_lists(self):
        cam = self.cam
        tiles_x = (cam.width + TILE_SIZE - 1) // TILE_SIZE
        tiles_y = (cam.height + TILE_SIZE - 1) // TILE_SIZE
        n_tiles = tiles_x * tiles_y
        m = self.idx.shape[0]
        if m == 0:
            return tiles_x, np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        r = TILE_SIGMA * np.sqrt(self.lam_max)
        ux, uy = self.mean2d[:, 0], self.mean2d[:, 1]
        tx0 = np.clip(np.floor((ux - r) / TILE_SIZE).astype(np.int64), 0, tiles_x)
        tx1 = np.clip(np.floor((ux + r) / TILE_SIZE).astype(np.int64) + 1, 0, tiles_x)
        ty0 = np.clip(np.floor((uy - r) / TILE_SIZE).astype(np.int64), 0, tiles_y)
        ty1 = np.clip(np.floor((uy + r) / TILE_SIZE).astype(np.int64) + 1, 0, tiles_y)
        wx = np.maximum(tx1 - tx0, 0)
        wy = np.maximum(ty1 - ty0, 0)
        counts = wx * wy
        total = int(counts.sum())
        if total == 0:
            return tiles_x, np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        gauss_pair = np.repeat(np.arange(m, dtype=np.int64), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
        wx_rep = np.repeat(wx, counts)
        lx = local % np.maximum(wx_rep, 1)
        ly = local // np.maximum(wx_rep, 1)
        tile_pair = (np.repeat(ty0, counts) + ly) * tiles_x + np.repeat(tx0, counts) + lx
        order = np.argsort(tile_pair, kind="stable")  # keeps depth order per tile
        entries = gauss_pair[order]
        per_tile = np.bincount(tile_pair, minlength=n_tiles)
        tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
        np.cumsum(per_tile, out=tile_start[1:])
        return tiles_x, tile_start, entries

    def run_forward(self, background: np.ndarray):
        cam = self.cam
        tiles_x, tile_start, entries = self.tile_lists()
        rgb = np.zeros((cam.height, cam.width, 3))
        accum = np.zeros((cam.height, cam.width))
        depth = np.zeros((cam.height, cam.width))
        nproc = np.zeros((cam.height, cam.width), dtype=np.int64)
        _kernels.composite_forward(
            cam.width, cam.height, tiles_x, tile_start, entries,
            self.mean2d, self.conic, self.sigma, self.color, self.depth,
            np.asarray(background, dtype=np.float64),
            rgb, accum, depth, nproc,
        )
        return rgb, accum, depth, nproc, (tiles_x, tile_start, entries)


def render(scene: GaussianScene, cam: PinholeCamera, t: float) -> RenderOutput:
    """Tile-based forward render (the fast path)."""
    prep = _Prepared(scene, cam, t)
    rgb, accum, depth, _, _ = prep.run_forward(scene.background)
    return RenderOutput(rgb=rgb, accum_weight=accum, depth_map=depth)


def render_naive(scene: GaussianScene, cam: PinholeCamera, t: float) -> RenderOutput:
    """O(N * pixels) reference compositing loop (oracle for `render`)."""
    prep = _Prepared(scene, cam, t)
    bg = scene.background
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    accum = np.zeros((h, w))
    depth_map = np.zeros((h, w))
    m = prep.idx.shape[0]
    for py in range(h):
        for px in range(w):
            T = 1.0
            c_out = [0.0, 0.0, 0.0]
            dsum = 0.0
            for k in range(m):
                if T < T_TERMINATE:
                    break
                dx = px + 0.5 - prep.mean2d[k, 0]
                dy = py + 0.5 - prep.mean2d[k, 1]
                q = (
                    prep.conic[k, 0] * dx * dx
                    + 2.0 * prep.conic[k, 1] * dx * dy
                    + prep.conic[k, 2] * dy * dy
                )
                alpha = prep.sigma[k] * math.exp(-0.5 * q)
                if alpha < ALPHA_CUTOFF:
                    continue
                alpha = min(alpha, ALPHA_CLAMP)
                weight = alpha * T
                for ch in range(3):
                    c_out[ch] += prep.color[k, ch] * weight
                dsum += prep.depth[k] * weight
                T *= 1.0 - alpha
            for ch in range(3):
                rgb[py, px, ch] = c_out[ch] + bg[ch] * T
            accum[py, px] = 1.0 - T
            depth_map[py, px] = dsum / accum[py, px] if accum[py, px] > 1e-12 else 0.0
    return RenderOutput(rgb=rgb, accum_weight=accum, depth_map=depth_map)


def render_backward(
    scene: GaussianScene, cam: PinholeCamera, t: float, g_rgb: np.ndarray
) -> SceneGradients:
    """Analytic dL/d(params) given upstream dL/d(rgb); recomputes forward."""
    g_rgb = np.asarray(g_rgb, dtype=np.float64)
    if g_rgb.shape != (cam.height, cam.width, 3):
        raise ValueError(
            f"upstream gradient must be ({cam.height}, {cam.width}, 3), got {g_rgb.shape}"
        )
    if not np.all(np.isfinite(g_rgb)):
        bad = np.argwhere(~np.isfinite(g_rgb))[0]
        raise ValueError(
            f"non-finite upstream gradient at pixel (x={bad[1]}, y={bad[0]}, channel={bad[2]})"
        )
    prep = _Prepared(scene, cam, t)
    _, accum, _, nproc, (tiles_x, tile_start, entries) = prep.run_forward(scene.background)

    m = prep.idx.shape[0]
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_sigma = np.zeros(m)
    d_color = np.zeros((m, 3))
    if m:
        _kernels.composite_backward(
            cam.width, cam.height, tiles_x, tile_start, entries,
            prep.mean2d, prep.conic, prep.sigma, prep.color, prep.depth,
            np.asarray(scene.background, dtype=np.float64),
            accum, nproc, g_rgb,
            d_mean2d, d_conic, d_sigma, d_color,
        )

    n = scene.n
    g_mu = np.zeros((n, 3))
    g_Sigma = np.zeros((n, 3, 3))
    g_sig = np.zeros(n)
    g_col = np.zeros((n, 3))
    if m:
        # conic -> 2D covariance (dP as a symmetric matrix, then inverse rule)
        G_P = np.empty((m, 2, 2))
        G_P[:, 0, 0] = d_conic[:, 0]
        G_P[:, 1, 1] = d_conic[:, 2]
        G_P[:, 0, 1] = G_P[:, 1, 0] = 0.5 * d_conic[:, 1]
        P = np.empty((m, 2, 2))
        P[:, 0, 0] = prep.conic[:, 0]
        P[:, 0, 1] = P[:, 1, 0] = prep.conic[:, 1]
        P[:, 1, 1] = prep.conic[:, 2]
        d_cov2d = -np.matmul(P, np.matmul(G_P, P))

        J = prep.J
        d_M = np.einsum("nji,njk,nkl->nil", J, d_cov2d, J)
        d_J = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2d, J, prep.M)

        d_mc = np.einsum("nji,nj->ni", J, d_mean2d)
        fx, fy = cam.fx, cam.fy
        X, Y, Z = prep.m_c[:, 0], prep.m_c[:, 1], prep.m_c[:, 2]
        d_mc[:, 0] += d_J[:, 0, 2] * (-fx / Z**2)
        d_mc[:, 1] += d_J[:, 1, 2] * (fy / Z**2)
        d_mc[:, 2] += (
            d_J[:, 0, 0] * (-fx / Z**2)
            + d_J[:, 1, 1] * (fy / Z**2)
            + d_J[:, 0, 2] * (2.0 * fx * X / Z**3)
            + d_J[:, 1, 2] * (-2.0 * fy * Y / Z**3)
        )

        R = prep.R
        g_mu[prep.idx] = d_mc @ R.T
        g_Sigma[prep.idx] = np.einsum("ij,njk,lk->nil", R, d_M, R)
        g_sig[prep.idx] = d_sigma
        g_col[prep.idx] = d_color

    return eval_backward(scene, prep.ev, g_mu, g_Sigma, g_sig, g_col)

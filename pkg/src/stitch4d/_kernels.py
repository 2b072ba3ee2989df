"""Tile-traversal compositing kernels (numba, sequential, deterministic).

These are the fast path; the pure-Python naive loop in `renderer` is the
oracle they are tested against.  Both apply identical rules:

  * contributions with alpha < 1/255 are dropped (transmittance unchanged),
  * alpha is clamped at 0.999 (clamped contributions get zero alpha-gradient),
  * a contribution is composited iff the transmittance *before* it is
    >= 1e-4; the first entry that sees T < 1e-4 terminates the pixel.

The backward kernel recovers per-contribution transmittance by dividing the
final value back out front-to-back in reverse; the 0.999 clamp bounds every
divisor away from zero.  Kernels run single-threaded over tiles in a fixed
order, so results are independent of any outer thread pool.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ALPHA_CUTOFF = 1.0 / 255.0
ALPHA_CLAMP = 0.999
T_TERMINATE = 1e-4
TILE_SIZE = 16


@njit(cache=True, nogil=True)
def composite_forward(
    width, height, tiles_x, tile_start, entries,
    mean2d, conic, sigma, color, depth, bg,
    out_rgb, out_accum, out_depth, out_nproc,
):
    n_tiles = tile_start.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        x0 = tx * TILE_SIZE
        y0 = ty * TILE_SIZE
        x1 = min(x0 + TILE_SIZE, width)
        y1 = min(y0 + TILE_SIZE, height)
        s = tile_start[tile]
        e = tile_start[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                dsum = 0.0
                nproc = 0
                for k in range(s, e):
                    if T < T_TERMINATE:
                        break
                    nproc = k - s + 1
                    gi = entries[k]
                    dx = px + 0.5 - mean2d[gi, 0]
                    dy = py + 0.5 - mean2d[gi, 1]
                    q = (
                        conic[gi, 0] * dx * dx
                        + 2.0 * conic[gi, 1] * dx * dy
                        + conic[gi, 2] * dy * dy
                    )
                    alpha = sigma[gi] * math.exp(-0.5 * q)
                    if alpha < ALPHA_CUTOFF:
                        continue
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    w = alpha * T
                    r += color[gi, 0] * w
                    g += color[gi, 1] * w
                    b += color[gi, 2] * w
                    dsum += depth[gi] * w
                    T *= 1.0 - alpha
                out_rgb[py, px, 0] = r + bg[0] * T
                out_rgb[py, px, 1] = g + bg[1] * T
                out_rgb[py, px, 2] = b + bg[2] * T
                acc = 1.0 - T
                out_accum[py, px] = acc
                out_depth[py, px] = dsum / acc if acc > 1e-12 else 0.0
                out_nproc[py, px] = nproc


@njit(cache=True, nogil=True)
def composite_backward(
    width, height, tiles_x, tile_start, entries,
    mean2d, conic, sigma, color, depth, bg,
    accum, nproc, g_rgb,
    d_mean2d, d_conic, d_sigma, d_color,
):
    n_tiles = tile_start.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        x0 = tx * TILE_SIZE
        y0 = ty * TILE_SIZE
        x1 = min(x0 + TILE_SIZE, width)
        y1 = min(y0 + TILE_SIZE, height)
        s = tile_start[tile]
        for py in range(y0, y1):
            for px in range(x0, x1):
                n = nproc[py, px]
                if n == 0:
                    continue
                g0 = g_rgb[py, px, 0]
                g1 = g_rgb[py, px, 1]
                g2 = g_rgb[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                T = 1.0 - accum[py, px]
                s0 = bg[0] * T
                s1 = bg[1] * T
                s2 = bg[2] * T
                for k in range(s + n - 1, s - 1, -1):
                    gi = entries[k]
                    dx = px + 0.5 - mean2d[gi, 0]
                    dy = py + 0.5 - mean2d[gi, 1]
                    q = (
                        conic[gi, 0] * dx * dx
                        + 2.0 * conic[gi, 1] * dx * dy
                        + conic[gi, 2] * dy * dy
                    )
                    alpha_raw = sigma[gi] * math.exp(-0.5 * q)
                    if alpha_raw < ALPHA_CUTOFF:
                        continue
                    clamped = alpha_raw > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else alpha_raw
                    T = T / (1.0 - alpha)  # transmittance before this entry
                    w = alpha * T
                    d_color[gi, 0] += w * g0
                    d_color[gi, 1] += w * g1
                    d_color[gi, 2] += w * g2
                    inv = 1.0 / (1.0 - alpha)
                    d_alpha = (
                        g0 * (color[gi, 0] * T - s0 * inv)
                        + g1 * (color[gi, 1] * T - s1 * inv)
                        + g2 * (color[gi, 2] * T - s2 * inv)
                    )
                    s0 += color[gi, 0] * w
                    s1 += color[gi, 1] * w
                    s2 += color[gi, 2] * w
                    if clamped:
                        continue
                    d_sigma[gi] += math.exp(-0.5 * q) * d_alpha
                    dq = -0.5 * alpha * d_alpha
                    d_conic[gi, 0] += dx * dx * dq
                    d_conic[gi, 1] += 2.0 * dx * dy * dq
                    d_conic[gi, 2] += dy * dy * dq
                    d_mean2d[gi, 0] += -(2.0 * conic[gi, 0] * dx + 2.0 * conic[gi, 1] * dy) * dq
                    d_mean2d[gi, 1] += -(2.0 * conic[gi, 1] * dx + 2.0 * conic[gi, 2] * dy) * dq

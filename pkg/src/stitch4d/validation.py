"""Finite-difference validation of the analytic render gradient.

Central differences on the full 28-float parameter vector of a random
scene, compared against ``render_backward`` under a fixed random upstream
gradient.  Used by the ``gradcheck`` CLI subcommand and the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import PinholeCamera, PoseSE3, look_at_quaternion
from .quaternion import normalize as quat_normalize
from .renderer import render, render_backward
from .scene import FLOATS_PER_GAUSSIAN, GaussianScene

logger = logging.getLogger(__name__)

# A parameter passes if either tolerance is met; the absolute floor keeps
# finite-difference cancellation noise on near-zero entries from counting
# as a failure.
REL_TOL = 1e-3
ABS_TOL = 1e-6
FD_STEP = 1e-4


def random_scene(rng: np.random.Generator, n_gaussians: int) -> GaussianScene:
    """Random well-conditioned temporal scene for gradient probing.

    Gaussians sit in a slab 2-6 m in front of the +Z camera axis with
    mild motion, mid-range opacity and scales around 10 cm, so a 32x32
    render exercises overlap, the opacity cutoff and temporal terms
    without degenerate conditioning.
    """
    n = int(n_gaussians)
    scene = GaussianScene.empty(n)
    scene.mu0 = rng.uniform([-1.0, -1.0, 2.0], [1.0, 1.0, 6.0], size=(n, 3))
    scene.vel = rng.normal(0.0, 0.3, size=(n, 3))
    scene.acc = rng.normal(0.0, 0.1, size=(n, 3))
    scene.rot0 = np.array([quat_normalize(q) for q in rng.normal(size=(n, 4))])
    scene.ang_vel = rng.normal(0.0, 0.5, size=(n, 3))
    scene.log_scale = rng.uniform(np.log(0.05), np.log(0.4), size=(n, 3))
    scene.opacity_logit = rng.uniform(-1.0, 2.0, size=(n,))
    scene.t_center = rng.uniform(0.2, 0.8, size=(n,))
    scene.s_t = rng.uniform(0.0, 2.0, size=(n,))
    scene.color0 = rng.uniform(0.1, 0.9, size=(n, 3))
    scene.color_rate = rng.normal(0.0, 0.2, size=(n, 3))
    scene.background = rng.uniform(0.0, 1.0, size=3)
    return scene


def _probe_camera(resolution: int) -> PinholeCamera:
    pose = PoseSE3(rotation=look_at_quaternion(np.array([0.0, 0.0, 1.0])),
                   position=np.zeros(3))
    fov = np.deg2rad(60.0)
    return PinholeCamera(width=resolution, height=resolution,
                         fov_x=fov, fov_y=fov, pose=pose)


@dataclass
class GradCheckResult:
    """Failure count over every parameter of every gaussian."""

    failures: int
    total: int
    worst_rel: float

    @property
    def pass_fraction(self) -> float:
        return 1.0 - self.failures / self.total


def finite_difference_check(seed: int, n_gaussians: int = 20,
                            resolution: int = 32, t: float = 0.4,
                            step: float = FD_STEP) -> GradCheckResult:
    """Compare analytic scene gradients against central differences.

    The scalar objective is sum(render.rgb * U) for a fixed random U so
    that every channel of every pixel backpropagates.  A parameter passes
    when the analytic/FD mismatch is within REL_TOL relative or ABS_TOL
    absolute.

    Args:
      seed: RNG seed controlling both the scene and the upstream U.
      n_gaussians: scene size.
      resolution: square image size in pixels.
      t: evaluation timestamp.
      step: central-difference step, scaled by max(1, |param|).

    Returns:
      GradCheckResult with failure count over n_gaussians * 28 entries.
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_gaussians)
    cam = _probe_camera(resolution)
    upstream = rng.uniform(0.2, 1.0, size=(cam.height, cam.width, 3))

    grads = render_backward(scene, cam, t, upstream)
    analytic = grads.to_flat().ravel()

    flat = scene.to_flat()
    base = flat.ravel()
    fd = np.zeros_like(base)
    for k in range(base.size):
        h = step * max(1.0, abs(base[k]))
        values = []
        for sign in (1.0, -1.0):
            bumped = base.copy()
            bumped[k] += sign * h
            probe = GaussianScene.from_flat(bumped.reshape(flat.shape),
                                            scene.t_domain, scene.background)
            values.append(float(np.sum(render(probe, cam, t).rgb * upstream)))
        fd[k] = (values[0] - values[1]) / (2.0 * h)

    diff = np.abs(analytic - fd)
    rel = diff / np.maximum(np.abs(fd), 1e-12)
    ok = (rel <= REL_TOL) | (diff <= ABS_TOL)
    failures = int(np.count_nonzero(~ok))
    worst = float(np.max(rel[~ok])) if failures else float(np.max(rel[diff > ABS_TOL], initial=0.0))
    result = GradCheckResult(failures=failures,
                             total=n_gaussians * FLOATS_PER_GAUSSIAN,
                             worst_rel=worst)
    logger.info("gradcheck seed=%d: %d failures / %d params",
                seed, result.failures, result.total)
    return result

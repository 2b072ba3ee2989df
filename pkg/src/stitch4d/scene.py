"""Time-varying Gaussian scene representation.

Each Gaussian carries a quadratic position track, a body-frame angular
velocity, per-axis log scales, a temporal opacity envelope and a linear
color track:

    dt       = t - t_center
    mu(t)    = mu0 + vel*dt + acc*dt^2
    R(t)     = R(rot0 / |rot0|) @ exp([ang_vel]_x * dt)
    Sigma(t) = R(t) diag(exp(log_scale))^2 R(t)^T
    sigma(t) = sigmoid(opacity_logit) * exp(-s_t * dt^2)
    color(t) = clamp(color0 + color_rate*dt, 0, 1)

`eval_scene` evaluates all Gaussians at once and caches the intermediates
that `eval_backward` needs to push image-space gradients onto the raw
parameter arrays.  The scalar `eval_at_time` is the readable reference used
by the unit tests.

Scene files (`.stz`) are little-endian: magic "STZ1", uint32 version,
uint64 Gaussian count, float64 domain end T, float64 background RGB, then
28 float64 per Gaussian in field order (see PARAM_FIELDS).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quaternion as quat
from .geometry import PinholeCamera

logger = logging.getLogger(__name__)

# (field name, number of floats); serialization and optimizer order.
PARAM_FIELDS = (
    ("mu0", 3),
    ("vel", 3),
    ("acc", 3),
    ("rot0", 4),
    ("ang_vel", 3),
    ("log_scale", 3),
    ("opacity_logit", 1),
    ("t_center", 1),
    ("s_t", 1),
    ("color0", 3),
    ("color_rate", 3),
)
FLOATS_PER_GAUSSIAN = sum(n for _, n in PARAM_FIELDS)  # 28

_STZ_MAGIC = b"STZ1"
_STZ_VERSION = 1

MIN_SCALE = 1e-6
MAX_SCALE = 1e3


class SceneFormatError(Exception):
    """Raised for malformed .stz files (bad magic, version, or payload size)."""


@dataclass
class TemporalGaussian:
    mu0: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    rot0: np.ndarray
    ang_vel: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    t_center: float
    s_t: float
    color0: np.ndarray
    color_rate: np.ndarray

    def __post_init__(self):
        for name in ("mu0", "vel", "acc", "ang_vel", "log_scale", "color0", "color_rate"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            setattr(self, name, v)
        self.rot0 = np.asarray(self.rot0, dtype=np.float64)
        if self.rot0.shape != (4,):
            raise ValueError("rot0 must be a quaternion (w, x, y, z)")
        if abs(np.linalg.norm(self.rot0) - 1.0) > 1e-6:
            raise ValueError("rot0 must be a unit quaternion")
        if not np.all((np.exp(self.log_scale) > MIN_SCALE) & (np.exp(self.log_scale) < MAX_SCALE)):
            raise ValueError("exp(log_scale) must lie in (1e-6, 1e3)")


@dataclass
class GaussianScene:
    """Structure-of-arrays scene; all arrays are float64.

    t_domain is (0, T); timestamps passed to eval are expected inside it,
    though evaluation itself is defined for any t.
    """

    mu0: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    rot0: np.ndarray
    ang_vel: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    t_center: np.ndarray
    s_t: np.ndarray
    color0: np.ndarray
    color_rate: np.ndarray
    t_domain: tuple = (0.0, 1.0)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        n = self.mu0.shape[0]
        shapes = {
            "mu0": (n, 3), "vel": (n, 3), "acc": (n, 3), "rot0": (n, 4),
            "ang_vel": (n, 3), "log_scale": (n, 3), "opacity_logit": (n,),
            "t_center": (n,), "s_t": (n,), "color0": (n, 3), "color_rate": (n, 3),
        }
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    @property
    def n(self) -> int:
        return self.mu0.shape[0]

    @classmethod
    def empty(cls, n: int, t_domain=(0.0, 1.0), background=None) -> "GaussianScene":
        z = np.zeros
        rot0 = np.zeros((n, 4))
        rot0[:, 0] = 1.0
        return cls(
            mu0=z((n, 3)), vel=z((n, 3)), acc=z((n, 3)), rot0=rot0, ang_vel=z((n, 3)),
            log_scale=z((n, 3)), opacity_logit=z(n), t_center=z(n), s_t=z(n),
            color0=z((n, 3)), color_rate=z((n, 3)),
            t_domain=tuple(t_domain),
            background=np.zeros(3) if background is None else background,
        )

    @classmethod
    def from_gaussians(cls, gaussians, t_domain=(0.0, 1.0), background=None) -> "GaussianScene":
        scene = cls.empty(len(gaussians), t_domain, background)
        for i, g in enumerate(gaussians):
            scene.mu0[i] = g.mu0
            scene.vel[i] = g.vel
            scene.acc[i] = g.acc
            scene.rot0[i] = g.rot0
            scene.ang_vel[i] = g.ang_vel
            scene.log_scale[i] = g.log_scale
            scene.opacity_logit[i] = g.opacity_logit
            scene.t_center[i] = g.t_center
            scene.s_t[i] = g.s_t
            scene.color0[i] = g.color0
            scene.color_rate[i] = g.color_rate
        return scene

    def gaussian(self, i: int) -> TemporalGaussian:
        return TemporalGaussian(
            mu0=self.mu0[i].copy(), vel=self.vel[i].copy(), acc=self.acc[i].copy(),
            rot0=quat.normalize(self.rot0[i]), ang_vel=self.ang_vel[i].copy(),
            log_scale=self.log_scale[i].copy(), opacity_logit=float(self.opacity_logit[i]),
            t_center=float(self.t_center[i]), s_t=float(self.s_t[i]),
            color0=self.color0[i].copy(), color_rate=self.color_rate[i].copy(),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            **{name: getattr(self, name).copy() for name, _ in PARAM_FIELDS},
            t_domain=self.t_domain,
            background=self.background.copy(),
        )

    def select(self, keep: np.ndarray) -> "GaussianScene":
        """Subset scene by boolean mask or index array (used by pruning)."""
        return GaussianScene(
            **{name: getattr(self, name)[keep].copy() for name, _ in PARAM_FIELDS},
            t_domain=self.t_domain,
            background=self.background.copy(),
        )

    def to_flat(self) -> np.ndarray:
        """(N, 28) parameter matrix in PARAM_FIELDS order."""
        cols = []
        for name, width in PARAM_FIELDS:
            arr = getattr(self, name)
            cols.append(arr.reshape(self.n, width))
        return np.concatenate(cols, axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, t_domain=(0.0, 1.0), background=None) -> "GaussianScene":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 2 or flat.shape[1] != FLOATS_PER_GAUSSIAN:
            raise ValueError(f"flat parameters must be (N, {FLOATS_PER_GAUSSIAN})")
        kwargs = {}
        col = 0
        for name, width in PARAM_FIELDS:
            block = flat[:, col:col + width]
            kwargs[name] = block[:, 0].copy() if width == 1 else block.copy()
            col += width
        return cls(**kwargs, t_domain=tuple(t_domain),
                   background=np.zeros(3) if background is None else background)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_at_time(g: TemporalGaussian, t: float):
    """Reference single-Gaussian evaluation: (mu, Sigma, sigma, color)."""
    dt = t - g.t_center
    mu = g.mu0 + g.vel * dt + g.acc * dt * dt
    qn = quat.normalize(g.rot0)
    qd = quat.quat_exp(g.ang_vel * dt)
    R = quat.rotation_matrix(quat.multiply(qn, qd))
    s = np.exp(g.log_scale)
    Sigma = R @ np.diag(s * s) @ R.T
    sigma = 1.0 / (1.0 + np.exp(-g.opacity_logit)) * np.exp(-g.s_t * dt * dt)
    color = np.clip(g.color0 + g.color_rate * dt, 0.0, 1.0)
    return mu, Sigma, float(sigma), color


@dataclass
class SceneEval:
    """Vectorized evaluation at one timestamp plus backward intermediates."""

    t: float
    dt: np.ndarray        # (N,)
    mu: np.ndarray        # (N, 3)
    R: np.ndarray         # (N, 3, 3)
    Sigma: np.ndarray     # (N, 3, 3)
    sigma_t: np.ndarray   # (N,)
    color: np.ndarray     # (N, 3)
    # intermediates
    qn: np.ndarray
    q0_norm: np.ndarray
    qd: np.ndarray
    qt: np.ndarray
    v: np.ndarray
    s2: np.ndarray
    sig0: np.ndarray
    env: np.ndarray
    color_gate: np.ndarray


def eval_scene(scene: GaussianScene, t: float) -> SceneEval:
    dt = t - scene.t_center
    mu = scene.mu0 + scene.vel * dt[:, None] + scene.acc * (dt * dt)[:, None]
    q0_norm = np.linalg.norm(scene.rot0, axis=1)
    qn = scene.rot0 / q0_norm[:, None]
    v = scene.ang_vel * dt[:, None]
    qd = quat.quat_exp(v)
    qt = quat.multiply(qn, qd)
    R = quat.rotation_matrix(qt)
    s2 = np.exp(2.0 * scene.log_scale)
    Sigma = np.einsum("nik,nk,njk->nij", R, s2, R)
    sig0 = 1.0 / (1.0 + np.exp(-scene.opacity_logit))
    env = np.exp(-scene.s_t * dt * dt)
    sigma_t = sig0 * env
    color_raw = scene.color0 + scene.color_rate * dt[:, None]
    color_gate = ((color_raw >= 0.0) & (color_raw <= 1.0)).astype(np.float64)
    color = np.clip(color_raw, 0.0, 1.0)
    return SceneEval(
        t=t, dt=dt, mu=mu, R=R, Sigma=Sigma, sigma_t=sigma_t, color=color,
        qn=qn, q0_norm=q0_norm, qd=qd, qt=qt, v=v, s2=s2, sig0=sig0, env=env,
        color_gate=color_gate,
    )


@dataclass
class SceneGradients:
    """Per-parameter gradient arrays, same shapes as the scene arrays."""

    mu0: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    rot0: np.ndarray
    ang_vel: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    t_center: np.ndarray
    s_t: np.ndarray
    color0: np.ndarray
    color_rate: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        z = np.zeros
        return cls(
            mu0=z((n, 3)), vel=z((n, 3)), acc=z((n, 3)), rot0=z((n, 4)),
            ang_vel=z((n, 3)), log_scale=z((n, 3)), opacity_logit=z(n),
            t_center=z(n), s_t=z(n), color0=z((n, 3)), color_rate=z((n, 3)),
        )

    def add_(self, other: "SceneGradients") -> "SceneGradients":
        for name, _ in PARAM_FIELDS:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scale_(self, factor: float) -> "SceneGradients":
        for name, _ in PARAM_FIELDS:
            getattr(self, name).__imul__(factor)
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, name))) for name, _ in PARAM_FIELDS)

    def to_flat(self) -> np.ndarray:
        """(N, 28) gradient matrix in PARAM_FIELDS order."""
        n = self.mu0.shape[0]
        cols = [getattr(self, name).reshape(n, width) for name, width in PARAM_FIELDS]
        return np.concatenate(cols, axis=1)


def _batch_left_matrix(a: np.ndarray) -> np.ndarray:
    """(N,4) -> (N,4,4) with multiply(a, b) = L(a) @ b."""
    w, x, y, z = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=1),
        np.stack([x, w, -z, y], axis=1),
        np.stack([y, z, w, -x], axis=1),
        np.stack([z, -y, x, w], axis=1),
    ]
    return np.stack(rows, axis=1)


def _batch_right_matrix(b: np.ndarray) -> np.ndarray:
    """(N,4) -> (N,4,4) with multiply(a, b) = R(b) @ a."""
    w, x, y, z = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=1),
        np.stack([x, w, z, -y], axis=1),
        np.stack([y, -z, w, x], axis=1),
        np.stack([z, y, -x, w], axis=1),
    ]
    return np.stack(rows, axis=1)


def eval_backward(
    scene: GaussianScene,
    ev: SceneEval,
    g_mu: np.ndarray,
    g_Sigma: np.ndarray,
    g_sigma_t: np.ndarray,
    g_color: np.ndarray,
) -> SceneGradients:
    """Chain world-space gradients back to the raw parameter arrays.

    g_Sigma must be symmetric per Gaussian (it is, coming from the conic
    chain in the renderer).
    """
    n = scene.n
    out = SceneGradients.zeros(n)
    dt = ev.dt

    # position track
    out.mu0 += g_mu
    out.vel += g_mu * dt[:, None]
    out.acc += g_mu * (dt * dt)[:, None]
    out.t_center += -np.sum(g_mu * (scene.vel + 2.0 * scene.acc * dt[:, None]), axis=1)

    # Sigma = R diag(s2) R^T
    gR = 2.0 * np.matmul(g_Sigma, ev.R) * ev.s2[:, None, :]
    g_s2 = np.einsum("nik,nij,njk->nk", ev.R, g_Sigma, ev.R)
    out.log_scale += g_s2 * 2.0 * ev.s2

    # R -> qt -> (qn, qd) -> (rot0, ang_vel, t_center)
    J_R = quat.rotation_matrix_jacobian(ev.qt)          # (N, 4, 3, 3)
    g_qt = np.einsum("nij,nmij->nm", gR, J_R)
    g_qn = np.einsum("ni,nij->nj", g_qt, _batch_right_matrix(ev.qd))
    g_qd = np.einsum("ni,nij->nj", g_qt, _batch_left_matrix(ev.qn))
    out.rot0 += (g_qn - ev.qn * np.sum(ev.qn * g_qn, axis=1, keepdims=True)) / ev.q0_norm[:, None]
    J_exp = quat.quat_exp_jacobian(ev.v)                # (N, 4, 3)
    g_v = np.einsum("nm,nmj->nj", g_qd, J_exp)
    out.ang_vel += g_v * dt[:, None]
    out.t_center += -np.sum(g_v * scene.ang_vel, axis=1)

    # sigma(t) = sigmoid(ol) * exp(-s_t dt^2)
    out.opacity_logit += g_sigma_t * ev.env * ev.sig0 * (1.0 - ev.sig0)
    out.s_t += g_sigma_t * ev.sig0 * ev.env * (-dt * dt)
    out.t_center += g_sigma_t * ev.sig0 * ev.env * (2.0 * scene.s_t * dt)

    # color clamp
    g_raw = g_color * ev.color_gate
    out.color0 += g_raw
    out.color_rate += g_raw * dt[:, None]
    out.t_center += -np.sum(g_raw * scene.color_rate, axis=1)
    return out


# ---------------------------------------------------------------------------
# Depth-based initialization
# ---------------------------------------------------------------------------

@dataclass
class InitView:
    """One posed RGB-D view used for cold initialization."""

    image: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) meters, Z-depth along the camera axis
    camera: PinholeCamera
    t: float


def back_project(camera: PinholeCamera, u: np.ndarray, v: np.ndarray, depth) -> np.ndarray:
    """Continuous pixel coords + Z-depth -> world points (..., 3)."""
    x = (np.asarray(u) - camera.cx) / camera.fx
    y = (camera.cy - np.asarray(v)) / camera.fy
    pts_cam = np.stack([x, y, np.ones_like(x)], axis=-1) * np.asarray(depth)[..., None]
    R = camera.pose.matrix()
    return pts_cam @ R.T + camera.pose.position


def init_from_depth(views, stride: int, t_domain=(0.0, 1.0), background=None) -> GaussianScene:
    """One static Gaussian per stride-th pixel of each view.

    Position from back-projected depth, color0 from the pixel, isotropic
    log_scale = log(depth * stride * pixel angular footprint), opacity 0.5
    (logit 0), t_center at the view timestamp, all rates zero.  Pixels with
    non-positive depth are skipped (warning carries the count).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    chunks = []
    skipped = 0
    for view in views:
        cam = view.camera
        h, w = view.depth.shape
        jj, ii = np.meshgrid(
            np.arange(stride // 2, h, stride), np.arange(stride // 2, w, stride), indexing="ij"
        )
        d = view.depth[jj, ii]
        ok = d > 0.0
        skipped += int(np.size(d) - np.count_nonzero(ok))
        if not np.any(ok):
            continue
        u = ii[ok] + 0.5
        v = jj[ok] + 0.5
        d = d[ok]
        pts = back_project(cam, u, v, d)
        footprint = stride * 2.0 * np.tan(cam.fov_x / 2.0) / cam.width
        m = pts.shape[0]
        chunk = GaussianScene.empty(m, t_domain, background)
        chunk.mu0[:] = pts
        chunk.log_scale[:] = np.log(d * footprint)[:, None]
        chunk.color0[:] = view.image[jj[ok], ii[ok]]
        chunk.t_center[:] = view.t
        chunks.append(chunk)
    if skipped:
        logger.warning("init_from_depth skipped %d pixels with non-positive depth", skipped)
    if not chunks:
        raise ValueError("no valid depth samples; cannot initialize scene")
    merged = GaussianScene(
        **{
            name: np.concatenate([getattr(c, name) for c in chunks], axis=0)
            for name, _ in PARAM_FIELDS
        },
        t_domain=tuple(t_domain),
        background=np.zeros(3) if background is None else background,
    )
    return merged


# ---------------------------------------------------------------------------
# Scene IO
# ---------------------------------------------------------------------------

def save_scene(path, scene: GaussianScene) -> None:
    header = _STZ_MAGIC + struct.pack(
        "<IQdddd",
        _STZ_VERSION,
        scene.n,
        float(scene.t_domain[1]),
        *[float(c) for c in scene.background],
    )
    payload = np.ascontiguousarray(scene.to_flat(), dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_scene(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    head_len = 4 + struct.calcsize("<IQdddd")
    if len(raw) < head_len or raw[:4] != _STZ_MAGIC:
        raise SceneFormatError(f"{path}: not a .stz scene file (bad magic)")
    version, n, t_end, b0, b1, b2 = struct.unpack("<IQdddd", raw[4:head_len])
    if version != _STZ_VERSION:
        raise SceneFormatError(
            f"{path}: version mismatch (file has {version}, reader supports {_STZ_VERSION})"
        )
    expected = n * FLOATS_PER_GAUSSIAN * 8
    body = raw[head_len:]
    if len(body) != expected:
        raise SceneFormatError(
            f"{path}: truncated payload ({len(body)} bytes, expected {expected})"
        )
    flat = np.frombuffer(body, dtype="<f8").reshape(n, FLOATS_PER_GAUSSIAN)
    return GaussianScene.from_flat(flat, t_domain=(0.0, t_end), background=np.array([b0, b1, b2]))


def scene_to_json(scene: GaussianScene) -> str:
    """Human-readable mirror of the .stz contents (debug exporter)."""
    doc = {
        "version": _STZ_VERSION,
        "n_gaussians": scene.n,
        "t_domain": list(scene.t_domain),
        "background": scene.background.tolist(),
        "fields": [name for name, _ in PARAM_FIELDS],
        "gaussians": [
            {name: np.atleast_1d(getattr(scene, name)[i]).tolist() for name, _ in PARAM_FIELDS}
            for i in range(scene.n)
        ],
    }
    return json.dumps(doc, indent=1)

"""Camera models and panoramic resampling.

COORDINATE CONVENTIONS (shared by every module in this package):

  * World and camera frames are right-handed with +Z the camera forward
    axis and +Y up.  Screen right corresponds to +X under the projection
    below (``u = cx + fx*X/Z``), screen down to -Y (``v = cy - fy*Y/Z``).
  * A pose stores the camera-to-world map: ``x_world = R(q) @ x_cam + p``.
  * Continuous pixel coordinates put the center of integer pixel (i, j)
    at (i + 0.5, j + 0.5), so the image spans [0, W] x [0, H].
  * Equirectangular pixel (u, v) maps to longitude/latitude
        lambda = 2*pi*(u + 0.5)/W - pi        (seam at +-pi, behind)
        phi    = pi/2 - pi*(v + 0.5)/H        (+pi/2 at the top row)
    and direction (cos(phi) sin(lambda), sin(phi), cos(phi) cos(lambda)),
    i.e. the panorama's central column looks along local +Z.
  * Equirectangular sampling is bilinear with longitude wraparound at the
    seam and clamped latitude at the poles.  Perspective/cubemap sampling
    is bilinear with clamping at face edges.

Cubemap face order is front, back, left, right, up, down; "up"/"down" are
the +-90 degree pitch rotations of the front camera.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import quaternion as quat

logger = logging.getLogger(__name__)

FACE_NAMES = ("front", "back", "left", "right", "up", "down")

# Unit axis each face looks along, in the panorama's local frame.
FACE_AXES = np.array(
    [
        [0.0, 0.0, 1.0],   # front
        [0.0, 0.0, -1.0],  # back
        [-1.0, 0.0, 0.0],  # left
        [1.0, 0.0, 0.0],   # right
        [0.0, 1.0, 0.0],   # up
        [0.0, -1.0, 0.0],  # down
    ]
)


def yaw_quat(angle: float) -> np.ndarray:
    """Rotation about +Y; positive angle turns the view toward +X."""
    return quat.from_axis_angle(np.array([0.0, 1.0, 0.0]), angle)


def pitch_quat(angle: float) -> np.ndarray:
    """Rotation about -X; positive angle tilts the view toward +Y (up)."""
    return quat.from_axis_angle(np.array([-1.0, 0.0, 0.0]), angle)


def face_quaternion(face: str) -> np.ndarray:
    """Orientation of a cubemap face camera relative to the panorama frame."""
    if face == "front":
        return quat.identity()
    if face == "back":
        return yaw_quat(math.pi)
    if face == "left":
        return yaw_quat(-math.pi / 2)
    if face == "right":
        return yaw_quat(math.pi / 2)
    if face == "up":
        return pitch_quat(math.pi / 2)
    if face == "down":
        return pitch_quat(-math.pi / 2)
    raise ValueError(f"unknown cubemap face {face!r}")


@dataclass
class PoseSE3:
    """Rigid pose; `rotation` is a unit quaternion (w, x, y, z), camera-to-world."""

    rotation: np.ndarray = field(default_factory=quat.identity)
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.rotation.shape != (4,):
            raise ValueError("rotation must be a quaternion (w, x, y, z)")
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")
        n = np.linalg.norm(self.rotation)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"rotation quaternion must be unit norm, got |q| = {n}")

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix (camera axes expressed in world coordinates)."""
        return quat.rotation_matrix(self.rotation)

    def compose_rotation(self, q: np.ndarray) -> "PoseSE3":
        """Pose with an extra local rotation applied after this one."""
        return PoseSE3(quat.normalize(quat.multiply(self.rotation, q)), self.position.copy())

    def to_json(self) -> dict:
        return {"quaternion": self.rotation.tolist(), "position": self.position.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PoseSE3":
        return cls(np.array(d["quaternion"]), np.array(d["position"]))


@dataclass
class PinholeCamera:
    width: int
    height: int
    fov_x: float  # radians
    fov_y: float  # radians
    pose: PoseSE3 = field(default_factory=PoseSE3)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if not (0.0 < self.fov_x < math.pi and 0.0 < self.fov_y < math.pi):
            raise ValueError("field of view must lie in (0, pi)")

    @property
    def fx(self) -> float:
        return self.width / (2.0 * math.tan(self.fov_x / 2.0))

    @property
    def fy(self) -> float:
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions for every pixel center, camera frame, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (self.cy - (np.arange(self.height) + 0.5)) / self.fy
        xs, ys = np.meshgrid(u, v)
        dirs = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) -> continuous pixel coords (..., 2).

        No validity checks; callers cull on depth themselves.
        """
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        u = self.cx + self.fx * pts_cam[..., 0] / z
        v = self.cy - self.fy * pts_cam[..., 1] / z
        return np.stack([u, v], axis=-1)

    def to_json(self) -> dict:
        return {
            "type": "pinhole",
            "width": self.width,
            "height": self.height,
            "fov_x_deg": math.degrees(self.fov_x),
            "fov_y_deg": math.degrees(self.fov_y),
            "pose": self.pose.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PinholeCamera":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fov_x=math.radians(d["fov_x_deg"]),
            fov_y=math.radians(d["fov_y_deg"]),
            pose=PoseSE3.from_json(d["pose"]),
        )


@dataclass
class EquirectCamera:
    width: int
    height: int
    pose: PoseSE3 = field(default_factory=PoseSE3)

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ValueError(
                f"equirectangular image must be 2:1, got {self.width}x{self.height}"
            )

    def to_json(self) -> dict:
        return {
            "type": "equirect",
            "width": self.width,
            "height": self.height,
            "pose": self.pose.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EquirectCamera":
        return cls(int(d["width"]), int(d["height"]), PoseSE3.from_json(d["pose"]))


@dataclass
class CubemapSet:
    """Six 90-degree square faces sharing one optical center."""

    face_res: int
    pose: PoseSE3 = field(default_factory=PoseSE3)
    images: dict | None = None  # face name -> (res, res, 3) float array

    def face_camera(self, face: str) -> PinholeCamera:
        return PinholeCamera(
            width=self.face_res,
            height=self.face_res,
            fov_x=math.pi / 2,
            fov_y=math.pi / 2,
            pose=self.pose.compose_rotation(face_quaternion(face)),
        )


# ---------------------------------------------------------------------------
# Equirectangular pixel <-> direction
# ---------------------------------------------------------------------------

def equirect_pixel_to_dir(cam: EquirectCamera, u, v) -> np.ndarray:
    """Pixel indices (u, v) -> unit direction in the panorama's local frame.

    u, v may be arrays; fractional values address subpixel positions in the
    same half-integer-center convention.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= cam.width) or np.any(v < 0) or np.any(v >= cam.height):
        raise ValueError("pixel coordinates out of range")
    lam = 2.0 * math.pi * (u + 0.5) / cam.width - math.pi
    phi = math.pi / 2.0 - math.pi * (v + 0.5) / cam.height
    cp = np.cos(phi)
    return np.stack([cp * np.sin(lam), np.sin(phi), cp * np.cos(lam)], axis=-1)


def dir_to_equirect_pixel(cam: EquirectCamera, d: np.ndarray) -> np.ndarray:
    """Unit direction(s) -> continuous pixel indices (u, v); inverse of the above."""
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n == 0):
        raise ValueError("zero direction vector")
    x, y, z = d[..., 0] / n, d[..., 1] / n, d[..., 2] / n
    lam = np.arctan2(x, z)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    u = (lam + math.pi) * cam.width / (2.0 * math.pi) - 0.5
    v = (math.pi / 2.0 - phi) * cam.height / math.pi - 0.5
    return np.stack([u, v], axis=-1)


def sample_equirect(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear panorama lookup at continuous pixel indices (..., 2).

    Longitude wraps modulo the width; latitude clamps at the poles.
    """
    h, w = img.shape[:2]
    u = uv[..., 0]
    v = np.clip(uv[..., 1], 0.0, h - 1.0)
    i0 = np.floor(u)
    j0 = np.floor(v)
    fu = (u - i0)[..., None]
    fv = (v - j0)[..., None]
    i0 = i0.astype(np.int64) % w
    i1 = (i0 + 1) % w
    j0 = np.clip(j0.astype(np.int64), 0, h - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    top = img[j0, i0] * (1 - fu) + img[j0, i1] * fu
    bot = img[j1, i0] * (1 - fu) + img[j1, i1] * fu
    return top * (1 - fv) + bot * fv


def sample_clamped(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel indices, clamped at image edges."""
    h, w = img.shape[:2]
    u = np.clip(uv[..., 0], 0.0, w - 1.0)
    v = np.clip(uv[..., 1], 0.0, h - 1.0)
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = (u - i0)[..., None]
    fv = (v - j0)[..., None]
    i0 = np.clip(i0, 0, w - 1)
    j0 = np.clip(j0, 0, h - 1)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    if img.ndim == 2:
        fu, fv = fu[..., 0], fv[..., 0]
    top = img[j0, i0] * (1 - fu) + img[j0, i1] * fu
    bot = img[j1, i0] * (1 - fu) + img[j1, i1] * fu
    return top * (1 - fv) + bot * fv


# ---------------------------------------------------------------------------
# Equirect <-> cubemap
# ---------------------------------------------------------------------------

def equirect_to_cubemap(pano: np.ndarray, face_res: int, pose: PoseSE3 | None = None) -> CubemapSet:
    """Resample a 2:1 panorama into six 90-degree faces.

    The faces live in the panorama's own frame (pose carried through, not
    applied to the pixels).
    """
    h, w = pano.shape[:2]
    if w != 2 * h:
        raise ValueError(f"panorama must be 2:1, got {w}x{h}")
    cube = CubemapSet(face_res=face_res, pose=pose or PoseSE3(), images={})
    pano_cam = EquirectCamera(w, h)
    for face in FACE_NAMES:
        fcam = PinholeCamera(face_res, face_res, math.pi / 2, math.pi / 2)
        rays = fcam.pixel_rays()  # face-local
        dirs = rays @ quat.rotation_matrix(face_quaternion(face)).T  # pano-local
        uv = dir_to_equirect_pixel(pano_cam, dirs)
        cube.images[face] = sample_equirect(pano, uv)
    return cube


def cubemap_to_equirect(cube: CubemapSet, width: int, height: int) -> np.ndarray:
    """Reassemble a 2:1 panorama from six faces.

    Each output pixel samples the face whose axis has the largest dot
    product with the pixel ray, bilinearly with clamping at face edges.
    """
    if width != 2 * height:
        raise ValueError(f"target panorama must be 2:1, got {width}x{height}")
    if cube.images is None or set(cube.images) != set(FACE_NAMES):
        raise ValueError("cubemap is missing faces")
    pano_cam = EquirectCamera(width, height)
    uu, vv = np.meshgrid(np.arange(width), np.arange(height))
    dirs = equirect_pixel_to_dir(pano_cam, uu, vv)  # (H, W, 3)
    face_idx = np.argmax(dirs @ FACE_AXES.T, axis=-1)  # (H, W)
    first = next(iter(cube.images.values()))
    out_shape = (height, width) + first.shape[2:]
    out = np.zeros(out_shape, dtype=np.float64)
    for k, face in enumerate(FACE_NAMES):
        m = face_idx == k
        if not np.any(m):
            continue
        fcam = PinholeCamera(cube.face_res, cube.face_res, math.pi / 2, math.pi / 2)
        local = dirs[m] @ quat.rotation_matrix(face_quaternion(face))  # R^T d
        uv = fcam.project(local) - 0.5  # continuous -> index coords
        out[m] = sample_clamped(cube.images[face], uv)
    return out


def render_perspective_view(
    pano: np.ndarray, pano_cam: EquirectCamera, cam: PinholeCamera
) -> np.ndarray:
    """Resample a panorama into a pinhole view sharing its optical center."""
    if not np.allclose(cam.pose.position, pano_cam.pose.position, atol=1e-9):
        raise ValueError("perspective view must share the panorama's optical center")
    rays = cam.pixel_rays()
    world = rays @ cam.pose.matrix().T
    local = world @ pano_cam.pose.matrix()  # R_pano^T applied from the right
    uv = dir_to_equirect_pixel(pano_cam, local)
    return sample_equirect(pano, uv)


# ---------------------------------------------------------------------------
# View rig
# ---------------------------------------------------------------------------

_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def dodecahedron_vertices() -> np.ndarray:
    """The 20 unit vertex directions of a regular dodecahedron, fixed order."""
    g = _GOLDEN
    verts = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                verts.append((sx, sy, sz))
    for sa in (-1.0, 1.0):
        for sb in (-1.0, 1.0):
            verts.append((0.0, sa / g, sb * g))
            verts.append((sa / g, sb * g, 0.0))
            verts.append((sa * g, 0.0, sb / g))
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # Deterministic order independent of construction details.
    order = np.lexsort((v[:, 2], v[:, 1], v[:, 0]))
    return v[order]


def look_at_quaternion(forward: np.ndarray, roll: float = 0.0) -> np.ndarray:
    """Quaternion whose +Z axis is `forward`, +Y as close to world up as possible.

    `roll` applies an extra rotation about the view axis (used to orient the
    rig's offset views for even coverage).
    """
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 1.0, 0.0])
    if abs(float(f @ up)) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    # Rotation matrix -> quaternion (Shepperd's method, branch on trace).
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = quat.normalize(q)
    if roll != 0.0:
        q = quat.multiply(q, quat.from_axis_angle(np.array([0.0, 0.0, 1.0]), roll))
    return quat.normalize(q)


@dataclass
class RigView:
    rotation: np.ndarray  # unit quaternion relative to the panorama frame
    fov: float            # radians, square views
    kind: str             # "center" | "offset" | "wide"
    base_index: int       # which of the 20 base directions


@dataclass
class ViewRig:
    """120 pinhole views around one panorama center (rotations only).

    20 dodecahedron-vertex base directions x (1 central + 4 offset views)
    plus 20 wide-FoV views on the base directions.
    """

    views: list
    narrow_fov: float
    wide_fov: float
    offset: float

    def __post_init__(self):
        if len(self.views) != 120:
            raise ValueError(f"view rig must contain exactly 120 views, got {len(self.views)}")

    def cameras(self, position: np.ndarray, resolution: int) -> list:
        """Instantiate world-frame cameras for a rig placed at `position`."""
        position = np.asarray(position, dtype=np.float64)
        return [
            PinholeCamera(
                width=resolution,
                height=resolution,
                fov_x=view.fov,
                fov_y=view.fov,
                pose=PoseSE3(view.rotation.copy(), position.copy()),
            )
            for view in self.views
        ]


def build_view_rig(
    narrow_fov: float = math.radians(60.0),
    wide_fov: float = math.radians(120.0),
    offset: float = math.radians(10.0),
) -> ViewRig:
    """Construct the 120-view capture rig.

    Offset views tilt by `offset` about the local yaw/pitch axes of each base
    view; the wide views reuse the base directions.  The dodecahedron vertex
    arrangement has covering radius ~28 degrees, which keeps every direction
    inside narrow_fov/2 of some view axis at the 60-degree default.
    """
    dirs = dodecahedron_vertices()
    views: list[RigView] = []
    for idx, d in enumerate(dirs):
        base = look_at_quaternion(d)
        views.append(RigView(base, narrow_fov, "center", idx))
        for q_off in (
            yaw_quat(offset),
            yaw_quat(-offset),
            pitch_quat(offset),
            pitch_quat(-offset),
        ):
            views.append(
                RigView(quat.normalize(quat.multiply(base, q_off)), narrow_fov, "offset", idx)
            )
    for idx, d in enumerate(dirs):
        views.append(RigView(look_at_quaternion(d), wide_fov, "wide", idx))
    return ViewRig(views=views, narrow_fov=narrow_fov, wide_fov=wide_fov, offset=offset)


# ---------------------------------------------------------------------------
# Capture-path interpolation
# ---------------------------------------------------------------------------

def interpolate_positions(p_i: np.ndarray, p_j: np.ndarray, K: int) -> np.ndarray:
    """K interior points of segment (p_i, p_j) at fractions k/(K+1), k=1..K."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if np.array_equal(p_i, p_j):
        raise ValueError("capture positions coincide; no segment to interpolate")
    fracs = np.arange(1, K + 1, dtype=np.float64) / (K + 1)
    return p_i[None, :] + fracs[:, None] * (p_j - p_i)[None, :]

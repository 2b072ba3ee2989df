"""Bridge-view synthesis between capture locations.

Plans intermediate camera positions on the segment between two capture
points, pairs same-named cubemap faces from the two source captures, and
synthesizes one view per intermediate position through a pluggable
backend.  The default backend is geometric: forward-reproject both source
faces using their depth maps, z-buffer per target pixel, blend sources
with weights inversely proportional to source-to-target distance, and
fill holes with the nearest valid pixel.  Hole pixels are reported in a
validity mask so downstream training can give them zero weight.

An external backend (``external:<command>``) shells out per face request
with a JSON protocol on stdin/stdout; see ExternalBackend for the schema.
Synthesized panoramas are assembled from the four horizontal faces plus
up/down views rendered from the nearest source only.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import images as im
from .data import Dataset, ViewRecord, KIND_BRIDGE
from .geometry import (
    FACE_NAMES,
    CubemapSet,
    PinholeCamera,
    PoseSE3,
    cubemap_to_equirect,
    interpolate_positions,
)
from .quaternion import identity as quat_identity, rotation_matrix

logger = logging.getLogger(__name__)

HORIZONTAL_FACES = ("front", "back", "left", "right")
VERTICAL_FACES = ("up", "down")

# A source contributes to a target pixel only where its stored depth
# agrees with the target pixel's z-buffered depth after warping back;
# disagreement means occlusion or disocclusion and the source is
# excluded there.
DEPTH_CONSISTENCY_REL = 0.05
DEPTH_CONSISTENCY_ABS = 1e-3


class BridgeSynthesisError(RuntimeError):
    """Backend failure, annotated with position/timestamp context."""


# ---------------------------------------------------------------------------
# Backend interface
# ---------------------------------------------------------------------------

@dataclass
class FaceSource:
    """One source observation handed to a synthesis backend."""

    image: np.ndarray            # (H, W, 3) float in [0, 1]
    depth: np.ndarray | None     # (H, W) Z-depth, None if unavailable
    camera: PinholeCamera


@dataclass
class FaceRequest:
    """Ask a backend for the target camera's view at timestamp t."""

    target_camera: PinholeCamera
    t: float
    sources: list                # list[FaceSource]


class SynthesisBackend:
    """Interface for intermediate-view synthesis.

    Attributes:
      needs_depth: the backend requires source depth maps.
      serial: the backend must not be called from multiple workers.
    """

    needs_depth: bool = False
    serial: bool = False

    def synthesize_face(self, request: FaceRequest):
        """Returns (image (H, W, 3) in [0, 1], validity mask (H, W) in [0, 1])."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Default backend: depth-based forward reprojection
# ---------------------------------------------------------------------------

def forward_reproject(image: np.ndarray, depth: np.ndarray,
                      src_cam: PinholeCamera, dst_cam: PinholeCamera):
    """Splat every source pixel into the target view with a z-buffer.

    Source pixels are lifted to world points via their Z-depth, projected
    into the target camera, and written nearest-depth-last so the z-buffer
    winner per target pixel is the closest surface.  Equal-depth ties are
    broken by source pixel index so output is deterministic.  Source
    pixels with depth <= 0 carry no geometry and are skipped.

    Args:
      image: (H, W, 3) source RGB.
      depth: (H, W) source Z-depth in the source camera frame.
      src_cam, dst_cam: pinhole cameras (camera-to-world poses).

    Returns:
      (rgb (h, w, 3), depth (h, w), valid (h, w) bool) in the target
      frame; `valid` marks pixels that received at least one splat.
    """
    sh, sw = depth.shape
    if image.shape[:2] != (sh, sw):
        raise ValueError("image/depth shape mismatch")

    us = (np.arange(sw) + 0.5 - src_cam.cx) / src_cam.fx
    vs = (src_cam.cy - (np.arange(sh) + 0.5)) / src_cam.fy
    xs, ys = np.meshgrid(us, vs)
    z = depth
    pts_cam = np.stack([xs * z, ys * z, z], axis=-1).reshape(-1, 3)
    colors = image.reshape(-1, 3)
    has_geometry = (z > 0.0).ravel()

    r_src = rotation_matrix(src_cam.pose.rotation)
    pts_world = pts_cam @ r_src.T + src_cam.pose.position
    r_dst = rotation_matrix(dst_cam.pose.rotation)
    pts_dst = (pts_world - dst_cam.pose.position) @ r_dst

    dz = pts_dst[:, 2]
    in_front = dz > 1e-6
    uv = dst_cam.project(np.where(in_front[:, None], pts_dst, [0.0, 0.0, 1.0]))
    ui = np.floor(uv[:, 0]).astype(np.int64)
    vi = np.floor(uv[:, 1]).astype(np.int64)
    ok = (has_geometry & in_front
          & (ui >= 0) & (ui < dst_cam.width) & (vi >= 0) & (vi < dst_cam.height))

    idx = np.nonzero(ok)[0]
    order = np.lexsort((idx, -dz[idx]))  # depth descending; nearest written last
    idx = idx[order]
    flat = vi[idx] * dst_cam.width + ui[idx]

    out_rgb = np.zeros((dst_cam.height, dst_cam.width, 3))
    out_depth = np.zeros((dst_cam.height, dst_cam.width))
    valid = np.zeros(dst_cam.height * dst_cam.width, dtype=bool)
    out_rgb.reshape(-1, 3)[flat] = colors[idx]
    out_depth.reshape(-1)[flat] = dz[idx]
    valid[flat] = True
    return out_rgb, out_depth, valid.reshape(dst_cam.height, dst_cam.width)


def fill_holes_nearest(image: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid pixels with the value of the nearest valid pixel.

    Leaves the image untouched (all zeros stay) when nothing is valid.
    """
    if valid.all() or not valid.any():
        return image
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return image[iy, ix]


def _bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Clamped bilinear lookup at continuous pixel coords (centers at .5)."""
    h, w = img.shape[:2]
    x = np.clip(u - 0.5, 0.0, w - 1.0)
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None] if img.ndim == 3 else (x - x0)
    fy = (y - y0)[..., None] if img.ndim == 3 else (y - y0)
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _nearest_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    xi = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    yi = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    return img[yi, xi]


class ReprojectionBackend(SynthesisBackend):
    """Two-pass depth reprojection with 1/distance source blending.

    Per source: pass 1 forward-splats the source's depth into the target
    view with a z-buffer (splat-dilution gaps are filled from the nearest
    splat); pass 2 lifts each target pixel at that depth back into the
    source, accepts it where the stored source depth agrees (occlusion
    check), and samples color bilinearly.  Sources are then reconciled
    per pixel: the nearest source with an actually-splatted ("seeded")
    consistent candidate sets the reference depth -- compositing depth at
    silhouettes is a mixture value, so a farther source's depth cannot be
    trusted to overrule a nearer one -- and every candidate agreeing with
    that depth blends in with weight inversely proportional to its
    source-to-target distance.  Pixels no source can explain are holes --
    filled from the nearest valid pixel and reported as 0 in the validity
    mask.
    """

    needs_depth = True
    serial = False

    def _warp_source(self, source: FaceSource, cam: PinholeCamera,
                     pixel_dirs: np.ndarray):
        """One source's candidate layer: (z, seeded, consistent, color)."""
        _, z_s, seeded = forward_reproject(source.image, source.depth,
                                           source.camera, cam)
        if not seeded.any():
            return None
        z_fill = fill_holes_nearest(np.where(seeded, z_s, 0.0), seeded)

        pts_cam = pixel_dirs * z_fill[..., None]
        r_t = rotation_matrix(cam.pose.rotation)
        pts_world = pts_cam @ r_t.T + cam.pose.position
        r_s = rotation_matrix(source.camera.pose.rotation)
        p_src = (pts_world - source.camera.pose.position) @ r_s
        z_exp = p_src[..., 2]
        in_front = z_exp > 1e-6
        uv = source.camera.project(
            np.where(in_front[..., None], p_src, [0.0, 0.0, 1.0]))
        sh, sw = source.depth.shape
        in_bounds = ((uv[..., 0] >= 0.0) & (uv[..., 0] < sw)
                     & (uv[..., 1] >= 0.0) & (uv[..., 1] < sh))
        d_src = _nearest_sample(source.depth, uv[..., 0], uv[..., 1])
        tol = np.maximum(DEPTH_CONSISTENCY_REL * z_exp, DEPTH_CONSISTENCY_ABS)
        consistent = (in_front & in_bounds & (d_src > 0.0)
                      & (np.abs(d_src - z_exp) <= tol))
        color = _bilinear_sample(source.image, uv[..., 0], uv[..., 1])
        return z_fill, seeded, consistent, color

    def synthesize_face(self, request: FaceRequest):
        cam = request.target_camera
        h, w = cam.height, cam.width
        for source in request.sources:
            if source.depth is None:
                raise ValueError("reprojection backend requires source depth")

        xs = (np.arange(w) + 0.5 - cam.cx) / cam.fx
        ys = (cam.cy - (np.arange(h) + 0.5)) / cam.fy
        gx, gy = np.meshgrid(xs, ys)
        pixel_dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1)

        layers = []
        weights = []
        dists = []
        for source in request.sources:
            layer = self._warp_source(source, cam, pixel_dirs)
            if layer is None:
                continue
            layers.append(layer)
            dist = float(np.linalg.norm(source.camera.pose.position
                                        - cam.pose.position))
            dists.append(dist)
            weights.append(1.0 / max(dist, 1e-12))
        if not layers:
            return np.zeros((h, w, 3)), np.zeros((h, w))

        # Reference depth: coalesce candidates in nearest-source order,
        # seeded candidates before gap-filled ones.
        priority = np.argsort(dists, kind="stable")
        z_ref = np.full((h, w), np.inf)
        for pass_strong in (True, False):
            for s in priority:
                z_fill, seeded, consistent, _ = layers[s]
                cand = consistent & (seeded if pass_strong else True)
                z_ref = np.where(np.isfinite(z_ref), z_ref,
                                 np.where(cand, z_fill, np.inf))
        tol_ref = np.maximum(DEPTH_CONSISTENCY_REL * z_ref,
                             DEPTH_CONSISTENCY_ABS)

        rgb = np.zeros((h, w, 3))
        w_sum = np.zeros((h, w))
        for (z_fill, seeded, consistent, color), weight in zip(layers, weights):
            use = consistent & (np.abs(z_fill - z_ref) <= tol_ref)
            rgb += np.where(use[..., None], color * weight, 0.0)
            w_sum += np.where(use, weight, 0.0)

        valid = w_sum > 0.0
        rgb = np.where(valid[..., None],
                       rgb / np.maximum(w_sum, 1e-300)[..., None], 0.0)
        rgb = fill_holes_nearest(rgb, valid)
        return np.clip(rgb, 0.0, 1.0), valid.astype(np.float64)


# ---------------------------------------------------------------------------
# External backend: JSON over stdin/stdout
# ---------------------------------------------------------------------------

def _png_b64(image: np.ndarray) -> str:
    arr = im.quantize(image)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as img:
        return np.asarray(img).astype(np.float64) / 255.0


class ExternalBackend(SynthesisBackend):
    """Shell out to `<command>` once per face request.

    Request JSON on stdin::

        {
          "t": <float>,
          "target_camera": <camera json>,     # width/height/fov/pose
          "sources": [
            {"camera": <camera json>,
             "image": "<base64 PNG, RGB>",
             "depth": "<base64 raw little-endian float32, row-major>" | null,
             "depth_shape": [height, width] | null},
            ...
          ]
        }

    Expected response JSON on stdout::

        {"image": "<base64 PNG, RGB, target resolution>",
         "valid_mask": "<base64 PNG, grayscale>"}    # mask optional

    A missing mask means fully valid.  Any nonzero exit status or
    malformed response raises BridgeSynthesisError.
    """

    needs_depth = False
    serial = False

    def __init__(self, command: str):
        if not command.strip():
            raise ValueError("external backend command is empty")
        self.command = command

    def synthesize_face(self, request: FaceRequest):
        cam = request.target_camera
        payload = {
            "t": request.t,
            "target_camera": cam.to_json(),
            "sources": [
                {
                    "camera": s.camera.to_json(),
                    "image": _png_b64(s.image),
                    "depth": (base64.b64encode(
                        np.ascontiguousarray(s.depth, dtype="<f4").tobytes()
                    ).decode("ascii") if s.depth is not None else None),
                    "depth_shape": list(s.depth.shape) if s.depth is not None else None,
                }
                for s in request.sources
            ],
        }
        proc = subprocess.run(
            shlex.split(self.command),
            input=json.dumps(payload).encode(),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        if proc.returncode != 0:
            raise BridgeSynthesisError(
                f"external backend exited {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace').strip()}")
        try:
            reply = json.loads(proc.stdout.decode())
            image = _b64_png(reply["image"])
        except (ValueError, KeyError) as exc:
            raise BridgeSynthesisError(f"malformed external backend reply: {exc}")
        if image.shape[:2] != (cam.height, cam.width):
            raise BridgeSynthesisError(
                f"external backend returned {image.shape[:2]}, "
                f"expected {(cam.height, cam.width)}")
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=2)
        if "valid_mask" in reply and reply["valid_mask"] is not None:
            mask = _b64_png(reply["valid_mask"])
            if mask.ndim == 3:
                mask = mask[..., 0]
        else:
            mask = np.ones((cam.height, cam.width))
        return image[..., :3], mask


def make_backend(name: str) -> SynthesisBackend:
    """`reproject` or `external:<command>`."""
    if name == "reproject":
        return ReprojectionBackend()
    if name.startswith("external:"):
        return ExternalBackend(name[len("external:"):])
    raise ValueError(f"unknown synthesis backend {name!r}")


# ---------------------------------------------------------------------------
# Planning and synthesis
# ---------------------------------------------------------------------------

@dataclass
class FacePair:
    """Same-named faces of the two source cubemaps, with their cameras."""

    face: str
    image_i: np.ndarray
    image_j: np.ndarray
    camera_i: PinholeCamera
    camera_j: PinholeCamera


@dataclass
class BridgePlan:
    """Intermediate positions and cameras between one pair of captures."""

    source_pair: tuple           # (location index i, location index j)
    positions: np.ndarray        # (K, 3), strictly between the endpoints
    face_res: int

    def __post_init__(self):
        if len(self.positions) < 1:
            raise ValueError("bridge plan needs at least one intermediate position")

    def cameras(self, k: int) -> dict:
        """The 6 face cameras (4 horizontal + up/down) at position k.

        Intermediate cameras share the world frame: identity yaw, so each
        camera is the corresponding cubemap face orientation placed at the
        intermediate position.
        """
        pose = PoseSE3(rotation=quat_identity(), position=self.positions[k])
        cube = CubemapSet(face_res=self.face_res, pose=pose)
        return {face: cube.face_camera(face) for face in FACE_NAMES}


def plan_bridge(position_i: np.ndarray, position_j: np.ndarray, k: int,
                face_res: int, source_pair=(0, 1)) -> BridgePlan:
    positions = interpolate_positions(position_i, position_j, k)
    return BridgePlan(source_pair=tuple(source_pair), positions=positions,
                      face_res=face_res)


def pair_faces(cube_i: CubemapSet, cube_j: CubemapSet) -> list:
    """The four horizontal face pairs (up/down are handled separately)."""
    for cube, tag in ((cube_i, "first"), (cube_j, "second")):
        if cube.images is None or set(cube.images) != set(FACE_NAMES):
            raise ValueError(f"{tag} cubemap is missing face images")
    return [
        FacePair(face=face,
                 image_i=cube_i.images[face], image_j=cube_j.images[face],
                 camera_i=cube_i.face_camera(face),
                 camera_j=cube_j.face_camera(face))
        for face in HORIZONTAL_FACES
    ]


def _synthesize_one(backend: SynthesisBackend, cam: PinholeCamera, t: float,
                    sources: list):
    try:
        return backend.synthesize_face(FaceRequest(target_camera=cam, t=t,
                                                   sources=sources))
    except BridgeSynthesisError:
        raise
    except Exception as exc:
        pos = np.asarray(cam.pose.position).tolist()
        raise BridgeSynthesisError(
            f"synthesis failed at position {pos}, t={t}: {exc}") from exc


def synthesize_views(pair: FacePair, intermediate_cams: list, t: float,
                     backend: SynthesisBackend, aux_depth=None) -> list:
    """One (image, mask) per intermediate camera for a horizontal face pair.

    Args:
      pair: FacePair from pair_faces.
      intermediate_cams: target cameras sharing the pair's orientation.
      t: timestamp forwarded to the backend.
      backend: SynthesisBackend instance.
      aux_depth: (depth_i, depth_j) Z-depth maps; required when
        backend.needs_depth.

    Returns:
      list of (image, validity mask) tuples, one per camera.
    """
    if backend.needs_depth and aux_depth is None:
        raise ValueError(f"backend requires depth but none given for face "
                         f"{pair.face!r}")
    depth_i, depth_j = aux_depth if aux_depth is not None else (None, None)
    sources = [FaceSource(pair.image_i, depth_i, pair.camera_i),
               FaceSource(pair.image_j, depth_j, pair.camera_j)]
    return [_synthesize_one(backend, cam, t, sources)
            for cam in intermediate_cams]


def synthesize_updown(position: np.ndarray, t: float, sources: list,
                      backend: SynthesisBackend, face_res: int,
                      aux_depth=None):
    """Up/down views at `position` from the nearest source cubemap only.

    Vertical faces have the weakest parallax cues, so only the closer of
    the two source captures feeds the backend (ties pick the first).

    Args:
      position: (3,) intermediate camera center.
      t: timestamp.
      sources: two CubemapSets with face images.
      backend: SynthesisBackend.
      face_res: output resolution.
      aux_depth: per-source dict face -> depth, or None; required when
        backend.needs_depth.

    Returns:
      ((up image, up mask), (down image, down mask)).
    """
    position = np.asarray(position, dtype=np.float64)
    dists = [np.linalg.norm(np.asarray(c.pose.position) - position)
             for c in sources]
    nearest = int(np.argmin(dists))
    cube = sources[nearest]
    if backend.needs_depth and aux_depth is None:
        raise ValueError("backend requires depth but none given for up/down")
    depth = aux_depth[nearest] if aux_depth is not None else None

    pose = PoseSE3(rotation=quat_identity(), position=position)
    target = CubemapSet(face_res=face_res, pose=pose)
    out = []
    for face in VERTICAL_FACES:
        src = [FaceSource(cube.images[face],
                          depth[face] if depth is not None else None,
                          cube.face_camera(face))]
        out.append(_synthesize_one(backend, target.face_camera(face), t, src))
    return out[0], out[1]


def assemble_bridge_panorama(six_faces: dict, width: int, height: int,
                             pose: PoseSE3 | None = None) -> np.ndarray:
    """Equirect panorama from the six synthesized faces."""
    if set(six_faces) != set(FACE_NAMES):
        raise ValueError(f"expected faces {sorted(FACE_NAMES)}, "
                         f"got {sorted(six_faces)}")
    res = next(iter(six_faces.values())).shape[0]
    for name, face in six_faces.items():
        if face.shape[:2] != (res, res):
            raise ValueError(f"face {name!r} resolution differs")
    cube = CubemapSet(face_res=res,
                      pose=pose if pose is not None else PoseSE3(),
                      images=dict(six_faces))
    return cubemap_to_equirect(cube, width, height)


# ---------------------------------------------------------------------------
# Whole-video synthesis
# ---------------------------------------------------------------------------

@dataclass
class SourceVideo:
    """One capture location's cubemap sequence (plus depth per face)."""

    frames: list                 # list[CubemapSet], constant pose
    depths: list | None          # per frame: dict face -> (res, res) depth
    t_values: list               # timestamps, len == len(frames)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.frames[0].pose.position, dtype=np.float64)


@dataclass
class BridgeFrame:
    """All synthesized data for one (intermediate position, frame)."""

    k: int
    frame: int
    t: float
    position: np.ndarray
    faces: dict                  # face -> (res, res, 3)
    masks: dict                  # face -> (res, res)
    panorama: np.ndarray
    pano_mask: np.ndarray


@dataclass
class BridgeVideos:
    plan: BridgePlan
    frames: list = field(default_factory=list)   # list[BridgeFrame], k-major

    def frame(self, k: int, f: int) -> BridgeFrame:
        n_frames = max(fr.frame for fr in self.frames) + 1
        return self.frames[k * n_frames + f]


def load_source_video(dataset: Dataset, location: int) -> SourceVideo:
    """Read one location's cubemap faces and depths from a capture dataset."""
    man = dataset.manifest
    frames = []
    depths = []
    pose = PoseSE3(rotation=quat_identity(),
                   position=np.asarray(man.locations[location], dtype=np.float64))
    for f in range(man.n_frames):
        base = f"cubemaps/loc{location}/f{f:02d}"
        faces = {}
        face_depths = {}
        for face in FACE_NAMES:
            faces[face] = im.read_png(dataset.path(f"{base}/{face}.png"))
            face_depths[face] = im.read_depth(dataset.path(f"{base}/{face}.depth"))
        frames.append(CubemapSet(face_res=man.face_res, pose=pose, images=faces))
        depths.append(face_depths)
    return SourceVideo(frames=frames, depths=depths, t_values=list(man.t_values))


def build_bridge_videos(video_i: SourceVideo, video_j: SourceVideo, k: int,
                        backend: SynthesisBackend,
                        pano_width: int | None = None,
                        source_pair=(0, 1)) -> BridgeVideos:
    """Synthesize K intermediate panoramic videos between two captures.

    Every frame is synthesized independently at its own timestamp; there
    is no temporal interpolation.  Returns the per-face images and masks
    alongside each assembled panorama.

    Args:
      video_i, video_j: the two source captures (equal frame counts).
      k: number of intermediate positions.
      backend: synthesis backend.
      pano_width: assembled panorama width (default 4 * face_res).
      source_pair: location indices recorded in the plan.

    Raises:
      ValueError: frame-count mismatch or k < 1.
    """
    if len(video_i.frames) != len(video_j.frames):
        raise ValueError(
            f"source frame counts differ: {len(video_i.frames)} vs "
            f"{len(video_j.frames)}")
    face_res = video_i.frames[0].face_res
    if pano_width is None:
        pano_width = 4 * face_res
    pano_height = pano_width // 2

    plan = plan_bridge(video_i.position, video_j.position, k, face_res,
                       source_pair)
    result = BridgeVideos(plan=plan)
    for kk in range(k):
        cams = plan.cameras(kk)
        pose = PoseSE3(rotation=quat_identity(), position=plan.positions[kk])
        for f, t in enumerate(video_i.t_values):
            cube_i, cube_j = video_i.frames[f], video_j.frames[f]
            faces = {}
            masks = {}
            for pair in pair_faces(cube_i, cube_j):
                aux = None
                if video_i.depths is not None and video_j.depths is not None:
                    aux = (video_i.depths[f][pair.face],
                           video_j.depths[f][pair.face])
                image, mask = synthesize_views(pair, [cams[pair.face]], t,
                                               backend, aux)[0]
                faces[pair.face] = image
                masks[pair.face] = mask
            aux_ud = None
            if video_i.depths is not None and video_j.depths is not None:
                aux_ud = (video_i.depths[f], video_j.depths[f])
            (up, up_mask), (down, down_mask) = synthesize_updown(
                plan.positions[kk], t, [cube_i, cube_j], backend, face_res,
                aux_ud)
            faces["up"], faces["down"] = up, down
            masks["up"], masks["down"] = up_mask, down_mask

            pano = assemble_bridge_panorama(faces, pano_width, pano_height,
                                            pose)
            mask_cube = CubemapSet(face_res=face_res, pose=pose,
                                   images={n: m for n, m in masks.items()})
            pano_mask = cubemap_to_equirect(mask_cube, pano_width, pano_height)
            result.frames.append(BridgeFrame(
                k=kk, frame=f, t=t, position=plan.positions[kk].copy(),
                faces=faces, masks=masks, panorama=pano, pano_mask=pano_mask))
    logger.info("synthesized %d bridge frames (%d positions x %d frames)",
                len(result.frames), k, len(video_i.frames))
    return result


# ---------------------------------------------------------------------------
# Dataset integration
# ---------------------------------------------------------------------------

def write_bridge_outputs(dataset: Dataset, videos: BridgeVideos) -> None:
    """Write panoramas, masks, per-face views, poses.json; extend manifest.

    Every synthesized face becomes a ViewRecord with kind "bridge" and a
    validity-mask path, appended to manifest.bridge_samples.  Re-running
    replaces any previous bridge outputs in the manifest.
    """
    man = dataset.manifest
    man.bridge_samples = []
    next_id = 1 + max((s.sample_id for s in man.samples), default=-1)

    for fr in videos.frames:
        kdir = f"bridge/k{fr.k}"
        pano_rel = f"{kdir}/f{fr.frame:02d}.png"
        im.write_png(dataset.path(pano_rel), fr.panorama)
        im.write_png(dataset.path(f"{kdir}/f{fr.frame:02d}_mask.png"),
                     fr.pano_mask)
        pose = PoseSE3(rotation=quat_identity(), position=fr.position)
        cube = CubemapSet(face_res=man.face_res, pose=pose)
        for face_idx, face in enumerate(FACE_NAMES):
            face_rel = f"{kdir}/faces/f{fr.frame:02d}/{face}.png"
            mask_rel = f"{kdir}/faces/f{fr.frame:02d}/{face}_mask.png"
            im.write_png(dataset.path(face_rel), fr.faces[face])
            im.write_png(dataset.path(mask_rel), fr.masks[face])
            man.bridge_samples.append(ViewRecord(
                sample_id=next_id, kind=KIND_BRIDGE, location=-1,
                frame=fr.frame, view=face_idx, t=fr.t, image=face_rel,
                camera=cube.face_camera(face), mask=mask_rel,
                bridge_index=fr.k))
            next_id += 1

    poses = {
        "source_pair": list(videos.plan.source_pair),
        "k": len(videos.plan.positions),
        "positions": videos.plan.positions.tolist(),
        "orientation": quat_identity().tolist(),
        "t_values": [float(t) for t in
                     sorted({fr.t for fr in videos.frames})],
        "panoramas": [
            {"k": fr.k, "frame": fr.frame, "t": fr.t,
             "image": f"bridge/k{fr.k}/f{fr.frame:02d}.png",
             "mask": f"bridge/k{fr.k}/f{fr.frame:02d}_mask.png"}
            for fr in videos.frames
        ],
    }
    with open(dataset.path("bridge/poses.json"), "w") as f:
        json.dump(poses, f, indent=1)
    man.bridge = {"k": len(videos.plan.positions),
                  "positions": videos.plan.positions.tolist()}
    man.save(dataset.root)
    logger.info("wrote %d bridge views under %s", len(man.bridge_samples),
                dataset.path("bridge"))

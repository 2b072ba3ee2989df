"""Image and depth file IO.

All in-memory images are float64 in [0, 1]; PNG files are 8-bit.  Depth maps
are stored as raw little-endian float32, row-major, with a JSON sidecar
recording {width, height, min, max}.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import FACE_NAMES, CubemapSet, PoseSE3


def quantize(img: np.ndarray) -> np.ndarray:
    """Float [0,1] -> uint8 with round-half-away rounding (matches PNG files)."""
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = quantize(img)
    if arr.ndim == 3 and arr.shape[2] == 3:
        mode = "RGB"
    elif arr.ndim == 2:
        mode = "L"
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    """Raw float32 LE + JSON sidecar at `<path>.json`."""
    path = Path(path)
    d = np.ascontiguousarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(d.tobytes())
    sidecar = {
        "width": int(d.shape[1]),
        "height": int(d.shape[0]),
        "min": float(d.min()) if d.size else 0.0,
        "max": float(d.max()) if d.size else 0.0,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def read_depth(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    w, h = int(meta["width"]), int(meta["height"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != w * h:
        raise ValueError(f"depth payload has {raw.size} values, expected {w * h}")
    return raw.reshape(h, w).astype(np.float64)


def write_cubemap_dir(dirpath, cube: CubemapSet) -> None:
    """front.png ... down.png plus camera.json in `dirpath`."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    if cube.images is None or set(cube.images) != set(FACE_NAMES):
        raise ValueError("cubemap is missing faces")
    for face in FACE_NAMES:
        write_png(dirpath / f"{face}.png", cube.images[face])
    camera = {"face_res": cube.face_res, "pose": cube.pose.to_json()}
    (dirpath / "camera.json").write_text(json.dumps(camera, indent=1))


def read_cubemap_dir(dirpath) -> CubemapSet:
    dirpath = Path(dirpath)
    camera = json.loads((dirpath / "camera.json").read_text())
    cube = CubemapSet(
        face_res=int(camera["face_res"]),
        pose=PoseSE3.from_json(camera["pose"]),
        images={},
    )
    for face in FACE_NAMES:
        cube.images[face] = read_png(dirpath / f"{face}.png")
    return cube

"""Dataset layout and manifest.

A capture dataset is a directory tree with one ``manifest.json`` at the
root describing every stored view.  All paths inside the manifest are
relative to the dataset root, forward-slash separated.

Layout written by the benchmark capture step::

    manifest.json
    views/loc{L}/f{F:02d}/v{V:03d}.png        rig view RGB
    views/loc{L}/f{F:02d}/v{V:03d}.depth      raw float32 + .json sidecar
    cubemaps/loc{L}/f{F:02d}/{face}.png       six 90-degree faces
    cubemaps/loc{L}/f{F:02d}/{face}.depth     matching Z-depth
    cubemaps/loc{L}/f{F:02d}/camera.json
    panoramas/loc{L}/f{F:02d}.png             assembled equirect panorama
    trajectory/p{P:02d}/f{F:02d}.png          ground-truth eval panoramas

The bridge step appends ``bridge/`` outputs and extra view records with
``kind == "bridge"`` plus per-view validity masks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PinholeCamera
from . import images as im

logger = logging.getLogger(__name__)

# Frames withheld from training in the temporal generalization split.
HELD_OUT_FRAMES = (3, 7)

KIND_REAL = "real"
KIND_BRIDGE = "bridge"


@dataclass
class ViewRecord:
    """One stored training/eval view (a real rig capture or a bridge face)."""

    sample_id: int
    kind: str                 # "real" | "bridge"
    location: int             # capture location index; -1 for bridge views
    frame: int
    view: int                 # rig view index (real) or face index (bridge)
    t: float
    image: str                # relative path
    camera: PinholeCamera
    depth: str | None = None
    mask: str | None = None   # validity mask, bridge views only
    bridge_index: int | None = None  # which intermediate position

    def to_json(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "kind": self.kind,
            "location": self.location,
            "frame": self.frame,
            "view": self.view,
            "t": self.t,
            "image": self.image,
            "camera": self.camera.to_json(),
        }
        if self.depth is not None:
            d["depth"] = self.depth
        if self.mask is not None:
            d["mask"] = self.mask
        if self.bridge_index is not None:
            d["bridge_index"] = self.bridge_index
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ViewRecord":
        return cls(
            sample_id=int(d["sample_id"]),
            kind=d["kind"],
            location=int(d["location"]),
            frame=int(d["frame"]),
            view=int(d["view"]),
            t=float(d["t"]),
            image=d["image"],
            camera=PinholeCamera.from_json(d["camera"]),
            depth=d.get("depth"),
            mask=d.get("mask"),
            bridge_index=d.get("bridge_index"),
        )


@dataclass
class TrajectoryRecord:
    """Ground-truth panorama at one (pose, frame) of the walk-through path."""

    pose_index: int
    frame: int
    t: float
    position: np.ndarray      # (3,)
    image: str                # relative path to the equirect panorama

    def to_json(self) -> dict:
        return {
            "pose_index": self.pose_index,
            "frame": self.frame,
            "t": self.t,
            "position": np.asarray(self.position, dtype=float).tolist(),
            "image": self.image,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryRecord":
        return cls(int(d["pose_index"]), int(d["frame"]), float(d["t"]),
                   np.asarray(d["position"], dtype=np.float64), d["image"])


@dataclass
class DatasetManifest:
    """Everything needed to locate and interpret the stored views."""

    locations: list            # capture positions, list of (3,) arrays
    t_values: list             # frame timestamps, seconds
    view_res: int
    pano_height: int
    face_res: int
    world: dict                # generation parameters, for provenance
    samples: list = field(default_factory=list)       # ViewRecord, real
    trajectory: list = field(default_factory=list)    # TrajectoryRecord
    bridge_samples: list = field(default_factory=list)  # ViewRecord, bridge
    bridge: dict | None = None  # {"k": int, "positions": [[x,y,z], ...]}

    @property
    def n_frames(self) -> int:
        return len(self.t_values)

    def capture_positions(self) -> np.ndarray:
        return np.asarray([np.asarray(p, dtype=np.float64) for p in self.locations])

    def to_json(self) -> dict:
        d = {
            "locations": [np.asarray(p, dtype=float).tolist() for p in self.locations],
            "t_values": [float(t) for t in self.t_values],
            "view_res": self.view_res,
            "pano_height": self.pano_height,
            "face_res": self.face_res,
            "world": self.world,
            "samples": [s.to_json() for s in self.samples],
            "trajectory": [r.to_json() for r in self.trajectory],
            "bridge_samples": [s.to_json() for s in self.bridge_samples],
        }
        if self.bridge is not None:
            d["bridge"] = self.bridge
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(
            locations=[np.asarray(p, dtype=np.float64) for p in d["locations"]],
            t_values=[float(t) for t in d["t_values"]],
            view_res=int(d["view_res"]),
            pano_height=int(d["pano_height"]),
            face_res=int(d["face_res"]),
            world=d["world"],
            samples=[ViewRecord.from_json(s) for s in d["samples"]],
            trajectory=[TrajectoryRecord.from_json(r) for r in d["trajectory"]],
            bridge_samples=[ViewRecord.from_json(s) for s in d.get("bridge_samples", [])],
            bridge=d.get("bridge"),
        )

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "manifest.json", "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root) / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json under {root}")
        with open(path) as f:
            return cls.from_json(json.load(f))


class Dataset:
    """Manifest plus root-relative file access."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    @classmethod
    def open(cls, root) -> "Dataset":
        return cls(root, DatasetManifest.load(root))

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, record: ViewRecord) -> np.ndarray:
        return im.read_png(self.path(record.image))

    def load_depth(self, record: ViewRecord) -> np.ndarray:
        if record.depth is None:
            raise ValueError(f"view {record.sample_id} has no stored depth")
        return im.read_depth(self.path(record.depth))

    def load_mask(self, record: ViewRecord) -> np.ndarray | None:
        if record.mask is None:
            return None
        return im.read_png(self.path(record.mask))

    def all_views(self) -> list:
        return list(self.manifest.samples) + list(self.manifest.bridge_samples)


def make_splits(manifest: DatasetManifest) -> dict:
    """Train/eval id lists for the two protocol settings.

    ``full`` trains on every real capture; ``temporal`` withholds the
    frames in HELD_OUT_FRAMES entirely and evaluates on them.  Bridge
    views are listed separately (they join training whenever bridging is
    enabled, regardless of split -- synthesized views exist for training
    only and are never evaluation targets).

    Returns:
      dict with id lists: full_train, temporal_train, temporal_test,
      bridge_train.
    """
    held = set(HELD_OUT_FRAMES)
    full_train = [s.sample_id for s in manifest.samples]
    temporal_train = [s.sample_id for s in manifest.samples if s.frame not in held]
    temporal_test = [s.sample_id for s in manifest.samples if s.frame in held]
    bridge_train = [s.sample_id for s in manifest.bridge_samples]
    return {
        "full_train": full_train,
        "temporal_train": temporal_train,
        "temporal_test": temporal_test,
        "bridge_train": bridge_train,
    }

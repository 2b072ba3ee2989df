"""Dataset manifest, records, splits, and image/depth file IO."""

import numpy as np
import pytest

from stitch4d import data, images as im
from stitch4d.data import (
    HELD_OUT_FRAMES,
    KIND_BRIDGE,
    KIND_REAL,
    Dataset,
    DatasetManifest,
    TrajectoryRecord,
    ViewRecord,
)
from stitch4d.geometry import FACE_NAMES, CubemapSet, PinholeCamera, PoseSE3


def _camera():
    return PinholeCamera(8, 8, np.pi / 2, np.pi / 2)


def _record(sample_id=0, kind=KIND_REAL, frame=0, **kw):
    defaults = dict(location=0, view=0, t=0.0, image=f"views/{sample_id}.png",
                    camera=_camera())
    defaults.update(kw)
    return ViewRecord(sample_id=sample_id, kind=kind, frame=frame, **defaults)


# ---------------------------------------------------------------------------
# Quantization and file IO
# ---------------------------------------------------------------------------

def test_quantize_oracle():
    img = np.array([0.0, 0.5, 1.0, 0.2, -0.3, 1.7])
    np.testing.assert_array_equal(im.quantize(img), [0, 128, 255, 51, 0, 255])
    assert im.quantize(img).dtype == np.uint8


def test_png_roundtrip_rgb_and_gray(tmp_path, rng):
    rgb = rng.random((6, 5, 3))
    im.write_png(tmp_path / "a.png", rgb)
    back = im.read_png(tmp_path / "a.png")
    np.testing.assert_array_equal(back, im.quantize(rgb) / 255.0)

    gray = rng.random((4, 7))
    im.write_png(tmp_path / "g.png", gray)
    np.testing.assert_array_equal(im.read_png(tmp_path / "g.png"),
                                  im.quantize(gray) / 255.0)


def test_write_png_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        im.write_png(tmp_path / "bad.png", np.zeros((4, 4, 4)))


def test_depth_roundtrip_exact(tmp_path, rng):
    depth = rng.random((5, 9)).astype(np.float32).astype(np.float64)
    im.write_depth(tmp_path / "d.depth", depth)
    back = im.read_depth(tmp_path / "d.depth")
    np.testing.assert_array_equal(back, depth)
    assert back.dtype == np.float64


def test_depth_truncated_payload_raises(tmp_path):
    im.write_depth(tmp_path / "d.depth", np.ones((4, 4)))
    raw = (tmp_path / "d.depth").read_bytes()
    (tmp_path / "d.depth").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="expected"):
        im.read_depth(tmp_path / "d.depth")


def test_write_depth_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        im.write_depth(tmp_path / "d.depth", np.zeros((2, 2, 2)))


def test_cubemap_dir_roundtrip(tmp_path, rng):
    pose = PoseSE3(position=np.array([1.0, 2.0, 3.0]))
    cube = CubemapSet(face_res=4, pose=pose,
                      images={f: rng.random((4, 4, 3)) for f in FACE_NAMES})
    im.write_cubemap_dir(tmp_path / "cube", cube)
    back = im.read_cubemap_dir(tmp_path / "cube")
    assert back.face_res == 4
    np.testing.assert_array_equal(back.pose.position, pose.position)
    for f in FACE_NAMES:
        np.testing.assert_array_equal(back.images[f],
                                      im.quantize(cube.images[f]) / 255.0)


def test_write_cubemap_dir_requires_all_faces(tmp_path):
    cube = CubemapSet(face_res=4, images={"front": np.zeros((4, 4, 3))})
    with pytest.raises(ValueError):
        im.write_cubemap_dir(tmp_path / "cube", cube)


# ---------------------------------------------------------------------------
# Records and manifest
# ---------------------------------------------------------------------------

def test_view_record_json_roundtrip():
    rec = _record(sample_id=7, kind=KIND_BRIDGE, frame=2, location=-1,
                  t=0.25, mask="m.png", bridge_index=1, depth="d.depth")
    back = ViewRecord.from_json(rec.to_json())
    assert back.sample_id == 7 and back.kind == KIND_BRIDGE
    assert back.location == -1 and back.frame == 2 and back.t == 0.25
    assert back.mask == "m.png" and back.bridge_index == 1
    assert back.depth == "d.depth"
    assert back.camera.width == rec.camera.width


def test_view_record_optional_fields_default_none():
    d = _record().to_json()
    assert "mask" not in d and "bridge_index" not in d and "depth" not in d
    back = ViewRecord.from_json(d)
    assert back.mask is None and back.bridge_index is None and back.depth is None


def test_trajectory_record_roundtrip():
    rec = TrajectoryRecord(pose_index=3, frame=1, t=0.1,
                           position=np.array([0.5, 0.0, -1.0]), image="t.png")
    back = TrajectoryRecord.from_json(rec.to_json())
    assert back.pose_index == 3 and back.frame == 1 and back.t == 0.1
    np.testing.assert_array_equal(back.position, rec.position)
    assert back.image == "t.png"


def _tiny_manifest(n_frames=10, per_frame=3):
    samples = []
    sid = 0
    for f in range(n_frames):
        for v in range(per_frame):
            samples.append(_record(sample_id=sid, frame=f, view=v,
                                   t=f / n_frames))
            sid += 1
    return DatasetManifest(
        locations=[np.array([-2.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0])],
        t_values=[f / n_frames for f in range(n_frames)],
        view_res=8, pano_height=16, face_res=8,
        world={"seed": 0}, samples=samples,
    )


def test_manifest_save_load_roundtrip(tmp_path):
    man = _tiny_manifest()
    man.bridge = {"k": 2, "positions": [[0.0, 0.0, 0.0]]}
    man.bridge_samples = [_record(sample_id=999, kind=KIND_BRIDGE,
                                  location=-1, mask="m.png", bridge_index=0)]
    man.trajectory = [TrajectoryRecord(0, 0, 0.0, np.zeros(3), "t.png")]
    man.save(tmp_path)
    back = DatasetManifest.load(tmp_path)
    assert back.n_frames == man.n_frames
    assert len(back.samples) == len(man.samples)
    assert len(back.bridge_samples) == 1
    assert back.bridge == man.bridge
    assert back.view_res == 8 and back.pano_height == 16 and back.face_res == 8
    np.testing.assert_array_equal(back.capture_positions(),
                                  man.capture_positions())
    assert back.trajectory[0].image == "t.png"


def test_manifest_without_bridge_stays_none(tmp_path):
    man = _tiny_manifest(n_frames=1, per_frame=1)
    man.save(tmp_path)
    back = DatasetManifest.load(tmp_path)
    assert back.bridge is None and back.bridge_samples == []


def test_manifest_load_missing_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "nope")


def test_dataset_open_and_access(tmp_path, rng):
    man = _tiny_manifest(n_frames=1, per_frame=1)
    img = rng.random((8, 8, 3))
    im.write_png(tmp_path / man.samples[0].image, img)
    man.save(tmp_path)
    ds = Dataset.open(tmp_path)
    np.testing.assert_array_equal(ds.load_image(ds.manifest.samples[0]),
                                  im.quantize(img) / 255.0)
    assert ds.load_mask(ds.manifest.samples[0]) is None
    with pytest.raises(ValueError, match="no stored depth"):
        ds.load_depth(ds.manifest.samples[0])
    assert len(ds.all_views()) == 1


# ---------------------------------------------------------------------------
# Split arithmetic
# ---------------------------------------------------------------------------

def test_held_out_frames_constant():
    assert HELD_OUT_FRAMES == (3, 7)


def test_make_splits_oracle():
    man = _tiny_manifest(n_frames=10, per_frame=3)
    man.bridge_samples = [_record(sample_id=100, kind=KIND_BRIDGE, location=-1)]
    splits = data.make_splits(man)
    assert len(splits["full_train"]) == 30
    assert len(splits["temporal_train"]) == 24
    assert len(splits["temporal_test"]) == 6
    assert splits["bridge_train"] == [100]
    # held-out ids are exactly the frame-{3,7} samples
    by_id = {s.sample_id: s for s in man.samples}
    assert {by_id[i].frame for i in splits["temporal_test"]} == set(HELD_OUT_FRAMES)
    assert set(splits["temporal_train"]).isdisjoint(splits["temporal_test"])
    assert sorted(splits["temporal_train"] + splits["temporal_test"]) == sorted(
        splits["full_train"])


def test_make_splits_on_captured_dataset(tiny_dataset):
    man = tiny_dataset.manifest
    splits = data.make_splits(man)
    n = len(man.samples)
    assert len(splits["full_train"]) == n
    held = sum(1 for s in man.samples if s.frame in HELD_OUT_FRAMES)
    assert len(splits["temporal_test"]) == held
    assert len(splits["temporal_train"]) == n - held
    assert len(splits["bridge_train"]) == len(man.bridge_samples) > 0

"""Shared fixtures: a tiny captured dataset reused across test modules.

The capture protocol is expensive relative to unit tests, so the smallest
world that still exercises every artifact (two locations, movers, bridges,
masks, trajectory panoramas) is built once per session.
"""

import numpy as np
import pytest

from stitch4d import bench, bridging
from stitch4d.data import Dataset
from stitch4d.geometry import build_view_rig


TINY_SPEC = bench.WorldSpec(
    seed=5, n_static=6, n_dynamic=1, extent=5.0, surface_step=1.25
)
TINY_VIEW_RES = 16
TINY_PANO_HEIGHT = 32


@pytest.fixture(scope="session")
def tiny_world():
    return bench.generate_world(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_world) -> Dataset:
    """Full capture of the tiny world, with k=2 bridges appended."""
    root = tmp_path_factory.mktemp("tiny_ds")
    rig = build_view_rig()
    ds = bench.capture_dataset(
        tiny_world, TINY_SPEC.capture_positions(), rig, TINY_SPEC, root,
        view_res=TINY_VIEW_RES, pano_height=TINY_PANO_HEIGHT,
    )
    video_i = bridging.load_source_video(ds, 0)
    video_j = bridging.load_source_video(ds, 1)
    videos = bridging.build_bridge_videos(
        video_i, video_j, k=2, backend=bridging.make_backend("reproject")
    )
    bridging.write_bridge_outputs(ds, videos)
    return Dataset.open(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_collection_modifyitems(items):
    """Run the release gate after the unit suite (it trains real models)."""
    items.sort(key=lambda it: it.path.name == "test_acceptance.py")

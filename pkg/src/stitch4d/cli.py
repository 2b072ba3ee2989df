"""Command-line entry point wiring all modules into reproducible runs.

One binary, subcommand style::

    stitch4d gen       --spec spec.json --out ds/
    stitch4d bridge    --data ds/ --k 3 --backend reproject
    stitch4d train     --config train.json --out run/
    stitch4d render    --scene run/final.stz --poses path.json --out frames/
    stitch4d eval      --scene run/final.stz --data ds/ --out metrics.csv
    stitch4d gradcheck --seed 0

All configs are JSON so runs are diffable; every subcommand is
deterministic given identical inputs and --seed.  Module errors exit with
code 1 and a one-line ``error: <subcommand>: <message>`` on stderr.

gen spec.json holds WorldSpec fields plus optional "view_res" and
"pano_height".  train config holds {"data": <dataset dir>, "seed": int,
"optim": {OptimConfig fields}, "loss": {LossConfig overrides},
"init": "cold" | {"stride": int, "frame": int} | "<scene.stz>",
"include_bridge": bool, "locations": [int] | null,
"probe_sample": int | null}.  render poses JSON is either a list of
{"position": [x,y,z], "t": float} or {"height": int, "poses": [...]}.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, bridging
from . import optimizer as opt
from .data import Dataset
from .geometry import build_view_rig
from .losses import LossConfig
from .parallel import THREADS_ENV_VAR, resolve_threads
from .scene import load_scene, save_scene
from .validation import finite_difference_check
from . import images as im

logger = logging.getLogger(__name__)

GRADCHECK_PASS_FRACTION = 0.99


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def cmd_gen(args) -> int:
    raw = _load_json(args.spec)
    view_res = int(raw.pop("view_res", 64))
    pano_height = int(raw.pop("pano_height", 128))
    if args.seed is not None:
        raw["seed"] = args.seed
    known = set(bench.WorldSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown world-spec fields: {sorted(unknown)}")
    if "speed_range" in raw:
        raw["speed_range"] = tuple(raw["speed_range"])
    if "locations" in raw:
        raw["locations"] = tuple(tuple(p) for p in raw["locations"])
    spec = bench.WorldSpec(**raw)
    teacher = bench.generate_world(spec)
    rig = build_view_rig()
    ds = bench.capture_dataset(
        teacher, spec.capture_positions(), rig, spec, args.out,
        view_res=view_res, pano_height=pano_height,
    )
    save_scene(Path(args.out) / "teacher.stz", teacher)
    print(f"gen: {len(ds.manifest.samples)} samples, "
          f"{len(ds.manifest.trajectory)} trajectory panoramas -> {args.out}")
    return 0


def cmd_bridge(args) -> int:
    ds = Dataset.open(args.data)
    if len(ds.manifest.locations) < 2:
        raise ValueError("bridging needs at least two capture locations")
    backend = bridging.make_backend(args.backend)
    video_i = bridging.load_source_video(ds, 0)
    video_j = bridging.load_source_video(ds, 1)
    videos = bridging.build_bridge_videos(video_i, video_j, k=args.k, backend=backend)
    bridging.write_bridge_outputs(ds, videos)
    n = len(videos.plan.positions)
    print(f"bridge: {n} positions x {ds.manifest.n_frames} frames -> {args.data}")
    return 0


def _loss_config(overrides: dict, capture_positions) -> LossConfig:
    known = set(LossConfig.__dataclass_fields__)
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown loss fields: {sorted(unknown)}")
    return LossConfig.for_captures(capture_positions, **overrides)


def cmd_train(args) -> int:
    config_path = Path(args.config)
    raw = _load_json(config_path)
    data_dir = Path(raw.get("data", "ds"))
    if not data_dir.is_absolute():
        data_dir = config_path.parent / data_dir
    ds = Dataset.open(data_dir)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    optim_cfg = opt.OptimConfig.from_json(raw.get("optim", {}))
    loss_cfg = _loss_config(raw.get("loss", {}), ds.manifest.capture_positions())

    init = raw.get("init", "cold")
    if init == "cold":
        scene = opt.cold_init(ds)
    elif isinstance(init, dict):
        scene = opt.cold_init(
            ds, stride=int(init.get("stride", 8)), frame=int(init.get("frame", 0)),
            locations=init.get("locations"),
        )
    else:
        init_path = Path(init)
        if not init_path.is_absolute():
            init_path = config_path.parent / init_path
        scene = load_scene(init_path)

    samples = opt.build_train_set(
        ds,
        include_bridge=bool(raw.get("include_bridge", True)),
        locations=raw.get("locations"),
    )
    probe = None
    if raw.get("probe_sample") is not None:
        wanted = int(raw["probe_sample"])
        probe = next((s for s in samples if s.sample_id == wanted), None)
        if probe is None:
            raise ValueError(f"probe_sample {wanted} is not in the train set")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "data": str(data_dir),
        "seed": seed,
        "optim": optim_cfg.to_json(),
        "loss": dataclasses.asdict(loss_cfg),
        "include_bridge": bool(raw.get("include_bridge", True)),
        "locations": raw.get("locations"),
        "init": init,
    }
    with open(out_dir / "train_config.json", "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)

    result = opt.train(
        scene, samples, optim_cfg, loss_cfg, seed=seed,
        out_dir=out_dir, probe=probe, threads=args.resolved_threads,
    )
    last = result.log[-1] if result.log else None
    tail = (f"loss {last['loss']:.5f}, probe {last['probe_psnr']:.2f} dB, "
            f"N={last['n_gaussians']}") if last else "0 iterations"
    print(f"train: {optim_cfg.iterations} iterations -> {result.checkpoint} ({tail})")
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    raw = _load_json(args.poses)
    if isinstance(raw, dict):
        poses = raw["poses"]
        height = int(raw.get("height", 128))
    else:
        poses = raw
        height = 128
    if not poses:
        raise ValueError("pose list is empty")
    out_dir = Path(args.out)
    for i, p in enumerate(poses):
        pano = bench.render_panorama(
            scene, np.asarray(p["position"], dtype=np.float64), height, float(p.get("t", 0.0))
        )
        im.write_png(out_dir / f"f{i:04d}.png", pano)
    print(f"render: {len(poses)} panoramas ({height}x{2 * height}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    ds = Dataset.open(args.data)
    splits = [bench.make_splits(ds.manifest, args.setting, c) for c in bench.CONDITIONS]
    rows = bench.evaluate(scene, ds, splits=splits, out_csv=args.out)
    for r in rows:
        print(f"eval: {r['setting']}/{r['condition']}: "
              f"{r['psnr_db']:.2f} dB, ssim {r['ssim']:.4f} ({r['n_samples']} samples)")
    return 0


def cmd_gradcheck(args) -> int:
    result = finite_difference_check(
        seed=args.seed or 0, n_gaussians=args.n_gaussians, resolution=args.resolution
    )
    print(f"gradcheck: {result.failures} failures / {result.total} params")
    return 0 if result.pass_fraction >= GRADCHECK_PASS_FRACTION else 1


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stitch4d",
        description="Sparse multi-location 4D reconstruction experiments.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True, metavar="subcommand")

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default,
                       help="random seed (default 0; train: overrides the config)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: {THREADS_ENV_VAR} or all cores); "
                            "never changes results")

    p = sub.add_parser("gen", help="build a synthetic two-location capture dataset")
    p.add_argument("--spec", required=True, help="world-spec JSON")
    p.add_argument("--out", required=True, help="dataset directory to create")
    common(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("bridge", help="synthesize bridge views between the captures")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--k", type=int, default=3, help="intermediate positions (default 3)")
    p.add_argument("--backend", default="reproject",
                   help='"reproject" or "external:<command>" (default reproject)')
    common(p)
    p.set_defaults(fn=cmd_bridge)

    p = sub.add_parser("train", help="train a scene from a JSON config")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="run directory (checkpoints + log.csv)")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render panoramas for a pose list")
    p.add_argument("--scene", required=True, help=".stz scene checkpoint")
    p.add_argument("--poses", required=True, help="pose-list JSON")
    p.add_argument("--out", required=True, help="output frame directory")
    common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="evaluate a scene against a dataset")
    p.add_argument("--scene", required=True, help=".stz scene checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--setting", choices=bench.MODES, default="full",
                   help="which training split the scene saw (table row label)")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of renderer gradients")
    p.add_argument("--n-gaussians", type=int, default=20)
    p.add_argument("--resolution", type=int, default=32)
    common(p, seed_default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def dispatch(argv=None) -> int:
    """Parse and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors; fold the latter to 1.
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.resolved_threads = resolve_threads(args.threads)
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {args.cmd}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

"""Joint optimization of one temporal Gaussian scene across capture locations.

One training loop owns a single GaussianScene and fits it against
perspective targets from every capture location plus synthesized bridge
views, using the seam-aware loss.  Parameters update with bias-corrected
Adam in five learning-rate groups:

    position  {mu0, vel, acc}          lr_position (x0.01 exp decay)
    rotation  {rot0, ang_vel}          lr_rotation
    scaling   {log_scale}              lr_scaling
    opacity   {opacity_logit, s_t}     lr_opacity
    feature   {color0, color_rate}     lr_feature

`t_center` belongs to no group and stays at its initialization.  There is
no densification; Gaussians whose base opacity falls below prune_opacity
are removed every prune_interval steps.

Per-batch-item render/backward work runs in parallel; each iteration draws
all randomness up front and reduces gradients in batch order, so results
are bit-identical for any thread count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import PSNR_CAP, psnr
from .data import KIND_REAL, Dataset
from .geometry import FACE_NAMES, PinholeCamera
from .images import quantize, read_depth, read_png
from .losses import BoundaryGeometry, LossConfig, boundary_distance, cross_loss, sail_loss
from .parallel import ordered_map
from .renderer import render, render_backward
from .scene import (
    MAX_SCALE,
    MIN_SCALE,
    GaussianScene,
    InitView,
    SceneGradients,
    init_from_depth,
    save_scene,
)

logger = logging.getLogger(__name__)

# (scene field, learning-rate group), in update order.
OPTIMIZED_FIELDS = (
    ("mu0", "position"),
    ("vel", "position"),
    ("acc", "position"),
    ("rot0", "rotation"),
    ("ang_vel", "rotation"),
    ("log_scale", "scaling"),
    ("opacity_logit", "opacity"),
    ("s_t", "opacity"),
    ("color0", "feature"),
    ("color_rate", "feature"),
)

GROUP_NAMES = ("position", "rotation", "scaling", "opacity", "feature")

LOG_FIELDS = ("iteration", "loss", "recon", "cross", "probe_psnr", "n_gaussians")

_LOG_SCALE_MIN = math.log(MIN_SCALE)
_LOG_SCALE_MAX = math.log(MAX_SCALE)

# Bridge views get location keys disjoint from real capture indices so the
# cross-pair sampler treats each intermediate position as its own location.
_BRIDGE_LOCATION_BASE = 1000


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; carries the last-good state."""

    def __init__(self, message: str, scene: GaussianScene, checkpoint=None):
        super().__init__(message)
        self.scene = scene
        self.checkpoint = checkpoint


@dataclass
class OptimConfig:
    """Training hyperparameters.

    lr_position decays exponentially to position_lr_decay (x0.01) of its
    initial value over `iterations` steps; the other groups hold constant.
    `bridge_weight` scales the sampling probability of bridge views
    relative to real ones; `pair_prob` is the chance per iteration of
    drawing one extra same-timestamp cross-location pair for the gradient
    consistency term.
    """

    lr_feature: float = 0.001
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    lr_rotation: float = 0.001
    lr_position: float = 1.6e-4
    position_lr_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    iterations: int = 2000
    batch: int = 4
    prune_interval: int = 500
    prune_opacity: float = 0.005
    bridge_weight: float = 1.0
    pair_prob: float = 0.5
    probe_interval: int = 50
    checkpoint_interval: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        for name in ("lr_feature", "lr_opacity", "lr_scaling", "lr_rotation", "lr_position"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.bridge_weight < 0:
            raise ValueError("bridge_weight must be >= 0")
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError("pair_prob must lie in [0, 1]")

    def group_lrs(self, iteration: int) -> dict:
        """Per-group learning rates at a 1-based step index."""
        frac = iteration / max(1, self.iterations)
        return {
            "position": self.lr_position * self.position_lr_decay**frac,
            "rotation": self.lr_rotation,
            "scaling": self.lr_scaling,
            "opacity": self.lr_opacity,
            "feature": self.lr_feature,
        }

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "OptimConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown OptimConfig fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class TrainSample:
    """One training target: an image, its camera, and its seam distance.

    Images (and masks) are held quantized as uint8 -- exactly what the PNG
    files store -- and expanded to float on use, which keeps a full
    2400-sample capture around 30 MB.
    """

    sample_id: int
    source_kind: str          # "real" | "bridge"
    location: int             # capture index; bridge views get disjoint keys
    camera: object
    t: float
    delta: float              # boundary distance of the camera position
    image: np.ndarray         # (H, W, 3) uint8
    mask: np.ndarray | None = None  # (H, W) uint8, bridge validity

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )

    def target(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0

    def mask_array(self) -> np.ndarray | None:
        if self.mask is None:
            return None
        return self.mask.astype(np.float64) / 255.0


def build_train_set(
    dataset: Dataset, include_bridge: bool = True, locations=None
) -> list:
    """Load capture (and bridge) views into memory as TrainSamples.

    Boundary distances are computed against all capture positions in the
    manifest, regardless of any location filter -- the seam geometry is a
    property of the rig layout, not of the training subset.  With fewer
    than two capture locations delta is +inf (no seam exists).

    Args:
      dataset: capture dataset (bridge views present if synthesized).
      include_bridge: append bridge views with their validity masks.
      locations: optional collection of capture indices to keep; the
        filter applies to real views only.

    Returns:
      list of TrainSample, real views first, bridge views after.
    """
    man = dataset.manifest
    caps = man.capture_positions()
    geom = BoundaryGeometry(caps) if len(caps) >= 2 else None

    def delta_of(position) -> float:
        if geom is None:
            return math.inf
        return boundary_distance(position, geom)

    keep = None if locations is None else set(int(x) for x in locations)
    samples = []
    for rec in man.samples:
        if keep is not None and rec.location not in keep:
            continue
        img = quantize(dataset.load_image(rec))
        samples.append(
            TrainSample(
                sample_id=rec.sample_id,
                source_kind=rec.kind,
                location=rec.location,
                camera=rec.camera,
                t=rec.t,
                delta=delta_of(rec.camera.pose.position),
                image=img,
            )
        )
    if include_bridge:
        for rec in man.bridge_samples:
            img = quantize(dataset.load_image(rec))
            mask = dataset.load_mask(rec)
            samples.append(
                TrainSample(
                    sample_id=rec.sample_id,
                    source_kind=rec.kind,
                    location=_BRIDGE_LOCATION_BASE + (rec.bridge_index or 0),
                    camera=rec.camera,
                    t=rec.t,
                    delta=delta_of(rec.camera.pose.position),
                    image=img,
                    mask=None if mask is None else quantize(mask),
                )
            )
    logger.info(
        "train set: %d samples (%d bridge)",
        len(samples),
        sum(1 for s in samples if s.source_kind != KIND_REAL),
    )
    return samples


def cold_init(
    dataset: Dataset, stride: int = 8, locations=None, frame: int = 0
) -> GaussianScene:
    """Cold initialization: back-project the stored cubemap depths.

    One static Gaussian per stride-th pixel of each location's six cubemap
    faces at the given frame, positioned by the stored depth and colored
    by the stored pixel.  Motion parameters start at zero; the optimizer
    has to discover any dynamics.

    Args:
      dataset: capture dataset with cubemaps on disk.
      stride: pixel subsampling step (larger = fewer primitives).
      locations: capture indices to use (default: all).
      frame: which frame's cubemaps to back-project.

    Returns:
      GaussianScene sized by the depth coverage.
    """
    man = dataset.manifest
    locs = range(len(man.locations)) if locations is None else locations
    views = []
    for li in locs:
        base = f"cubemaps/loc{li}/f{frame:02d}"
        for face in FACE_NAMES:
            img = read_png(dataset.path(f"{base}/{face}.png"))
            depth = read_depth(dataset.path(f"{base}/{face}.depth"))
            with open(dataset.path(f"{base}/{face}.camera.json")) as fh:
                cam = PinholeCamera.from_json(json.load(fh))
            views.append(InitView(image=img, depth=depth, camera=cam, t=man.t_values[frame]))
    t_hi = float(man.world.get("T", 1.0)) if isinstance(man.world, dict) else 1.0
    return init_from_depth(views, stride, t_domain=(0.0, max(t_hi, man.t_values[-1])))


class BatchSampler:
    """Weighted batch draws plus the optional cross-location pair.

    Primary samples come uniform over (view, timestamp) with bridge views
    weighted by bridge_weight.  With probability pair_prob, one extra
    same-timestamp pair of views from two different locations -- both
    within 2*tau of the boundary -- is drawn for the cross term; if no
    eligible pair exists the pair is always omitted.
    """

    def __init__(self, samples, cfg: OptimConfig, tau: float):
        if not samples:
            raise ValueError("cannot sample from an empty train set")
        self.samples = samples
        self.cfg = cfg
        w = np.array(
            [1.0 if s.source_kind == KIND_REAL else cfg.bridge_weight for s in samples]
        )
        if w.sum() <= 0:
            raise ValueError("all sampling weights are zero")
        self.p = w / w.sum()

        pools: dict = {}
        for i, s in enumerate(samples):
            if s.delta <= 2.0 * tau:
                pools.setdefault(s.t, {}).setdefault(s.location, []).append(i)
        self.pair_pools = {
            t: {loc: idx for loc, idx in locs.items()}
            for t, locs in pools.items()
            if len(locs) >= 2
        }
        self.pair_ts = sorted(self.pair_pools)

    def draw(self, rng: np.random.Generator):
        """One batch: (primary indices, optional (i, j) pair indices)."""
        idx = rng.choice(len(self.samples), size=self.cfg.batch, replace=True, p=self.p)
        pair = None
        if self.pair_ts and rng.random() < self.cfg.pair_prob:
            t = self.pair_ts[rng.integers(len(self.pair_ts))]
            locs = sorted(self.pair_pools[t])
            a, b = rng.permutation(len(locs))[:2]
            pool_a = self.pair_pools[t][locs[a]]
            pool_b = self.pair_pools[t][locs[b]]
            pair = (
                pool_a[rng.integers(len(pool_a))],
                pool_b[rng.integers(len(pool_b))],
            )
        return idx.tolist(), pair


def sample_batch(samples, rng: np.random.Generator, cfg: OptimConfig, tau: float):
    """One-off batch draw (builds a throwaway BatchSampler)."""
    return BatchSampler(samples, cfg, tau).draw(rng)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments per optimized field, plus the step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, scene: GaussianScene) -> "AdamState":
        return cls(
            m={name: np.zeros_like(getattr(scene, name)) for name, _ in OPTIMIZED_FIELDS},
            v={name: np.zeros_like(getattr(scene, name)) for name, _ in OPTIMIZED_FIELDS},
            step=0,
        )

    def select(self, keep: np.ndarray) -> "AdamState":
        """Row-filter the moments (mirrors GaussianScene.select)."""
        return AdamState(
            m={k: a[keep].copy() for k, a in self.m.items()},
            v={k: a[keep].copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_step(
    scene: GaussianScene,
    grads: SceneGradients,
    state: AdamState,
    lr,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> None:
    """One bias-corrected Adam update, in place.

    Args:
      scene: parameters to update.
      grads: gradients (fields matching the scene arrays).
      state: moment estimates; its step counter advances by one.
      lr: scalar applied to every group, or dict group-name -> lr.

    Raises:
      ValueError: a gradient block contains non-finite values (the
        message names the block).
    """
    lrs = lr if isinstance(lr, dict) else {g: float(lr) for g in GROUP_NAMES}
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, group in OPTIMIZED_FIELDS:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter block '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p = getattr(scene, name)
        p -= lrs[group] * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _project_parameters(scene: GaussianScene) -> None:
    """Keep rot0 unit and log_scale inside representable bounds.

    Rows already unit (within 1e-12) are left untouched bit-for-bit, so a
    zero-gradient step leaves the scene exactly unchanged.
    """
    norms = np.linalg.norm(scene.rot0, axis=1, keepdims=True)
    need = np.abs(norms - 1.0) > 1e-12
    if np.any(need):
        np.divide(scene.rot0, np.maximum(norms, 1e-12), out=scene.rot0,
                  where=np.broadcast_to(need, scene.rot0.shape))
    np.clip(scene.log_scale, _LOG_SCALE_MIN, _LOG_SCALE_MAX, out=scene.log_scale)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: GaussianScene
    log: list = field(default_factory=list)   # dict rows, LOG_FIELDS keys
    checkpoint: Path | None = None            # final .stz, when out_dir given


def _probe_psnr(scene: GaussianScene, probe: TrainSample) -> float:
    out = render(scene, probe.camera, probe.t)
    return min(psnr(quantize(out.rgb) / 255.0, probe.target()), PSNR_CAP)


def write_log_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def train(
    init_scene: GaussianScene,
    samples,
    optim_cfg: OptimConfig | None = None,
    loss_cfg: LossConfig | None = None,
    seed: int = 0,
    out_dir=None,
    probe: TrainSample | None = None,
    threads: int = 1,
) -> TrainResult:
    """Fit a scene to the train set with seam-aware joint optimization.

    Each iteration draws `batch` primary samples (bridge views weighted by
    bridge_weight) and, with probability pair_prob, one same-timestamp
    cross-location pair.  The objective per iteration is

        mean_i beta(delta_i) * [recon_i + lambda_reg * reg]
            + lambda_cross * cross(pair)

    with recon masked by each sample's validity mask.  Gradients flow
    through the renderer analytically; each group updates with its own
    Adam learning rate, rot0 is renormalized and log_scale clamped after
    every step, and Gaussians with base opacity below prune_opacity are
    dropped every prune_interval steps (along with their Adam moments).

    Randomness is drawn on the main thread before dispatch and gradient
    reduction follows batch order, so the result is bit-identical for any
    `threads` value.

    Args:
      init_scene: starting scene (not modified; a copy is trained).
      samples: list of TrainSample (see build_train_set).
      optim_cfg: hyperparameters (defaults: OptimConfig()).
      loss_cfg: loss weights, including tau for pair eligibility.
      seed: RNG seed for batch sampling.
      out_dir: when given, receives log.csv, periodic ckpt_*.stz, and
        final.stz.
      probe: fixed view for the logged PSNR (default: first real sample).
      threads: worker threads for per-batch-item render/backward.

    Returns:
      TrainResult with the optimized scene and per-iteration log rows.

    Raises:
      TrainingAborted: the loss turned non-finite; the exception carries
        the last finite-loss scene (also written to abort.stz under
        out_dir, if given).
      ValueError: empty train set, or a non-finite gradient block.
    """
    cfg = optim_cfg or OptimConfig()
    lcfg = loss_cfg or LossConfig()
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    scene = init_scene.copy()
    state = AdamState.zeros(scene)
    rng = np.random.default_rng(seed)
    sampler = BatchSampler(samples, cfg, lcfg.tau)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if probe is None:
        # Most-textured real view: a blank probe (empty sky) would report
        # the PSNR cap forever and tell us nothing.
        pool = [s for s in samples if s.source_kind == KIND_REAL] or samples
        probe = max(pool, key=lambda s: float(s.image.std()))

    rows: list = []
    last_good = scene.copy()
    probe_value = _probe_psnr(scene, probe)
    batch = cfg.batch

    def run_single(index: int):
        s = samples[index]
        mask = s.mask_array()
        if mask is not None and not np.any(mask):
            # A fully-masked view carries no supervision at all; skipping it
            # keeps the regularizer from leaking gradient through dead views.
            return 0.0, 0.0, SceneGradients.zeros(scene.n)
        out = render(scene, s.camera, s.t)
        sail = sail_loss(
            out.rgb, s.target(), s.delta, lcfg,
            masks=mask, log_scales=scene.log_scale,
        )
        grads = render_backward(scene, s.camera, s.t, sail.grad_images[0] / batch)
        if sail.grad_log_scale is not None:
            grads.log_scale += sail.grad_log_scale / batch
        return sail.total, sail.recon, grads

    def run_pair(pair):
        i, j = pair
        si, sj = samples[i], samples[j]
        out_i = render(scene, si.camera, si.t)
        out_j = render(scene, sj.camera, sj.t)
        c = cross_loss(out_i.rgb, out_j.rgb, 0.5 * (si.delta + sj.delta), lcfg)
        if c.skipped or lcfg.lambda_cross == 0.0:
            return 0.0, SceneGradients.zeros(scene.n)
        grads = render_backward(scene, si.camera, si.t, lcfg.lambda_cross * c.grad_1)
        grads.add_(render_backward(scene, sj.camera, sj.t, lcfg.lambda_cross * c.grad_2))
        return c.value, grads

    for it in range(1, cfg.iterations + 1):
        idx, pair = sampler.draw(rng)
        jobs = [(lambda k=k: run_single(k)) for k in idx]
        if pair is not None:
            jobs.append(lambda: run_pair(pair))
        results = ordered_map(lambda job: job(), jobs, threads)

        total_grads = SceneGradients.zeros(scene.n)
        objective = 0.0
        recon_mean = 0.0
        cross_value = 0.0
        for k, res in enumerate(results):
            if pair is not None and k == len(results) - 1:
                cross_value, grads = res
                objective += lcfg.lambda_cross * cross_value
            else:
                sail_total, recon, grads = res
                objective += sail_total / batch
                recon_mean += recon / batch
            total_grads.add_(grads)

        if not math.isfinite(objective):
            ckpt = None
            if out_path is not None:
                ckpt = out_path / "abort.stz"
                save_scene(ckpt, last_good)
                write_log_csv(out_path / "log.csv", rows)
            logger.error("non-finite loss at iteration %d; aborting", it)
            raise TrainingAborted(
                f"non-finite loss at iteration {it}", scene=last_good, checkpoint=ckpt
            )

        adam_step(scene, total_grads, state, cfg.group_lrs(it), cfg.beta1, cfg.beta2, cfg.eps)
        _project_parameters(scene)

        if cfg.prune_interval and it % cfg.prune_interval == 0:
            sigma0 = 1.0 / (1.0 + np.exp(-scene.opacity_logit.ravel()))
            keep = sigma0 >= cfg.prune_opacity
            if not np.all(keep):
                dropped = int(keep.size - np.count_nonzero(keep))
                scene = scene.select(keep)
                state = state.select(keep)
                logger.info("iteration %d: pruned %d Gaussians (%d left)", it, dropped, scene.n)

        if cfg.probe_interval and (it % cfg.probe_interval == 0 or it == cfg.iterations):
            probe_value = _probe_psnr(scene, probe)

        rows.append(
            {
                "iteration": it,
                "loss": objective,
                "recon": recon_mean,
                "cross": cross_value,
                "probe_psnr": probe_value,
                "n_gaussians": scene.n,
            }
        )
        last_good = scene.copy()

        if (
            out_path is not None
            and cfg.checkpoint_interval
            and it % cfg.checkpoint_interval == 0
        ):
            save_scene(out_path / f"ckpt_{it:06d}.stz", scene)

    final_path = None
    if out_path is not None:
        final_path = out_path / "final.stz"
        save_scene(final_path, scene)
        write_log_csv(out_path / "log.csv", rows)
    return TrainResult(scene=scene, log=rows, checkpoint=final_path)

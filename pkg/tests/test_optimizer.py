"""Optimizer: Adam oracle, lr groups, sampling, pruning, training loop."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from stitch4d import optimizer as opt
from stitch4d.data import KIND_BRIDGE, KIND_REAL
from stitch4d.geometry import PinholeCamera, PoseSE3
from stitch4d.images import quantize
from stitch4d.losses import LossConfig
from stitch4d.renderer import render
from stitch4d.scene import GaussianScene, SceneGradients, load_scene


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_matches_hand_computation():
    # minimize x^2 for the first mu0 coordinate; oracle is an explicit
    # scalar Adam transcription
    scene = GaussianScene.empty(1)
    scene.mu0[0, 0] = 1.0
    state = opt.AdamState.zeros(scene)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-15

    x, m, v = 1.0, 0.0, 0.0
    for step in range(1, 4):
        grads = SceneGradients.zeros(1)
        grads.mu0[0, 0] = 2.0 * scene.mu0[0, 0]
        opt.adam_step(scene, grads, state, lr, b1, b2, eps)

        g = 2.0 * x
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        x = x - lr * (m / (1.0 - b1**step)) / (math.sqrt(v / (1.0 - b2**step)) + eps)
        assert scene.mu0[0, 0] == pytest.approx(x, rel=1e-14)
    assert state.step == 3
    # untouched blocks stay zero
    np.testing.assert_array_equal(scene.vel, 0.0)
    np.testing.assert_array_equal(scene.color0, 0.0)


def test_adam_rejects_non_finite_gradients():
    scene = GaussianScene.empty(2)
    grads = SceneGradients.zeros(2)
    grads.log_scale[1, 0] = math.nan
    with pytest.raises(ValueError, match="log_scale"):
        opt.adam_step(scene, grads, opt.AdamState.zeros(scene), 0.01)


def test_adam_state_select():
    scene = GaussianScene.empty(3)
    state = opt.AdamState.zeros(scene)
    state.m["mu0"][:] = [[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]
    state.step = 7
    kept = state.select(np.array([True, False, True]))
    np.testing.assert_array_equal(kept.m["mu0"][:, 0], [1.0, 3.0])
    assert kept.step == 7
    assert kept.v["opacity_logit"].shape == (2,)


def test_project_parameters():
    scene = GaussianScene.empty(2)
    q_unit = scene.rot0[0].copy()
    scene.rot0[1] = [2.0, 0.0, 0.0, 0.0]
    scene.log_scale[0, 0] = 50.0      # above the representable range
    opt._project_parameters(scene)
    np.testing.assert_array_equal(scene.rot0[0], q_unit)  # bit-identical
    np.testing.assert_allclose(scene.rot0[1], [1.0, 0.0, 0.0, 0.0])
    assert scene.log_scale[0, 0] == math.log(1e3)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_optim_config_defaults_and_groups():
    cfg = opt.OptimConfig()
    assert (cfg.lr_feature, cfg.lr_opacity, cfg.lr_scaling) == (0.001, 0.05, 0.005)
    assert (cfg.lr_rotation, cfg.lr_position) == (0.001, 1.6e-4)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-15)
    assert cfg.batch == 4 and cfg.prune_interval == 500
    assert cfg.prune_opacity == 0.005
    assert cfg.bridge_weight == 1.0 and cfg.pair_prob == 0.5
    groups = dict(opt.OPTIMIZED_FIELDS)
    assert groups["mu0"] == groups["vel"] == groups["acc"] == "position"
    assert groups["rot0"] == groups["ang_vel"] == "rotation"
    assert groups["log_scale"] == "scaling"
    assert groups["opacity_logit"] == groups["s_t"] == "opacity"
    assert groups["color0"] == groups["color_rate"] == "feature"
    assert "t_center" not in groups


def test_position_lr_decays_hundredfold():
    cfg = opt.OptimConfig(iterations=100)
    assert cfg.group_lrs(0)["position"] == cfg.lr_position
    assert cfg.group_lrs(100)["position"] == cfg.lr_position * 0.01
    mid = cfg.group_lrs(50)["position"]
    assert cfg.lr_position * 0.01 < mid < cfg.lr_position
    for it in (0, 50, 100):
        lrs = cfg.group_lrs(it)
        assert lrs["feature"] == cfg.lr_feature
        assert lrs["opacity"] == cfg.lr_opacity
        assert lrs["scaling"] == cfg.lr_scaling
        assert lrs["rotation"] == cfg.lr_rotation


def test_optim_config_json_roundtrip():
    cfg = opt.OptimConfig(iterations=123, bridge_weight=2.0)
    back = opt.OptimConfig.from_json(cfg.to_json())
    assert back == cfg
    with pytest.raises(ValueError, match="unknown"):
        opt.OptimConfig.from_json({"iterations": 5, "warp_speed": 9})


def test_optim_config_validation():
    with pytest.raises(ValueError):
        opt.OptimConfig(lr_position=0.0)
    with pytest.raises(ValueError):
        opt.OptimConfig(beta1=1.0)
    with pytest.raises(ValueError):
        opt.OptimConfig(batch=0)
    with pytest.raises(ValueError):
        opt.OptimConfig(pair_prob=1.5)
    with pytest.raises(ValueError):
        opt.OptimConfig(bridge_weight=-0.1)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

def _stub_sample(sid, location, kind=KIND_REAL, delta=0.0, t=0.0):
    return opt.TrainSample(
        sample_id=sid, source_kind=kind, location=location, camera=None,
        t=t, delta=delta, image=np.full((2, 2, 3), 100, np.uint8),
    )


def _mixed_samples():
    real = [_stub_sample(i, location=0, delta=5.0) for i in range(8)]
    bridge = [_stub_sample(10 + i, location=1000 + i % 2, kind=KIND_BRIDGE,
                           delta=1.0) for i in range(4)]
    return real + bridge


def test_sampler_bridge_weighting():
    samples = _mixed_samples()
    cfg = opt.OptimConfig(batch=4, bridge_weight=3.0, pair_prob=0.0)
    sampler = opt.BatchSampler(samples, cfg, tau=1.0)
    rng = np.random.default_rng(0)
    draws = np.concatenate([sampler.draw(rng)[0] for _ in range(4000)])
    frac_bridge = np.mean(draws >= 8)
    # p = 4*3 / (8 + 4*3) = 0.6
    assert abs(frac_bridge - 0.6) < 0.02


def test_sampler_pair_rate_and_membership():
    samples = _mixed_samples()
    cfg = opt.OptimConfig(batch=2, pair_prob=0.5)
    sampler = opt.BatchSampler(samples, cfg, tau=1.0)  # only bridges eligible
    rng = np.random.default_rng(1)
    n_pairs = 0
    for _ in range(4000):
        _, pair = sampler.draw(rng)
        if pair is None:
            continue
        n_pairs += 1
        a, b = samples[pair[0]], samples[pair[1]]
        assert a.location != b.location
        assert a.t == b.t
        assert a.delta <= 2.0 and b.delta <= 2.0
    assert abs(n_pairs / 4000 - 0.5) < 0.025


def test_sampler_no_eligible_pairs():
    samples = _mixed_samples()
    cfg = opt.OptimConfig(pair_prob=1.0)
    sampler = opt.BatchSampler(samples, cfg, tau=0.1)  # 2*tau below every delta
    rng = np.random.default_rng(2)
    assert all(sampler.draw(rng)[1] is None for _ in range(50))


def test_sampler_rejects_empty():
    with pytest.raises(ValueError):
        opt.BatchSampler([], opt.OptimConfig(), tau=0.1)


def test_sample_batch_oneoff():
    idx, pair = opt.sample_batch(_mixed_samples(), np.random.default_rng(0),
                                 opt.OptimConfig(batch=3, pair_prob=0.0), tau=0.1)
    assert len(idx) == 3 and pair is None


# ---------------------------------------------------------------------------
# Training loop on a micro task
# ---------------------------------------------------------------------------

RES = 12


def _micro_teacher():
    scene = GaussianScene.empty(4, t_domain=(0.0, 1.0),
                                background=np.array([0.1, 0.1, 0.1]))
    xs = np.linspace(-0.8, 0.8, 4)
    scene.mu0[:] = np.stack([xs, np.zeros(4), np.full(4, 2.0)], axis=1)
    scene.log_scale[:] = math.log(0.35)
    scene.opacity_logit[:] = 2.0
    scene.color0[:] = [[0.9, 0.2, 0.1], [0.2, 0.9, 0.1],
                       [0.1, 0.2, 0.9], [0.8, 0.8, 0.2]]
    return scene


def _micro_samples(teacher, n_views=4):
    samples = []
    for i in range(n_views):
        cam = PinholeCamera(
            RES, RES, math.pi / 2, math.pi / 2,
            pose=PoseSE3(position=np.array([-0.3 + 0.2 * i, 0.0, 0.0])),
        )
        img = quantize(render(teacher, cam, 0.0).rgb)
        samples.append(opt.TrainSample(
            sample_id=i, source_kind=KIND_REAL, location=i % 2, camera=cam,
            t=0.0, delta=0.0, image=img,
        ))
    return samples


def _perturbed(teacher):
    init = teacher.copy()
    init.color0[:] = 0.5
    init.mu0 += 0.05
    return init


def test_train_zero_iterations_is_identity(tmp_path):
    teacher = _micro_teacher()
    samples = _micro_samples(teacher)
    res = opt.train(teacher, samples, opt.OptimConfig(iterations=0),
                    LossConfig(), out_dir=tmp_path)
    np.testing.assert_array_equal(res.scene.to_flat(), teacher.to_flat())
    assert res.log == []
    assert res.checkpoint == tmp_path / "final.stz"
    assert res.checkpoint.is_file()


def test_train_rejects_empty_samples():
    with pytest.raises(ValueError, match="empty"):
        opt.train(_micro_teacher(), [], opt.OptimConfig(iterations=1))


def test_fully_masked_sample_changes_nothing():
    teacher = _micro_teacher()
    sample = _micro_samples(teacher, n_views=1)[0]
    masked = opt.TrainSample(
        sample_id=0, source_kind=KIND_BRIDGE, location=1000,
        camera=sample.camera, t=0.0, delta=0.0, image=sample.image,
        mask=np.zeros((RES, RES), np.uint8),
    )
    res = opt.train(teacher, [masked],
                    opt.OptimConfig(iterations=3, batch=2, pair_prob=0.0),
                    LossConfig())
    np.testing.assert_array_equal(res.scene.to_flat(), teacher.to_flat())


def test_train_is_thread_count_invariant():
    teacher = _micro_teacher()
    samples = _micro_samples(teacher)
    init = _perturbed(teacher)
    cfg = opt.OptimConfig(iterations=25, pair_prob=0.5, probe_interval=0)
    lcfg = LossConfig()
    a = opt.train(init, samples, cfg, lcfg, seed=3, threads=1)
    b = opt.train(init, samples, cfg, lcfg, seed=3, threads=4)
    np.testing.assert_array_equal(a.scene.to_flat(), b.scene.to_flat())
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]


def test_train_descends_and_logs(tmp_path):
    teacher = _micro_teacher()
    samples = _micro_samples(teacher)
    init = _perturbed(teacher)
    cfg = opt.OptimConfig(iterations=400, probe_interval=100,
                          checkpoint_interval=200, prune_interval=0)
    res = opt.train(init, samples, cfg, LossConfig(), seed=0,
                    out_dir=tmp_path, probe=samples[0])
    assert len(res.log) == 400
    assert list(res.log[0]) == list(opt.LOG_FIELDS)
    losses = [r["loss"] for r in res.log]
    assert np.mean(losses[200:]) < np.mean(losses[:200])
    assert res.log[-1]["probe_psnr"] > res.log[0]["probe_psnr"]
    # artifacts
    assert (tmp_path / "ckpt_000200.stz").is_file()
    assert (tmp_path / "ckpt_000400.stz").is_file()
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == ",".join(opt.LOG_FIELDS)
    reloaded = load_scene(tmp_path / "final.stz")
    np.testing.assert_array_equal(reloaded.to_flat(), res.scene.to_flat())


def test_train_prunes_transparent_gaussians():
    teacher = _micro_teacher()
    samples = _micro_samples(teacher)
    init = teacher.copy()
    init.opacity_logit[1] = -8.0   # sigma ~ 3e-4, below the 0.005 threshold
    cfg = opt.OptimConfig(iterations=2, prune_interval=1, probe_interval=0)
    res = opt.train(init, samples, cfg, LossConfig(), seed=0)
    assert res.scene.n == 3
    # survivors keep base opacity above the threshold
    sigma0 = 1.0 / (1.0 + np.exp(-res.scene.opacity_logit))
    assert np.all(sigma0 >= cfg.prune_opacity)
    assert res.log[-1]["n_gaussians"] == 3


def test_train_aborts_on_non_finite_loss(tmp_path, monkeypatch):
    teacher = _micro_teacher()
    samples = _micro_samples(teacher)

    def bad_sail(rendered, target, delta, cfg, masks=None, log_scales=None):
        return SimpleNamespace(total=math.nan, recon=0.0,
                               grad_images=[np.zeros((RES, RES, 3))],
                               grad_log_scale=None)

    monkeypatch.setattr(opt, "sail_loss", bad_sail)
    cfg = opt.OptimConfig(iterations=5, pair_prob=0.0, probe_interval=0)
    with pytest.raises(opt.TrainingAborted, match="iteration 1") as exc_info:
        opt.train(teacher, samples, cfg, LossConfig(), seed=0, out_dir=tmp_path)
    exc = exc_info.value
    np.testing.assert_array_equal(exc.scene.to_flat(), teacher.to_flat())
    assert exc.checkpoint == tmp_path / "abort.stz"
    rescued = load_scene(exc.checkpoint)
    np.testing.assert_array_equal(rescued.to_flat(), teacher.to_flat())
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(opt.LOG_FIELDS)


# ---------------------------------------------------------------------------
# Train-set assembly and cold init (on the session capture)
# ---------------------------------------------------------------------------

def test_build_train_set_counts_and_deltas(tiny_dataset):
    samples = opt.build_train_set(tiny_dataset, include_bridge=True)
    n_real = sum(1 for s in samples if s.source_kind == KIND_REAL)
    n_bridge = len(samples) - n_real
    assert n_real == 2400
    assert n_bridge == 2 * 10 * 6   # k=2 positions x 10 frames x 6 faces
    # real cameras sit at the captures (x = +-5): boundary distance 5
    for s in samples[:3]:
        assert s.delta == pytest.approx(5.0)
        assert s.mask is None
    bridge = [s for s in samples if s.source_kind == KIND_BRIDGE]
    assert {s.location for s in bridge} == {1000, 1001}
    for s in bridge[:6]:
        assert s.delta < 5.0
        assert s.mask is not None


def test_build_train_set_location_filter(tiny_dataset):
    only0 = opt.build_train_set(tiny_dataset, include_bridge=False, locations=[0])
    assert len(only0) == 1200
    assert {s.location for s in only0} == {0}
    # seam geometry unchanged by the filter: deltas still measured to both
    assert only0[0].delta == pytest.approx(5.0)


def test_cold_init_structure(tiny_dataset):
    scene = opt.cold_init(tiny_dataset, stride=8)
    # at most 2 locations x 6 faces x (16/8)^2 pixels; stride pixels that
    # hit empty background carry no depth and are skipped
    assert 0 < scene.n <= 2 * 6 * 4
    np.testing.assert_array_equal(scene.vel, 0.0)
    np.testing.assert_array_equal(scene.acc, 0.0)
    assert scene.t_domain == (0.0, 1.0)
    loc0 = opt.cold_init(tiny_dataset, stride=8, locations=[0])
    loc1 = opt.cold_init(tiny_dataset, stride=8, locations=[1])
    assert loc0.n + loc1.n == scene.n
    np.testing.assert_array_equal(
        np.concatenate([loc0.to_flat(), loc1.to_flat()]), scene.to_flat())

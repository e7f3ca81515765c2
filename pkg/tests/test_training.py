from __future__ import annotations

import math

import numpy as np
import pytest

from storyforge import autodiff as ad
from storyforge.dit import ModelConfig, NoiseSchedule, ToyDiT, add_noise, make_adapter_params
from storyforge.lora import plan_lora_placement
from storyforge.regions import LatentGrid, build_region_map
from storyforge.training import (
    AnchorOutOfRange,
    DebiasConfig,
    EmptyTrainingSet,
    MotionPriorResult,
    ShapeMismatch,
    TrainConfig,
    debias,
    loss_ad,
    loss_motion,
    loss_org,
    single_condition_plan,
    train_motion_prior,
    train_subject_prior,
    write_training_log,
)

from helpers import moving_square_clip

TRAIN_MODEL = ModelConfig(d_model=16, n_blocks=2, n_heads=2, grid=LatentGrid(3, 2, 2),
                          d_latent=2, ffn_mult=2, max_seg_len=6, hash_vocab=256, seed=1)


# ---------------------------------------------------------------------------
# loss_org
# ---------------------------------------------------------------------------


def test_loss_org_perfect_prediction():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert loss_org(x, x) == 0.0


def test_loss_org_forced_arithmetic():
    assert loss_org(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 0.5
    assert loss_org(np.array([1.0, 0.0]), np.array([0.0, 0.0]), "sum") == 1.0


def test_loss_org_matches_element_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    total = 0.0
    for i in range(2):
        for j in range(3):
            total += (a[i, j] - b[i, j]) ** 2
    assert loss_org(a, b, "sum") == pytest.approx(total, abs=1e-12)
    assert loss_org(a, b, "mean") == pytest.approx(total / 6, abs=1e-12)


def test_loss_org_shape_check():
    with pytest.raises(ShapeMismatch):
        loss_org(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# debias
# ---------------------------------------------------------------------------


def test_debias_beta_zero_is_identity():
    x = np.random.default_rng(2).standard_normal((4, 5))
    np.testing.assert_array_equal(debias(x, DebiasConfig(beta=0.0)), x)


def test_debias_anchor_frame_value():
    cfg = DebiasConfig(beta=2.0, anchor_index=1)
    x = np.random.default_rng(3).standard_normal((3, 2))
    out = debias(x, cfg)
    expected_anchor = (math.sqrt(5.0) - 2.0) * x[1]
    np.testing.assert_allclose(out[1], expected_anchor, atol=1e-12)


def test_debias_hand_computed():
    # beta=1, frames [1, 3], anchor 0 -> [sqrt(2)*1 - 1, sqrt(2)*3 - 1]
    out = debias(np.array([[1.0], [3.0]]), DebiasConfig(beta=1.0, anchor_index=0))
    np.testing.assert_allclose(
        out, [[math.sqrt(2) - 1.0], [3 * math.sqrt(2) - 1.0]], atol=1e-12)


def test_debias_anchor_range():
    with pytest.raises(AnchorOutOfRange):
        debias(np.zeros((2, 2)), DebiasConfig(anchor_index=2))


# ---------------------------------------------------------------------------
# loss_ad / loss_motion
# ---------------------------------------------------------------------------


def test_loss_ad_zero_for_equal_inputs():
    x = np.random.default_rng(4).standard_normal((3, 4))
    assert loss_ad(x, x, DebiasConfig()) == 0.0


def test_loss_ad_beta_zero_equals_loss_org():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cfg = DebiasConfig(beta=0.0)
    assert abs(loss_ad(a, b, cfg) - loss_org(a, b)) <= 1e-12


def test_loss_ad_matches_naive_recomputation():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    cfg = DebiasConfig(beta=1.0, anchor_index=2)
    gain = math.sqrt(2.0)
    total = 0.0
    for f in range(4):
        for j in range(3):
            da = gain * a[f, j] - 1.0 * a[2, j]
            db = gain * b[f, j] - 1.0 * b[2, j]
            total += (da - db) ** 2
    assert loss_ad(a, b, cfg, "sum") == pytest.approx(total, abs=1e-10)


def test_loss_ad_shared_anchor_mode():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    cfg = DebiasConfig(beta=1.0, shared_anchor=True)
    gain = math.sqrt(2.0)
    expected = np.mean((gain * a - a[0] - (gain * b - a[0])) ** 2)
    assert loss_ad(a, b, cfg) == pytest.approx(expected, abs=1e-12)
    # with a shared anchor the debias offsets cancel entirely
    assert loss_ad(a, b, cfg) == pytest.approx(gain**2 * loss_org(a, b), abs=1e-12)


def test_loss_motion_composition():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cfg = DebiasConfig(beta=0.7)
    assert loss_motion(a, b, cfg) == loss_org(a, b) + loss_ad(a, b, cfg)
    assert loss_motion(a, a, cfg) == 0.0
    disabled = DebiasConfig(enabled=False)
    assert loss_motion(a, b, disabled) == loss_org(a, b)


def test_tape_losses_agree_with_array_losses():
    from storyforge.training import _motion_loss_tape

    rng = np.random.default_rng(9)
    frames, rows, d = 3, 4, 2
    eps = rng.standard_normal((frames * rows, d))
    eps_hat = rng.standard_normal((frames * rows, d))
    cfg = TrainConfig(debias=DebiasConfig(beta=0.9, anchor_index=1))
    total, org_val, ad_val = _motion_loss_tape(
        eps, ad.parameter(eps_hat), cfg, rows, frames)
    assert org_val == pytest.approx(loss_org(eps, eps_hat), abs=1e-12)
    expected_ad = loss_ad(eps.reshape(frames, -1), eps_hat.reshape(frames, -1),
                          cfg.debias)
    assert ad_val == pytest.approx(expected_ad, abs=1e-12)
    assert float(total.data) == pytest.approx(org_val + ad_val, abs=1e-12)


# ---------------------------------------------------------------------------
# Motion prior training
# ---------------------------------------------------------------------------


def _clips(grid, d_latent, n=2):
    captions = ["square sliding right slowly", "square sliding right quickly",
                "square drifting left", "square bouncing around"]
    return [(moving_square_clip(grid, d_latent, start_col=i, speed=1 + i % 2),
             captions[i]) for i in range(n)]


def test_zero_steps_returns_neutral_adapters():
    model = ToyDiT(TRAIN_MODEL)
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    cfg = TrainConfig(steps=0, seed=0)
    result = train_motion_prior(_clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent),
                                model, placement, cfg)
    for entry in result.temporal.entries + [e for s in result.per_video
                                            for e in s.entries]:
        assert not entry.lora.up.any()
    assert result.log == []


def test_backbone_frozen_during_training():
    model = ToyDiT(TRAIN_MODEL)
    before = model.backbone_hash()
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    cfg = TrainConfig(steps=3, seed=0, learning_rate=0.01)
    train_motion_prior(_clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent),
                       model, placement, cfg)
    assert model.backbone_hash() == before


def test_adapter_roles_and_kinds():
    model = ToyDiT(TRAIN_MODEL)
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    result = train_motion_prior(_clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent),
                                model, placement, TrainConfig(steps=0))
    assert {e.lora.kind for e in result.temporal.entries} == {"motion_temporal"}
    assert {e.block for e in result.temporal.entries} == {1}
    assert len(result.per_video) == 2
    for aset in result.per_video:
        assert {e.lora.kind for e in aset.entries} == {"motion_spatial_pervideo"}
        assert {e.block for e in aset.entries} == {0}
    assert len(result.inference_adapters()) == len(result.temporal)


def test_loss_trace_deterministic_across_reruns():
    traces = []
    for _ in range(2):
        model = ToyDiT(TRAIN_MODEL)
        placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
        cfg = TrainConfig(steps=4, seed=7, learning_rate=0.02)
        result = train_motion_prior(_clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent),
                                    model, placement, cfg)
        traces.append(result.log)
    assert traces[0] == traces[1]


def test_prompt_modes_only_change_text():
    model = ToyDiT(TRAIN_MODEL)
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    clips = _clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent)
    shapes = []
    for mode in ("per_video", "single"):
        cfg = TrainConfig(steps=0, prompt_mode=mode, single_prompt="a moving square")
        result = train_motion_prior(clips, model, placement, cfg)
        shapes.append([
            (e.block, e.site, e.lora.down.shape, e.lora.up.shape)
            for s in [result.temporal, *result.per_video] for e in s.entries
        ])
    assert shapes[0] == shapes[1]


def test_training_reduces_fixed_noise_loss():
    model = ToyDiT(TRAIN_MODEL)
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    cfg = TrainConfig(steps=40, seed=3, learning_rate=0.1, resample_noise=False)
    result = train_motion_prior(_clips(TRAIN_MODEL.grid, TRAIN_MODEL.d_latent),
                                model, placement, cfg, schedule=NoiseSchedule(20))
    assert result.log[-1]["loss_motion"] < result.log[0]["loss_motion"]


def test_empty_training_set():
    model = ToyDiT(TRAIN_MODEL)
    with pytest.raises(EmptyTrainingSet):
        train_motion_prior([], model, plan_lora_placement(2), TrainConfig())


def test_training_log_jsonl(tmp_path):
    path = tmp_path / "log.jsonl"
    write_training_log([{"step": 0, "loss_org": 1.0, "loss_ad": 0.5,
                         "loss_motion": 1.5}], path)
    import json

    line = path.read_text().strip()
    assert json.loads(line) == {"step": 0, "loss_org": 1.0, "loss_ad": 0.5,
                                "loss_motion": 1.5}


# ---------------------------------------------------------------------------
# Subject prior training
# ---------------------------------------------------------------------------


def test_subject_prior_requires_first_frame_flag():
    model = ToyDiT(TRAIN_MODEL)
    ref = np.zeros((TRAIN_MODEL.grid.tokens_per_frame, TRAIN_MODEL.d_latent))
    with pytest.raises(ValueError):
        train_subject_prior(ref, model, plan_lora_placement(2), TrainConfig())


def test_subject_prior_neutral_at_zero_steps():
    model = ToyDiT(TRAIN_MODEL)
    ref = np.ones((TRAIN_MODEL.grid.tokens_per_frame, TRAIN_MODEL.d_latent))
    cfg = TrainConfig(steps=0, first_frame_only=True)
    result = train_subject_prior(ref, model, plan_lora_placement(2), cfg)
    assert {e.lora.kind for e in result.adapters.entries} == {"subject"}
    assert {e.lora.role for e in result.adapters.entries} == {"spatial"}
    for entry in result.adapters.entries:
        assert not entry.lora.up.any()


def test_first_frame_loss_gradient_zero_on_later_frames():
    # the restricted loss must not touch predictions at latent frames >= 1
    model = ToyDiT(TRAIN_MODEL)
    grid = TRAIN_MODEL.grid
    rng = np.random.default_rng(11)
    placement = plan_lora_placement(TRAIN_MODEL.n_blocks)
    cfg = TrainConfig(steps=0, first_frame_only=True, seed=0)
    result = train_subject_prior(
        np.ones((grid.tokens_per_frame, TRAIN_MODEL.d_latent)), model, placement, cfg)
    adapters = result.adapters
    for entry in adapters.entries:  # non-zero so the output depends on them
        entry.lora.up = rng.standard_normal(entry.lora.up.shape) * 0.1
    params = make_adapter_params(adapters)
    plan = single_condition_plan("the subject on a neutral backdrop", grid.t_lat)
    cond = model.prepare(plan, build_region_map(plan, grid), "sr3a")
    z0 = np.tile(np.ones((grid.tokens_per_frame, TRAIN_MODEL.d_latent)),
                 (grid.t_lat, 1))
    epsilon = rng.standard_normal(z0.shape)
    z_t = add_noise(z0, 5, epsilon, NoiseSchedule(10))
    eps_hat = model.forward(cond, adapters, z_t, 5, adapter_params=params)
    rows = grid.tokens_per_frame
    diff = ad.constant(epsilon[:rows]) - ad.rows(eps_hat, 0, rows)
    ad.backward(ad.mean_all(diff * diff))
    assert eps_hat.grad is not None
    assert np.array_equal(eps_hat.grad[rows:], np.zeros_like(eps_hat.grad[rows:]))
    assert np.any(eps_hat.grad[:rows])


def test_subject_prior_loss_decreases():
    model = ToyDiT(TRAIN_MODEL)
    rng = np.random.default_rng(12)
    ref = rng.standard_normal((TRAIN_MODEL.grid.tokens_per_frame, TRAIN_MODEL.d_latent))
    cfg = TrainConfig(steps=50, first_frame_only=True, learning_rate=0.1,
                      resample_noise=False, seed=5)
    result = train_subject_prior(ref, model, plan_lora_placement(2), cfg,
                                 schedule=NoiseSchedule(20))
    assert result.log[-1]["loss_motion"] < 0.5 * result.log[0]["loss_motion"]

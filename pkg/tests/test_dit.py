from __future__ import annotations

import math

import numpy as np
import pytest

from storyforge import autodiff as ad
from storyforge.dit import (
    ModelConfig,
    NoiseSchedule,
    ShapeMismatch,
    TimestepOutOfRange,
    ToyDiT,
    add_noise,
    dit_forward,
    load_checkpoint,
    make_adapter_params,
    sample,
    save_checkpoint,
    tokenize,
)
from storyforge.lora import AdapterEntry, AdapterSet, init_lora
from storyforge.plan import BBox, Condition, LatentPlan, LatentRegion
from storyforge.regions import LatentGrid, build_region_map

from helpers import two_region_setup, uniform_plan

SMALL = ModelConfig(d_model=16, n_blocks=1, n_heads=2, grid=LatentGrid(2, 2, 4),
                    d_latent=3, ffn_mult=2, max_seg_len=8, hash_vocab=128, seed=3)


# ---------------------------------------------------------------------------
# Schedule and forward process
# ---------------------------------------------------------------------------


def test_schedule_shape_and_monotonicity():
    sched = NoiseSchedule(100)
    assert sched.alpha_bar.shape == (100,)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert 0.999 < sched.alpha_bar[0] <= 1.0


def test_add_noise_zero_epsilon():
    sched = NoiseSchedule(10)
    z0 = np.full((4, 2), 3.0)
    z5 = add_noise(z0, 5, np.zeros_like(z0), sched)
    np.testing.assert_array_equal(z5, np.sqrt(sched.alpha_bar[5]) * z0)


def test_add_noise_t0_close_to_z0():
    sched = NoiseSchedule(100)
    z0 = np.ones((3, 3))
    z = add_noise(z0, 0, np.zeros_like(z0), sched)
    assert np.abs(z - z0).max() < 1e-3


def test_add_noise_scalar_oracle():
    # z0=1, a_bar=0.25, eps=2 -> 0.5 + sqrt(0.75)*2, by hand
    sched = NoiseSchedule(1)
    sched.alpha_bar = np.array([0.25])
    z = add_noise(np.array([[1.0]]), 0, np.array([[2.0]]), sched)
    assert z[0, 0] == pytest.approx(0.5 + math.sqrt(0.75) * 2, abs=1e-15)


def test_add_noise_range_check():
    sched = NoiseSchedule(10)
    with pytest.raises(TimestepOutOfRange):
        add_noise(np.zeros((2, 2)), 10, np.zeros((2, 2)), sched)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def test_tokenize_deterministic_and_truncated():
    ids = tokenize("a cat sits on a mat", 64, 4)
    assert ids == tokenize("a cat sits on a mat", 64, 4)
    assert len(ids) == 4
    assert all(0 <= i < 64 for i in ids)
    assert ids[0] == ids[4 - 4]  # repeated word hashes identically
    with pytest.raises(ValueError):
        tokenize("   ", 64, 4)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _setup(config=SMALL, mode="sr3a"):
    model = ToyDiT(config)
    plan, rmap = two_region_setup(config.grid, "a red fish swimming left",
                                  "a blue crab walking right")
    cond = model.prepare(plan, rmap, mode)
    return model, plan, rmap, cond


def test_forward_output_shape():
    model, plan, rmap, cond = _setup()
    rng = np.random.default_rng(0)
    z_t = rng.standard_normal((SMALL.grid.tokens, SMALL.d_latent))
    out = model.forward(cond, None, z_t, 3)
    assert out.data.shape == (SMALL.grid.tokens, SMALL.d_latent)


def test_forward_shape_check():
    model, plan, rmap, cond = _setup()
    with pytest.raises(ShapeMismatch):
        model.forward(cond, None, np.zeros((3, SMALL.d_latent)), 0)


def test_zero_init_adapters_are_neutral():
    model, plan, rmap, cond = _setup(mode="dense")
    rng = np.random.default_rng(1)
    z_t = rng.standard_normal((SMALL.grid.tokens, SMALL.d_latent))
    adapters = AdapterSet()
    lora_rng = np.random.default_rng(9)
    for site in ("q", "k", "v", "ffn"):
        d, k = SMALL.site_dims(site)
        adapters.add(AdapterEntry(0, site, init_lora(d, k, 2, lora_rng), None))
    base = model.forward(cond, None, z_t, 5).data
    with_adapters = model.forward(cond, adapters, z_t, 5).data
    np.testing.assert_array_equal(base, with_adapters)


def test_masked_keys_get_exactly_zero_attention():
    model, plan, rmap, cond = _setup()
    rng = np.random.default_rng(2)
    z_t = rng.standard_normal((SMALL.grid.tokens, SMALL.d_latent))
    captured: list[np.ndarray] = []
    model.forward(cond, None, z_t, 1, capture_attention=captured)
    assert captured
    for weights in captured:
        assert np.array_equal(weights == 0.0, ~cond.mask_dense)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)


def test_caption_perturbation_isolated_to_its_region():
    # single block, disjoint regions: swapping one word of condition 2's
    # caption (same token count) leaves condition-1 tokens bit-identical
    config = SMALL
    model = ToyDiT(config)
    plan_a, rmap = two_region_setup(config.grid, "a red fish swimming left",
                                    "a blue crab walking right")
    plan_b, _ = two_region_setup(config.grid, "a red fish swimming left",
                                 "a blue crab dancing right")
    rng = np.random.default_rng(3)
    z_t = rng.standard_normal((config.grid.tokens, config.d_latent))
    out_a = dit_forward(model, plan_a, rmap, "sr3a", None, z_t, 4)
    out_b = dit_forward(model, plan_b, rmap, "sr3a", None, z_t, 4)
    region_one = [i for i, m in enumerate(rmap.membership) if m == {1}]
    region_two = [i for i, m in enumerate(rmap.membership) if m == {2}]
    assert region_one and region_two
    assert out_a[region_one].tobytes() == out_b[region_one].tobytes()
    assert not np.array_equal(out_a[region_two], out_b[region_two])


def test_condition_permutation_leaves_visual_output_unchanged():
    config = SMALL
    model = ToyDiT(config)
    box_left = BBox(0.0, 0.0, 0.5, 1.0)
    box_right = BBox(0.5, 0.0, 1.0, 1.0)
    spans = frozenset(range(config.grid.t_lat))

    def build(order):
        conditions = [Condition(0, "background", "none", "a sea floor", spans)]
        for i, (entity, caption, box) in enumerate(order, start=1):
            conditions.append(Condition(i, entity, "moving", caption, spans))
        frames = tuple(
            tuple(LatentRegion(i, item[2]) for i, item in enumerate(order, start=1))
            for _ in range(config.grid.t_lat)
        )
        return LatentPlan(conditions=tuple(conditions), latent_frames=frames)

    fish = ("fish", "a red fish swimming", box_left)
    crab = ("crab", "a blue crab walking sideways", box_right)
    plan_a = build([fish, crab])
    plan_b = build([crab, fish])
    rng = np.random.default_rng(4)
    z_t = rng.standard_normal((config.grid.tokens, config.d_latent))
    out_a = dit_forward(model, plan_a, build_region_map(plan_a, config.grid),
                        "sr3a", None, z_t, 2)
    out_b = dit_forward(model, plan_b, build_region_map(plan_b, config.grid),
                        "sr3a", None, z_t, 2)
    np.testing.assert_allclose(out_a, out_b, atol=1e-10)


def test_forward_determinism_across_instances():
    out = []
    for _ in range(2):
        model, plan, rmap, cond = _setup()
        z_t = np.random.default_rng(5).standard_normal(
            (SMALL.grid.tokens, SMALL.d_latent))
        out.append(model.forward(cond, None, z_t, 7).data)
    assert out[0].tobytes() == out[1].tobytes()


def test_seed_changes_initialization():
    a = ToyDiT(SMALL)
    b = ToyDiT(ModelConfig(**{**SMALL.__dict__, "seed": 4}))
    assert a.backbone_hash() != b.backbone_hash()
    assert a.backbone_hash() == ToyDiT(SMALL).backbone_hash()


# ---------------------------------------------------------------------------
# Adapter gradients through the model
# ---------------------------------------------------------------------------


def test_adapter_gradients_match_finite_differences():
    config = ModelConfig(d_model=8, n_blocks=2, n_heads=2, grid=LatentGrid(2, 2, 2),
                         d_latent=3, ffn_mult=2, max_seg_len=4, hash_vocab=64, seed=0)
    model = ToyDiT(config)
    plan = uniform_plan("a square drifting sideways", config.grid.t_lat)
    rmap = build_region_map(plan, config.grid)
    cond = model.prepare(plan, rmap, "sr3a")

    rng = np.random.default_rng(6)
    adapters = AdapterSet()
    for block in range(2):
        for site in ("q", "ffn"):
            d, k = config.site_dims(site)
            lora = init_lora(d, k, 1, rng)
            lora.up = rng.standard_normal(lora.up.shape) * 0.1
            adapters.add(AdapterEntry(block, site, lora, None))
    params = make_adapter_params(adapters)

    z_t = rng.standard_normal((config.grid.tokens, config.d_latent))
    target = rng.standard_normal((config.grid.tokens, config.d_latent))

    def loss_value():
        out = model.forward(cond, adapters, z_t, 3)
        return float(((out.data - target) ** 2).mean())

    for tensor in [t for pair in params.values() for t in pair]:
        tensor.zero_grad()
    out = model.forward(cond, adapters, z_t, 3, adapter_params=params)
    diff = out - ad.constant(target)
    ad.backward(ad.mean_all(diff * diff))

    step = 1e-5
    for idx, (down_t, up_t) in params.items():
        for tensor, raw in ((down_t, adapters.entries[idx].lora.down),
                            (up_t, adapters.entries[idx].lora.up)):
            flat = raw.reshape(-1)
            for j in range(0, flat.size, max(1, flat.size // 3)):
                original = flat[j]
                flat[j] = original + step
                up_val = loss_value()
                flat[j] = original - step
                down_val = loss_value()
                flat[j] = original
                numeric = (up_val - down_val) / (2 * step)
                analytic = tensor.grad.reshape(-1)[j]
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------
# Sampling and checkpoints
# ---------------------------------------------------------------------------


def test_sample_deterministic():
    model, plan, rmap, _ = _setup()
    sched = NoiseSchedule(5)
    a = sample(model, plan, rmap, sched, seed=11)
    b = sample(model, plan, rmap, sched, seed=11)
    assert a.tobytes() == b.tobytes()
    c = sample(model, plan, rmap, sched, seed=12)
    assert a.tobytes() != c.tobytes()


def test_sample_single_step_closed_form():
    model, plan, rmap, cond = _setup()
    sched = NoiseSchedule(1)
    seed = 21
    got = sample(model, plan, rmap, sched, seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((SMALL.grid.tokens, SMALL.d_latent))
    eps_hat = model.forward(cond, None, z, 0).data
    a_bar = sched.alpha_bar[0]
    expected = (z - np.sqrt(1 - a_bar) * eps_hat) / np.sqrt(sched.alphas[0])
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_checkpoint_round_trip():
    model = ToyDiT(SMALL)
    blob = save_checkpoint(model)
    loaded = load_checkpoint(blob)
    assert loaded.config == model.config
    assert save_checkpoint(loaded) == blob
    for name, tensor in model.params.items():
        np.testing.assert_allclose(loaded.params[name].data, tensor.data,
                                   atol=1e-6)


def test_sample_overfit_reproduces_training_clip():
    # oracle: the overfit training run itself (acceptance criterion 9 setup);
    # the schedule destroys the signal by its last step so sampling from pure
    # noise matches the training distribution
    from storyforge.lora import plan_lora_placement
    from storyforge.training import (
        TrainConfig,
        single_condition_plan,
        train_motion_prior,
    )
    from helpers import moving_square_clip

    grid = LatentGrid(4, 4, 4)
    config = ModelConfig(d_model=32, n_blocks=2, n_heads=4, grid=grid,
                         d_latent=4, ffn_mult=2, max_seg_len=8, hash_vocab=512,
                         seed=2)
    captions = ["square sliding right slowly", "square sliding right quickly",
                "square starting from the middle", "square wrapping past the edge"]
    clips = [(moving_square_clip(grid, 4, start_col=i, speed=1 + (i % 2)),
              captions[i]) for i in range(4)]
    schedule = NoiseSchedule(30, beta_end=0.15)
    assert schedule.alpha_bar[-1] < 0.1

    model = ToyDiT(config)
    cfg = TrainConfig(steps=800, seed=9, learning_rate=0.3, resample_noise=False)
    result = train_motion_prior(clips, model, plan_lora_placement(2), cfg,
                                schedule=schedule)
    assert result.log[-1]["loss_motion"] <= 0.10 * result.log[0]["loss_motion"]

    plan = single_condition_plan(captions[0], grid.t_lat)
    rmap = build_region_map(plan, grid)
    target = clips[0][0]
    baseline = sample(ToyDiT(config), plan, rmap, schedule, seed=33)
    base_mse = float(np.mean((baseline - target) ** 2))
    full_set = result.temporal.extend(result.per_video[0])
    tuned = sample(model, plan, rmap, schedule, seed=33, adapters=full_set,
                   inference_filter=False)
    tuned_mse = float(np.mean((tuned - target) ** 2))
    assert tuned_mse <= 0.10 * base_mse

    # the trained denoiser is also better at one-step recovery of the clip
    # from a noised input it never saw during the fixed-draw training
    t_mid = 15
    eps = np.random.default_rng(4).standard_normal(target.shape)
    z_t = add_noise(target, t_mid, eps, schedule)
    a_bar = schedule.alpha_bar[t_mid]

    def x0_mse(m, adapters):
        eps_hat = dit_forward(m, plan, rmap, "sr3a", adapters, z_t, t_mid)
        x0_hat = (z_t - np.sqrt(1 - a_bar) * eps_hat) / np.sqrt(a_bar)
        return float(np.mean((x0_hat - target) ** 2))

    assert x0_mse(model, full_set) < 0.6 * x0_mse(ToyDiT(config), None)

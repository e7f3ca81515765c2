"""Diffusion training losses and the motion/subject prior training loops.

The loss has two parts: a plain noise-reconstruction term over all frames,
and an appearance-debiased term computed after the per-frame transform
``phi(eps)_f = sqrt(beta^2 + 1) * eps_f - beta * eps_anchor``, which cancels
content shared with the anchor frame and emphasizes inter-frame motion.  The
combined motion loss is their unweighted sum.

Training updates only low-rank adapter parameters; the backbone stays
frozen.  Motion priors train shared temporal adapters plus one throwaway set
of spatial adapters per clip; subject priors train spatial adapters on a
repeated reference image with the loss restricted to the first latent frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dit import NoiseSchedule, ToyDiT, TrainBatch, add_noise, make_adapter_params
from .lora import LORA_SITES, AdapterEntry, AdapterSet, PlacementPlan, init_lora
from .plan import Condition, LatentPlan
from .regions import build_region_map

__all__ = [
    "DebiasConfig",
    "TrainConfig",
    "MotionPriorResult",
    "SubjectPriorResult",
    "ShapeMismatch",
    "AnchorOutOfRange",
    "EmptyTrainingSet",
    "loss_org",
    "debias",
    "loss_ad",
    "loss_motion",
    "train_motion_prior",
    "train_subject_prior",
    "single_condition_plan",
    "write_training_log",
]


class ShapeMismatch(ValueError):
    pass


class AnchorOutOfRange(IndexError):
    pass


class EmptyTrainingSet(ValueError):
    pass


@dataclass(frozen=True)
class DebiasConfig:
    """Appearance-debias transform settings.

    ``beta`` scales the debiasing strength; ``anchor_index`` picks the anchor
    frame; ``enabled`` turns the debiased loss term on or off entirely.  With
    ``shared_anchor`` the prediction side reuses the target's anchor frame
    instead of its own.
    """

    beta: float = 1.0
    anchor_index: int = 0
    enabled: bool = True
    shared_anchor: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    steps: int = 200
    seed: int = 0
    prompt_mode: str = "per_video"  # or "single"
    loss_reduction: str = "mean"    # or "sum"
    debias: DebiasConfig = field(default_factory=DebiasConfig)
    first_frame_only: bool = False
    lora_rank: int = 4
    lora_scale: float = 1.0
    lora_init_std: float = 0.02
    single_prompt: str | None = None
    resample_noise: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.prompt_mode not in ("per_video", "single"):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")


# ---------------------------------------------------------------------------
# Losses (array API)
# ---------------------------------------------------------------------------


def _reduce(squares: np.ndarray, reduction: str) -> float:
    return float(squares.mean() if reduction == "mean" else squares.sum())


def loss_org(epsilon: np.ndarray, epsilon_hat: np.ndarray,
             reduction: str = "mean") -> float:
    """Squared error between target and predicted noise."""
    epsilon = np.asarray(epsilon)
    epsilon_hat = np.asarray(epsilon_hat)
    if epsilon.shape != epsilon_hat.shape:
        raise ShapeMismatch(f"{epsilon.shape} vs {epsilon_hat.shape}")
    return _reduce((epsilon - epsilon_hat) ** 2, reduction)


def debias(eps: np.ndarray, cfg: DebiasConfig) -> np.ndarray:
    """Apply the appearance-debias transform along the leading frame axis.

    Every frame, including the anchor itself, maps to
    ``sqrt(beta^2 + 1) * eps_f - beta * eps_anchor``.
    """
    eps = np.asarray(eps)
    if eps.ndim < 1:
        raise ShapeMismatch("expected a leading frame axis")
    if not 0 <= cfg.anchor_index < eps.shape[0]:
        raise AnchorOutOfRange(
            f"anchor {cfg.anchor_index} outside {eps.shape[0]} frames")
    gain = np.sqrt(cfg.beta**2 + 1.0)
    return gain * eps - cfg.beta * eps[cfg.anchor_index][None, ...]


def loss_ad(epsilon: np.ndarray, epsilon_hat: np.ndarray, cfg: DebiasConfig,
            reduction: str = "mean") -> float:
    """Squared error between the debiased target and debiased prediction.

    Each side is debiased against its own anchor frame unless
    ``cfg.shared_anchor`` reuses the target's anchor for both.
    """
    epsilon = np.asarray(epsilon)
    epsilon_hat = np.asarray(epsilon_hat)
    if epsilon.shape != epsilon_hat.shape:
        raise ShapeMismatch(f"{epsilon.shape} vs {epsilon_hat.shape}")
    target = debias(epsilon, cfg)
    if cfg.shared_anchor:
        gain = np.sqrt(cfg.beta**2 + 1.0)
        predicted = gain * epsilon_hat - cfg.beta * epsilon[cfg.anchor_index][None, ...]
    else:
        predicted = debias(epsilon_hat, cfg)
    return _reduce((target - predicted) ** 2, reduction)


def loss_motion(epsilon: np.ndarray, epsilon_hat: np.ndarray, cfg: DebiasConfig,
                reduction: str = "mean") -> float:
    """Unweighted sum of the reconstruction and debiased terms."""
    total = loss_org(epsilon, epsilon_hat, reduction)
    if cfg.enabled:
        total += loss_ad(epsilon, epsilon_hat, cfg, reduction)
    return total


# ---------------------------------------------------------------------------
# Losses (tape API, used inside the training loops)
# ---------------------------------------------------------------------------


def _reduce_tape(squares: ad.Tensor, reduction: str) -> ad.Tensor:
    return ad.mean_all(squares) if reduction == "mean" else ad.sum_all(squares)


def _debias_tape(eps: ad.Tensor, cfg: DebiasConfig, frame_rows: int,
                 n_frames: int, anchor_override: np.ndarray | None = None) -> ad.Tensor:
    gain = float(np.sqrt(cfg.beta**2 + 1.0))
    if anchor_override is not None:
        anchor = ad.constant(anchor_override)
    else:
        start = cfg.anchor_index * frame_rows
        anchor = ad.rows(eps, start, start + frame_rows)
    tiled = ad.concat_rows([anchor] * n_frames)
    return eps * gain - tiled * cfg.beta


def _motion_loss_tape(epsilon: np.ndarray, eps_hat: ad.Tensor, cfg: TrainConfig,
                      frame_rows: int, n_frames: int):
    """(loss tensor, org value, ad value) for one clip."""
    target = ad.constant(epsilon)
    diff = target - eps_hat
    org = _reduce_tape(diff * diff, cfg.loss_reduction)
    if not cfg.debias.enabled:
        return org, float(org.data), 0.0
    dc = cfg.debias
    start = dc.anchor_index * frame_rows
    target_debiased = ad.constant(debias(
        epsilon.reshape(n_frames, -1), dc).reshape(epsilon.shape))
    anchor_override = epsilon[start : start + frame_rows] if dc.shared_anchor else None
    pred_debiased = _debias_tape(eps_hat, dc, frame_rows, n_frames,
                                 anchor_override=anchor_override)
    ad_diff = target_debiased - pred_debiased
    ad_term = _reduce_tape(ad_diff * ad_diff, cfg.loss_reduction)
    total = org + ad_term
    return total, float(org.data), float(ad_term.data)


# ---------------------------------------------------------------------------
# Training plumbing
# ---------------------------------------------------------------------------


def single_condition_plan(caption: str, frame_count: int) -> LatentPlan:
    """A latent plan whose only condition is a whole-clip caption."""
    return LatentPlan(
        conditions=(Condition(0, "background", "none", caption,
                              frozenset(range(frame_count))),),
        latent_frames=tuple(() for _ in range(frame_count)),
    )


def _fresh_adapters(model: ToyDiT, blocks, rng, role: str, kind: str,
                    cfg: TrainConfig) -> AdapterSet:
    out = AdapterSet()
    for block in blocks:
        for site in LORA_SITES:
            d, k = model.config.site_dims(site)
            out.add(AdapterEntry(
                block=block, site=site,
                lora=init_lora(d, k, cfg.lora_rank, rng, scale=cfg.lora_scale,
                               role=role, kind=kind, init_std=cfg.lora_init_std),
                condition_id=None,
            ))
    return out


def _combined_params(sets_and_params: list[tuple[AdapterSet, dict]]):
    combined_set = AdapterSet()
    combined_params: dict = {}
    offset = 0
    for aset, params in sets_and_params:
        for i, entry in enumerate(aset.entries):
            combined_set.add(entry)
            combined_params[offset + i] = params[i]
        offset += len(aset.entries)
    return combined_set, combined_params


def _sgd_step(param_tensors, lr: float, batch: int) -> None:
    for tensor in param_tensors:
        if tensor.grad is not None:
            tensor.data -= lr * tensor.grad / batch
        tensor.zero_grad()


@dataclass
class MotionPriorResult:
    temporal: AdapterSet
    per_video: list[AdapterSet]
    log: list[dict]

    def inference_adapters(self) -> AdapterSet:
        """Only the shared temporal adapters survive to inference."""
        return self.temporal.inference_only()


@dataclass
class SubjectPriorResult:
    adapters: AdapterSet
    log: list[dict]


def train_motion_prior(clips, model: ToyDiT, placement: PlacementPlan,
                       cfg: TrainConfig, schedule: NoiseSchedule | None = None,
                       log_path: str | Path | None = None) -> MotionPriorResult:
    """Fit temporal adapters (shared) and per-clip spatial adapters.

    ``clips`` is a sequence of (clean latent (V x d_latent), caption) pairs.
    Each step accumulates gradients over every clip in order and applies one
    plain gradient-descent update; with ``cfg.resample_noise`` off, the
    timestep and noise are drawn once per clip up front, which makes the run
    a deterministic optimization (useful for overfit checks).
    """
    clips = list(clips)
    if not clips:
        raise EmptyTrainingSet("no clips to train on")
    schedule = schedule or NoiseSchedule()
    grid = model.config.grid
    frame_rows = grid.tokens_per_frame
    rng = np.random.default_rng(cfg.seed)

    temporal = _fresh_adapters(model, placement.blocks_with_role("temporal"),
                               rng, "temporal", "motion_temporal", cfg)
    temporal_params = make_adapter_params(temporal)
    per_video = []
    per_video_params = []
    for _ in clips:
        aset = _fresh_adapters(model, placement.blocks_with_role("spatial"),
                               rng, "spatial", "motion_spatial_pervideo", cfg)
        per_video.append(aset)
        per_video_params.append(make_adapter_params(aset))

    contexts = []
    for ci, (z0, caption) in enumerate(clips):
        if np.shape(z0) != (grid.tokens, model.config.d_latent):
            raise ShapeMismatch(
                f"clip {ci} latent has shape {np.shape(z0)}, expected "
                f"{(grid.tokens, model.config.d_latent)}")
        prompt = caption if cfg.prompt_mode == "per_video" else (
            cfg.single_prompt or clips[0][1])
        plan = single_condition_plan(prompt, grid.t_lat)
        rmap = build_region_map(plan, grid)
        combined_set, combined = _combined_params(
            [(temporal, temporal_params), (per_video[ci], per_video_params[ci])])
        contexts.append({
            "z0": np.asarray(z0, dtype=np.float64),
            "prompt": prompt,
            "cond": model.prepare(plan, rmap, "sr3a"),
            "set": combined_set,
            "params": combined,
        })

    fixed_draws = None
    if not cfg.resample_noise:
        fixed_draws = [(int(rng.integers(schedule.timesteps)),
                        rng.standard_normal(ctx["z0"].shape)) for ctx in contexts]

    all_tensors = [t for params in [temporal_params, *per_video_params]
                   for pair in params.values() for t in pair]
    log: list[dict] = []
    for step in range(cfg.steps):
        org_sum = ad_sum = motion_sum = 0.0
        for ci, ctx in enumerate(contexts):
            if cfg.resample_noise:
                t = int(rng.integers(schedule.timesteps))
                epsilon = rng.standard_normal(ctx["z0"].shape)
            else:
                t, epsilon = fixed_draws[ci]
            batch = TrainBatch(z0=ctx["z0"], prompt=ctx["prompt"],
                               epsilon=epsilon, t=t)
            z_t = add_noise(batch.z0, batch.t, batch.epsilon, schedule)
            eps_hat = model.forward(ctx["cond"], ctx["set"], z_t, batch.t,
                                    adapter_params=ctx["params"])
            total, org_val, ad_val = _motion_loss_tape(
                batch.epsilon, eps_hat, cfg, frame_rows, grid.t_lat)
            ad.backward(total)
            org_sum += org_val
            ad_sum += ad_val
            motion_sum += float(total.data)
        n = len(contexts)
        log.append({"step": step, "loss_org": org_sum / n, "loss_ad": ad_sum / n,
                    "loss_motion": motion_sum / n})
        _sgd_step(all_tensors, cfg.learning_rate, n)

    if log_path is not None:
        write_training_log(log, log_path)
    return MotionPriorResult(temporal=temporal, per_video=per_video, log=log)


def train_subject_prior(reference: np.ndarray, model: ToyDiT,
                        placement: PlacementPlan, cfg: TrainConfig,
                        schedule: NoiseSchedule | None = None,
                        log_path: str | Path | None = None) -> SubjectPriorResult:
    """Fit spatial subject adapters on a reference image repeated into a clip.

    Requires ``cfg.first_frame_only``; the reconstruction loss covers only
    the first latent frame's tokens, so the repeated static frames cannot be
    overfit.
    """
    if not cfg.first_frame_only:
        raise ValueError("subject prior training requires first_frame_only")
    schedule = schedule or NoiseSchedule()
    grid = model.config.grid
    frame_rows = grid.tokens_per_frame
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (frame_rows, model.config.d_latent):
        raise ShapeMismatch(
            f"reference has shape {reference.shape}, expected "
            f"{(frame_rows, model.config.d_latent)}")
    z0 = np.tile(reference, (grid.t_lat, 1))

    rng = np.random.default_rng(cfg.seed)
    adapters = _fresh_adapters(model, placement.blocks_with_role("spatial"),
                               rng, "spatial", "subject", cfg)
    params = make_adapter_params(adapters)
    prompt = cfg.single_prompt or "the subject on a neutral backdrop"
    plan = single_condition_plan(prompt, grid.t_lat)
    cond = model.prepare(plan, build_region_map(plan, grid), "sr3a")

    fixed_draw = None
    if not cfg.resample_noise:
        fixed_draw = (int(rng.integers(schedule.timesteps)),
                      rng.standard_normal(z0.shape))

    tensors = [t for pair in params.values() for t in pair]
    log: list[dict] = []
    for step in range(cfg.steps):
        if cfg.resample_noise:
            t = int(rng.integers(schedule.timesteps))
            epsilon = rng.standard_normal(z0.shape)
        else:
            t, epsilon = fixed_draw
        batch = TrainBatch(z0=z0, prompt=prompt, epsilon=epsilon, t=t)
        z_t = add_noise(batch.z0, batch.t, batch.epsilon, schedule)
        eps_hat = model.forward(cond, adapters, z_t, batch.t, adapter_params=params)
        first_pred = ad.rows(eps_hat, 0, frame_rows)
        diff = ad.constant(batch.epsilon[:frame_rows]) - first_pred
        loss = _reduce_tape(diff * diff, cfg.loss_reduction)
        ad.backward(loss)
        value = float(loss.data)
        log.append({"step": step, "loss_org": value, "loss_ad": 0.0,
                    "loss_motion": value})
        _sgd_step(tensors, cfg.learning_rate, 1)

    if log_path is not None:
        write_training_log(log, log_path)
    return SubjectPriorResult(adapters=adapters, log=log)


def write_training_log(log: list[dict], path: str | Path) -> None:
    """One JSON record per training step."""
    lines = [json.dumps(record) for record in log]
    Path(path).write_text("\n".join(lines) + "\n")

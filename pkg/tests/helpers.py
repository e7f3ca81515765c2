"""Shared builders for model-level tests."""

from __future__ import annotations

import numpy as np

from storyforge.plan import BBox, Condition, LatentPlan, LatentRegion
from storyforge.regions import LatentGrid, build_region_map


def static_plan(frame_count: int, entity_specs, background="a plain backdrop"):
    """Latent plan with static entity conditions present in every frame.

    ``entity_specs`` is a list of (entity, motion, caption, BBox).
    """
    conditions = [Condition(0, "background", "none", background,
                            frozenset(range(frame_count)))]
    for i, (entity, motion, caption, _) in enumerate(entity_specs, start=1):
        conditions.append(Condition(i, entity, motion, caption,
                                    frozenset(range(frame_count))))
    frames = tuple(
        tuple(LatentRegion(i, item[3]) for i, item in enumerate(entity_specs, start=1))
        for _ in range(frame_count)
    )
    return LatentPlan(conditions=tuple(conditions), latent_frames=frames)


def two_region_setup(grid: LatentGrid, caption_one: str, caption_two: str):
    """A plan with two disjoint half-frame regions, plus its region map."""
    plan = static_plan(grid.t_lat, [
        ("left", "moving", caption_one, BBox(0.0, 0.0, 0.5, 1.0)),
        ("right", "moving", caption_two, BBox(0.5, 0.0, 1.0, 1.0)),
    ])
    return plan, build_region_map(plan, grid)


def uniform_plan(caption: str, frame_count: int):
    """Single-condition plan: the whole clip is one caption (training style)."""
    return LatentPlan(
        conditions=(Condition(0, "background", "none", caption,
                              frozenset(range(frame_count))),),
        latent_frames=tuple(() for _ in range(frame_count)),
    )


def moving_square_clip(grid: LatentGrid, d_latent: int, start_col: int,
                       speed: int = 1, amplitude: float = 2.0) -> np.ndarray:
    """Clean latent video of a bright square sliding across columns."""
    z0 = np.zeros((grid.tokens, d_latent))
    for t in range(grid.t_lat):
        col = (start_col + speed * t) % grid.w_lat
        for h in range(grid.h_lat):
            tok = grid.token_index(t, h, col)
            z0[tok, :] = amplitude
    return z0

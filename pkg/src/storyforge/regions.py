"""Rasterize interpolated plan boxes onto the latent token grid.

Tokens live on a (frames x rows x cols) grid, flattened row-major.  A patch
belongs to a box when its center falls inside the half-open box interval, so
edge-sharing boxes never double-claim a patch and boxes reaching 1.0 never
lose one.  Every token ends up with a membership set of condition ids; the
background condition 0 covers the complement of all entity regions (or every
token, in ``full_frame`` mode).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .plan import BBox, LatentPlan

__all__ = [
    "LatentGrid",
    "RegionMap",
    "GridMismatch",
    "rasterize_bbox",
    "build_region_map",
    "region_map_to_json",
    "region_map_from_json",
    "region_frame_pgm",
]


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LatentGrid:
    """Latent token layout: ``t_lat`` frames of ``h_lat`` x ``w_lat`` patches."""

    t_lat: int
    h_lat: int
    w_lat: int

    def __post_init__(self):
        if min(self.t_lat, self.h_lat, self.w_lat) < 1:
            raise ValueError(f"grid dimensions must be positive, got {self}")

    @property
    def tokens(self) -> int:
        return self.t_lat * self.h_lat * self.w_lat

    @property
    def tokens_per_frame(self) -> int:
        return self.h_lat * self.w_lat

    def token_index(self, t: int, h: int, w: int) -> int:
        return t * self.h_lat * self.w_lat + h * self.w_lat + w


@dataclass(frozen=True)
class RegionMap:
    """Per-token condition membership over a latent grid."""

    grid: LatentGrid
    membership: tuple[frozenset[int], ...]
    n_conditions: int

    def __post_init__(self):
        if len(self.membership) != self.grid.tokens:
            raise GridMismatch(
                f"membership covers {len(self.membership)} tokens, "
                f"grid has {self.grid.tokens}"
            )

    def frame_slice(self, t: int) -> tuple[frozenset[int], ...]:
        per = self.grid.tokens_per_frame
        return self.membership[t * per : (t + 1) * per]


def rasterize_bbox(bbox: BBox, h_lat: int, w_lat: int,
                   coverage: str = "center") -> set[tuple[int, int]]:
    """Patches of an ``h_lat`` x ``w_lat`` frame covered by ``bbox``.

    ``center`` (default): patch (h, w) is covered iff its center
    ((w+0.5)/w_lat, (h+0.5)/h_lat) lies in [x0, x1) x [y0, y1).
    ``overlap``: covered iff the patch cell intersects the box with
    positive area.  The result may be empty for degenerate boxes.
    """
    if coverage not in ("center", "overlap"):
        raise ValueError(f"unknown coverage mode {coverage!r}")
    patches = set()
    for h in range(h_lat):
        for w in range(w_lat):
            if coverage == "center":
                cx = (w + 0.5) / w_lat
                cy = (h + 0.5) / h_lat
                hit = bbox.x0 <= cx < bbox.x1 and bbox.y0 <= cy < bbox.y1
            else:
                x_lo, x_hi = w / w_lat, (w + 1) / w_lat
                y_lo, y_hi = h / h_lat, (h + 1) / h_lat
                hit = (min(x_hi, bbox.x1) > max(x_lo, bbox.x0)
                       and min(y_hi, bbox.y1) > max(y_lo, bbox.y0))
            if hit:
                patches.add((h, w))
    return patches


def build_region_map(latent_plan: LatentPlan, grid: LatentGrid,
                     background_mode: str = "complement",
                     coverage: str = "center") -> RegionMap:
    """Rasterize every latent-frame region onto the grid.

    Tokens may belong to several conditions (overlaps allowed).  In
    ``complement`` mode the background condition 0 claims exactly the tokens
    no entity covers; in ``full_frame`` mode it claims every token.
    """
    if background_mode not in ("complement", "full_frame"):
        raise ValueError(f"unknown background_mode {background_mode!r}")
    if latent_plan.frame_count != grid.t_lat:
        raise GridMismatch(
            f"latent plan has {latent_plan.frame_count} frames, "
            f"grid expects {grid.t_lat}"
        )
    members: list[set[int]] = [set() for _ in range(grid.tokens)]
    for t, regions in enumerate(latent_plan.latent_frames):
        for region in regions:
            for h, w in rasterize_bbox(region.bbox, grid.h_lat, grid.w_lat, coverage):
                members[grid.token_index(t, h, w)].add(region.condition_id)
    for tok in range(grid.tokens):
        if background_mode == "full_frame" or not members[tok]:
            members[tok].add(0)
    return RegionMap(
        grid=grid,
        membership=tuple(frozenset(m) for m in members),
        n_conditions=latent_plan.n_conditions,
    )


def region_map_to_json(region_map: RegionMap) -> str:
    doc = {
        "grid": {"t": region_map.grid.t_lat, "h": region_map.grid.h_lat,
                 "w": region_map.grid.w_lat},
        "n_conditions": region_map.n_conditions,
        "membership": [sorted(m) for m in region_map.membership],
    }
    return json.dumps(doc, indent=2)


def region_map_from_json(text: str) -> RegionMap:
    doc = json.loads(text)
    grid = LatentGrid(doc["grid"]["t"], doc["grid"]["h"], doc["grid"]["w"])
    return RegionMap(
        grid=grid,
        membership=tuple(frozenset(m) for m in doc["membership"]),
        n_conditions=doc["n_conditions"],
    )


def region_frame_pgm(region_map: RegionMap, frame: int) -> bytes:
    """One latent frame as a binary (P5, 8-bit) PGM.

    Pixel value is the lowest member condition id scaled by
    255 / n_conditions; tokens with no membership render as 255.
    """
    grid = region_map.grid
    if not 0 <= frame < grid.t_lat:
        raise IndexError(f"frame {frame} outside grid with {grid.t_lat} frames")
    header = f"P5\n{grid.w_lat} {grid.h_lat}\n255\n".encode("ascii")
    pixels = bytearray()
    for m in region_map.frame_slice(frame):
        pixels.append(min(m) * 255 // region_map.n_conditions if m else 255)
    return header + bytes(pixels)

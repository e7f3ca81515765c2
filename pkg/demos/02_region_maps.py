#!/usr/bin/env python3
"""Rasterize an interpolated plan onto the latent token grid.

Writes per-frame PGM visualizations plus the region-map JSON under
demos/output/regions/.
"""

from collections import Counter
from pathlib import Path

from storyforge import samples
from storyforge.plan import interpolate_plan, parse_frame_plan
from storyforge.regions import (
    LatentGrid,
    build_region_map,
    region_frame_pgm,
    region_map_to_json,
)

out_dir = Path(__file__).parent / "output" / "regions"
out_dir.mkdir(parents=True, exist_ok=True)

plan = parse_frame_plan(samples.load("coral_reef_frame_plan"))
latent = interpolate_plan(plan, 12)
grid = LatentGrid(12, 8, 8)
rmap = build_region_map(latent, grid)

print(f"grid {grid.t_lat}x{grid.h_lat}x{grid.w_lat} = {grid.tokens} tokens, "
      f"{rmap.n_conditions} conditions")

for t in (0, 6, 11):
    counts = Counter()
    for members in rmap.frame_slice(t):
        for cid in members:
            counts[cid] += 1
    shares = ", ".join(f"cond {cid}: {counts[cid]:3d}" for cid in sorted(counts))
    print(f"  frame {t:2d} token counts: {shares}")

overlaps = sum(1 for m in rmap.membership if len(m) > 1)
print(f"tokens owned by more than one condition: {overlaps}")

(out_dir / "region_map.json").write_text(region_map_to_json(rmap))
for t in range(grid.t_lat):
    (out_dir / f"frame_{t:02d}.pgm").write_bytes(region_frame_pgm(rmap, t))
print(f"wrote region_map.json and {grid.t_lat} PGM frames to {out_dir}")

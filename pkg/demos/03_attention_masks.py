#!/usr/bin/env python3
"""Build the routing attention mask in all three modes and export images.

Uses the sample scene so the mask covers real interpolated regions; PGMs land
in demos/output/masks/ (255 = attention allowed, 0 = masked).
"""

from pathlib import Path

from storyforge import samples
from storyforge.attention import MODES, build_attention_mask, export_mask
from storyforge.dit import tokenize
from storyforge.attention import SegmentLayout
from storyforge.plan import interpolate_plan, parse_frame_plan
from storyforge.regions import LatentGrid, build_region_map

out_dir = Path(__file__).parent / "output" / "masks"
out_dir.mkdir(parents=True, exist_ok=True)

plan = parse_frame_plan(samples.load("coral_reef_frame_plan"))
latent = interpolate_plan(plan, 4)  # a small grid keeps the image readable
grid = LatentGrid(4, 4, 4)
rmap = build_region_map(latent, grid)

token_ids = [tokenize(c.caption, hash_vocab=4096, max_seg_len=8)
             for c in latent.conditions]
layout = SegmentLayout(seg_lengths=tuple(len(ids) for ids in token_ids),
                       visual_tokens=grid.tokens)
print(f"sequence: {layout.n_conditions} text segments {layout.seg_lengths} "
      f"+ {layout.visual_tokens} visual tokens = {layout.total}")

for mode in MODES:
    mask = build_attention_mask(layout, rmap, mode)
    dense = mask.to_dense()
    allowed = int(dense.sum())
    print(f"  {mode:13s}: {allowed:6d} of {mask.size * mask.size} pairs allowed")
    (out_dir / f"mask_{mode}.pgm").write_bytes(export_mask(mask, "pgm"))
    (out_dir / f"mask_{mode}.bin").write_bytes(export_mask(mask, "bitset_binary"))

mask = build_attention_mask(layout, rmap, "sr3a")
background_token = next(i for i, m in enumerate(rmap.membership) if m == {0})
entity_token = next(i for i, m in enumerate(rmap.membership) if 1 in m)
print("\nrouting facts (sr3a):")
print("  background text -> a background visual token:",
      mask.query(0, layout.text_total + background_token))
print("  background text -> a condition-1 visual token:",
      mask.query(0, layout.text_total + entity_token))
print("  background text -> condition-1 text:",
      mask.query(0, layout.offsets[1]))
print("  visual -> visual across regions:",
      mask.query(layout.text_total + background_token,
                 layout.text_total + entity_token))
print(f"wrote mask images to {out_dir}")

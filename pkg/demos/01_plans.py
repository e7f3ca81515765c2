#!/usr/bin/env python3
"""Walk through the dual-level plan model on the bundled sample story.

Parses the six-scene story outline and one scene's 6-key-frame layout plan,
lints both, and interpolates the key frames onto 12 latent frames.
"""

from storyforge import samples
from storyforge.plan import (
    RuleConfig,
    emit_frame_plan,
    interpolate_plan,
    parse_frame_plan,
    parse_high_level_plan,
    validate_frame_plan,
    validate_high_level_plan,
)

story = parse_high_level_plan(samples.load("mermaid_story"))
print(f"story with {len(story.scenes)} scenes:")
for i, scene in enumerate(story.scenes, start=1):
    print(f"  {i}. {scene.scene_name:<12} motions: {', '.join(scene.motions)}")

report = validate_high_level_plan(story)
print(f"\nstory lint: {len(report.errors)} errors, {len(report.warnings)} warnings")

plan = parse_frame_plan(samples.load("coral_reef_frame_plan"))
print(f"\nscene 1 frame plan, background: {plan.background!r}")
for k, entries in enumerate(plan.key_frames, start=1):
    described = ", ".join(f"{e.entity}/{e.motion}" for e in entries)
    print(f"  key frame {k}: {described}")

scene_rules = RuleConfig(allowed_motions=story.scenes[0].motions)
report = validate_frame_plan(plan, scene_rules)
print(f"\nframe plan lint: {len(report.errors)} errors, "
      f"{len(report.warnings)} warnings")

latent = interpolate_plan(plan, 12)
print(f"\ninterpolated to {latent.frame_count} latent frames, "
      f"{latent.n_conditions} conditions:")
for cond in latent.conditions:
    frames = sorted(cond.latent_frame_span)
    print(f"  [{cond.id}] {cond.entity}/{cond.motion}: frames "
          f"{frames[0]}..{frames[-1]}")

print("\nthe mermaid's interpolated x0 trajectory:")
by_id = {c.id: c for c in latent.conditions}
xs = []
for frame in latent.latent_frames:
    mermaid = next(r for r in frame if by_id[r.condition_id].entity == "Mermaid")
    xs.append(mermaid.bbox.x0)
print("  " + " -> ".join(f"{x:.3f}" for x in xs))

print("\nround trip is a fixpoint:",
      parse_frame_plan(emit_frame_plan(plan)) == plan)

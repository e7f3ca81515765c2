#!/usr/bin/env python3
"""Generate a full story plan through the replay backend.

The replay backend serves canned responses from a directory, standing in for
a live LLM endpoint: the first file answers the high-level prompt, the rest
answer the per-scene fine-grained prompts.  A deliberately broken first
response shows the parse-retry loop in action.
"""

import tempfile
from pathlib import Path

from storyforge import samples
from storyforge.planner import (
    ReplayBackend,
    StaticBackend,
    StoryRequest,
    generate_plan,
    load_template,
    plan_story,
    render_prompt,
)

template = load_template("high_level")
prompt = render_prompt(template, {"topic": "Mermaid's Adventure"})
print("high-level prompt tail:")
print("  ..." + prompt[-60:].replace("\n", "\n  "))

with tempfile.TemporaryDirectory() as tmp:
    replay_dir = Path(tmp)
    (replay_dir / "00.txt").write_text(samples.load("mermaid_story"))
    for i in range(1, 7):
        (replay_dir / f"{i:02d}.txt").write_text(
            samples.load("coral_reef_frame_plan"))
    backend = ReplayBackend(replay_dir)
    story = plan_story(backend, StoryRequest(topic="Mermaid's Adventure"))

print(f"\nplanned {len(story.scene_plans)} scenes after "
      f"{backend.calls} backend calls")
for i, (scene, result) in enumerate(zip(story.high_level.scenes,
                                        story.scene_plans), start=1):
    status = "clean" if result.report.ok else \
        f"{len(result.report.errors)} lint findings"
    print(f"  scene {i} ({scene.scene_name}): parsed on attempt "
          f"{result.attempts}, {status}")
print("(the replayed frame plan matches scene 1's motions, so later scenes"
      " flag vocabulary findings -- findings are data, not failures)")

flaky = StaticBackend(["not a plan at all", "Scene oops",
                       samples.load("mermaid_story")])
result = generate_plan(flaky, StoryRequest(topic="Mermaid's Adventure"),
                       "high_level")
print(f"\nflaky backend recovered on attempt {result.attempts} "
      f"(retry appends the parse error to the prompt)")

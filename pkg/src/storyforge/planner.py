"""Prompt templating and plan generation against a pluggable text backend.

Two templates ship with the package: the high-level story prompt (slot
``{topic}``) and the fine-grained per-scene layout prompt (slots
``{motions}`` and ``{narration}``).  A backend is anything with a
``complete(prompt) -> text`` method; the HTTP backend POSTs
``{"prompt": ...}`` and expects ``{"text": ...}`` back, while the replay
backend serves canned responses from a directory for offline runs.  Parse
failures are retried with the error appended to the prompt, and every
successful parse comes back with its validation report.
"""

from __future__ import annotations

import json
import os
import re
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

from .plan import (
    FrameLevelPlan,
    HighLevelPlan,
    PlanError,
    RuleConfig,
    SceneOutline,
    ValidationReport,
    parse_frame_plan,
    parse_high_level_plan,
    validate_frame_plan,
    validate_high_level_plan,
)

TEMPLATE_IDS = ("high_level", "fine_grained")

ENDPOINT_ENV = "PLANNER_ENDPOINT"
API_KEY_ENV = "PLANNER_API_KEY"

__all__ = [
    "TEMPLATE_IDS",
    "ENDPOINT_ENV",
    "API_KEY_ENV",
    "PromptTemplate",
    "StoryRequest",
    "GenerationResult",
    "StoryPlan",
    "TextBackend",
    "HttpBackend",
    "ReplayBackend",
    "StaticBackend",
    "MissingSlot",
    "EmptySlot",
    "BackendError",
    "ExhaustedRetries",
    "load_template",
    "render_prompt",
    "generate_plan",
    "plan_story",
]


class MissingSlot(KeyError):
    pass


class EmptySlot(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class ExhaustedRetries(RuntimeError):
    def __init__(self, attempts: int, last_error: PlanError):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"no parseable plan after {attempts} attempts: {last_error}")


_SLOT = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_SLOT.findall(self.body)))

    def __post_init__(self):
        counts = {}
        for name in _SLOT.findall(self.body):
            counts[name] = counts.get(name, 0) + 1
        repeated = [n for n, c in counts.items() if c > 1]
        if repeated:
            raise ValueError(f"slots declared more than once: {repeated}")


@dataclass(frozen=True)
class StoryRequest:
    topic: str
    characters: tuple[tuple[str, str], ...] = ()  # (name, reference image path)
    max_retries: int = 3

    def __post_init__(self):
        if not self.topic.strip():
            raise EmptySlot("story topic must be non-empty")


@dataclass
class GenerationResult:
    plan: HighLevelPlan | FrameLevelPlan
    report: ValidationReport
    attempts: int
    raw_text: str


@dataclass
class StoryPlan:
    high_level: HighLevelPlan
    scene_plans: list[GenerationResult]


def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown template {template_id!r}; have {TEMPLATE_IDS}")
    body = (resources.files("storyforge") / "templates" / f"{template_id}.txt") \
        .read_text(encoding="utf-8")
    return PromptTemplate(template_id=template_id, body=body)


def render_prompt(template: PromptTemplate, slots: dict[str, str]) -> str:
    """Substitute every slot verbatim; nothing else in the body changes."""
    rendered = template.body
    for name in template.slots:
        if name not in slots:
            raise MissingSlot(name)
        value = slots[name]
        if not value or not value.strip():
            raise EmptySlot(f"slot {name!r} is empty")
        rendered = rendered.replace("{" + name + "}", value)
    return rendered


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class TextBackend(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpBackend:
    """Generic JSON-over-HTTP text backend.

    POSTs ``{"prompt": <text>}`` to the endpoint and reads ``{"text": <text>}``
    from the response.  Endpoint and credential default to the
    ``PLANNER_ENDPOINT`` and ``PLANNER_API_KEY`` environment variables.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 timeout_s: float = 60.0):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.timeout_s = timeout_s
        if not self.endpoint:
            raise BackendError(
                f"no endpoint configured; set {ENDPOINT_ENV} or pass one explicitly")

    def complete(self, prompt: str) -> str:
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=payload, method="POST",
            headers={"Content-Type": "application/json"})
        if self.api_key:
            request.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as response:
                doc = json.loads(response.read().decode("utf-8"))
        except OSError as err:
            raise BackendError(f"backend call failed: {err}") from err
        if "text" not in doc:
            raise BackendError("backend response lacks a 'text' field")
        return doc["text"]


class ReplayBackend:
    """Serves the files of a directory in sorted order, one per call."""

    def __init__(self, directory: str | Path):
        self.responses = sorted(p for p in Path(directory).iterdir() if p.is_file())
        self.calls = 0

    def complete(self, prompt: str) -> str:
        if self.calls >= len(self.responses):
            raise BackendError(
                f"replay directory exhausted after {self.calls} calls")
        text = self.responses[self.calls].read_text(encoding="utf-8")
        self.calls += 1
        return text


class StaticBackend:
    """Returns canned responses from a list, repeating the last one."""

    def __init__(self, responses: list[str]):
        if not responses:
            raise ValueError("need at least one canned response")
        self.responses = responses
        self.calls = 0

    def complete(self, prompt: str) -> str:
        text = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return text


# ---------------------------------------------------------------------------
# Plan generation with parse-retry
# ---------------------------------------------------------------------------


def _slots_for(template_id: str, request: StoryRequest,
               scene: SceneOutline | None) -> dict[str, str]:
    if template_id == "high_level":
        return {"topic": request.topic}
    if scene is None:
        raise MissingSlot("fine_grained generation needs a scene outline")
    return {"motions": ", ".join(scene.motions), "narration": scene.narration}


def generate_plan(backend: TextBackend, request: StoryRequest, template_id: str,
                  scene: SceneOutline | None = None,
                  rules: RuleConfig = RuleConfig()) -> GenerationResult:
    """Render, call the backend, and parse; retry on parse failures.

    Each retry appends the parse error to the prompt.  The backend is called
    at most ``1 + request.max_retries`` times.  The returned plan always
    carries its validation report.
    """
    template = load_template(template_id)
    prompt = render_prompt(template, _slots_for(template_id, request, scene))
    last_error: PlanError | None = None
    for attempt in range(1, request.max_retries + 2):
        text = backend.complete(prompt)
        try:
            if template_id == "high_level":
                plan = parse_high_level_plan(text)
                report = validate_high_level_plan(plan, rules)
            else:
                plan = parse_frame_plan(text)
                report = validate_frame_plan(plan, rules)
            return GenerationResult(plan=plan, report=report, attempts=attempt,
                                    raw_text=text)
        except PlanError as err:
            last_error = err
            prompt = (f"{prompt}\n\nYour previous answer could not be parsed"
                      f" ({err}). Answer again, following the required output"
                      f" format exactly.")
    raise ExhaustedRetries(request.max_retries + 1, last_error)


def plan_story(backend: TextBackend, request: StoryRequest,
               rules: RuleConfig = RuleConfig()) -> StoryPlan:
    """High-level plan, then one fine-grained plan per scene.

    The per-scene rule config inherits the scene's motion list so the frame
    plans are linted against their declared motions.
    """
    high = generate_plan(backend, request, "high_level", rules=rules)
    scene_plans = []
    for scene in high.plan.scenes:
        scene_rules = RuleConfig(
            min_box_size=rules.min_box_size,
            min_motion_frames=rules.min_motion_frames,
            max_corner_jump=rules.max_corner_jump,
            allowed_motions=scene.motions,
            max_scene_motions=rules.max_scene_motions,
        )
        scene_plans.append(generate_plan(backend, request, "fine_grained",
                                         scene=scene, rules=scene_rules))
    return StoryPlan(high_level=high.plan, scene_plans=scene_plans)

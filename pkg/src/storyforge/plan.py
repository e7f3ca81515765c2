"""Dual-level story plans: parse, emit, validate, and interpolate.

A story is planned at two levels.  The high level is a list of scenes, each
with 1-4 motions and a narration.  The fine-grained level is a per-scene
6-key-frame layout: a background caption plus, for every key frame, a list of
(entity, motion, caption, bounding box) regions.  Key frames are interpolated
to the latent frame count of the video grid before rasterization.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

KEY_FRAME_COUNT = 6
DEFAULT_LATENT_FRAMES = 12

__all__ = [
    "BBox",
    "RegionEntry",
    "FrameLevelPlan",
    "SceneOutline",
    "HighLevelPlan",
    "Condition",
    "LatentRegion",
    "LatentPlan",
    "Finding",
    "ValidationReport",
    "RuleConfig",
    "PlanError",
    "MissingScene",
    "MissingNarration",
    "MalformedHeader",
    "MissingBackground",
    "MissingFrame",
    "MalformedEntry",
    "MalformedBBox",
    "InvalidFrameCount",
    "parse_high_level_plan",
    "parse_frame_plan",
    "emit_high_level_plan",
    "emit_frame_plan",
    "validate_frame_plan",
    "validate_high_level_plan",
    "interpolate_plan",
    "frame_plan_to_json",
    "frame_plan_from_json",
    "latent_plan_to_json",
    "latent_plan_from_json",
]


class PlanError(ValueError):
    """Base class for plan parsing and construction errors."""


class MissingScene(PlanError):
    pass


class MissingNarration(PlanError):
    pass


class MalformedHeader(PlanError):
    pass


class MissingBackground(PlanError):
    pass


class MissingFrame(PlanError):
    def __init__(self, frame_number: int):
        self.frame_number = frame_number
        super().__init__(f"missing Frame_{frame_number} line")


class MalformedEntry(PlanError):
    pass


class MalformedBBox(PlanError):
    pass


class InvalidFrameCount(PlanError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with corners normalized to [0, 1].

    ``(x0, y0)`` is the top-left corner and ``(x1, y1)`` the bottom-right.
    Out-of-range values are representable so linting can report them; use
    :attr:`is_valid` to check the invariants.
    """

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def is_valid(self) -> bool:
        return 0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def lerp(self, other: "BBox", frac: float) -> "BBox":
        """Linear interpolation toward ``other`` by fraction ``frac`` in [0, 1]."""
        return BBox(
            self.x0 + frac * (other.x0 - self.x0),
            self.y0 + frac * (other.y0 - self.y0),
            self.x1 + frac * (other.x1 - self.x1),
            self.y1 + frac * (other.y1 - self.y1),
        )


@dataclass(frozen=True)
class RegionEntry:
    """One region of a key frame: who, doing what, described how, and where."""

    entity: str
    motion: str  # the literal "none" marks a motionless entity
    caption: str
    bbox: BBox


@dataclass(frozen=True)
class FrameLevelPlan:
    """Fine-grained plan for one scene: background plus 6 key frames."""

    background: str
    key_frames: tuple[tuple[RegionEntry, ...], ...]

    def __post_init__(self):
        if len(self.key_frames) != KEY_FRAME_COUNT:
            raise PlanError(
                f"expected {KEY_FRAME_COUNT} key frames, got {len(self.key_frames)}"
            )
        if not self.background:
            raise PlanError("background caption must be non-empty")


@dataclass(frozen=True)
class SceneOutline:
    scene_name: str
    motions: tuple[str, ...]
    narration: str


@dataclass(frozen=True)
class HighLevelPlan:
    scenes: tuple[SceneOutline, ...]


@dataclass(frozen=True)
class Condition:
    """One region-specific text condition, identified by its (entity, motion,
    caption) triple.  Index 0 is always the background condition."""

    id: int
    entity: str
    motion: str
    caption: str
    latent_frame_span: frozenset[int]


@dataclass(frozen=True)
class LatentRegion:
    condition_id: int
    bbox: BBox


@dataclass(frozen=True)
class LatentPlan:
    """Frame plan resampled onto latent frames, with deduplicated conditions."""

    conditions: tuple[Condition, ...]
    latent_frames: tuple[tuple[LatentRegion, ...], ...]

    @property
    def frame_count(self) -> int:
        return len(self.latent_frames)

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)


@dataclass(frozen=True)
class Finding:
    rule_id: str
    frame_index: int  # 0-based key frame index, -1 for plan-level findings
    entity: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Finding, ...]
    warnings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class RuleConfig:
    """Thresholds for plan linting.

    ``allowed_motions`` enables the vocabulary check: every non-"none" motion
    in the frame plan must come from this list.  ``max_scene_motions`` is 2
    for single-character stories and 4 for multi-character ones.
    """

    min_box_size: float = 0.2
    min_motion_frames: int = 2
    max_corner_jump: float = 0.35
    allowed_motions: tuple[str, ...] | None = None
    max_scene_motions: int = 2
    size_tolerance: float = 1e-9


# ---------------------------------------------------------------------------
# High-level plan parsing
# ---------------------------------------------------------------------------

_SCENE_HEADER = re.compile(r"^\s*Scene\s+(\d+)\s*:\s*(.*)$")
_OUTPUT_MARKER = re.compile(r"^\s*\[Output\]\s*$", re.MULTILINE)


def _after_output_marker(text: str) -> str:
    match = None
    for match in _OUTPUT_MARKER.finditer(text):
        pass
    return text[match.end():] if match else text


def parse_high_level_plan(text: str) -> HighLevelPlan:
    """Parse scene/motions/narration blocks from model output text.

    Anything up to the last "[Output]" marker is ignored.  Raises
    :class:`MissingScene`, :class:`MissingNarration`, or
    :class:`MalformedHeader`, each naming the offending line.
    """
    lines = _after_output_marker(text).splitlines()
    headers: list[tuple[int, str]] = []  # (line index, scene name)
    for i, line in enumerate(lines):
        m = _SCENE_HEADER.match(line)
        if m:
            headers.append((i, m.group(2).strip()))
        elif re.match(r"^\s*Scene\b", line):
            raise MalformedHeader(f"malformed scene header: {line.strip()!r}")
    if not headers:
        raise MissingScene("no 'Scene N:' header found in text")

    scenes = []
    bounds = [idx for idx, _ in headers] + [len(lines)]
    for (start, name), end in zip(headers, bounds[1:]):
        block = lines[start + 1 : end]
        motions = _section_lines(block, "Motions")
        narration = _section_lines(block, "Narration")
        if narration is None or not " ".join(narration).strip():
            raise MissingNarration(f"scene {name!r} has no narration: {lines[start].strip()!r}")
        if motions is None:
            raise MalformedHeader(f"scene {name!r} has no 'Motions:' section: {lines[start].strip()!r}")
        motion_list = tuple(
            m.strip() for m in " ".join(motions).split(",") if m.strip()
        )
        if not motion_list:
            raise MalformedHeader(f"scene {name!r} lists no motions: {lines[start].strip()!r}")
        scenes.append(
            SceneOutline(
                scene_name=name,
                motions=motion_list,
                narration=" ".join(part.strip() for part in narration if part.strip()),
            )
        )
    return HighLevelPlan(scenes=tuple(scenes))


def _section_lines(block: list[str], label: str) -> list[str] | None:
    """Lines following a ``label:`` marker, up to the next section marker."""
    out: list[str] | None = None
    collecting = False
    for line in block:
        stripped = line.strip()
        if re.fullmatch(rf"{label}\s*:", stripped):
            out = []
            collecting = True
            continue
        if re.fullmatch(r"(Motions|Narration)\s*:", stripped):
            collecting = False
            continue
        if collecting and stripped:
            out.append(stripped)
    return out


def emit_high_level_plan(plan: HighLevelPlan) -> str:
    """Render a high-level plan back to its text format (re-parses to itself)."""
    blocks = []
    for i, scene in enumerate(plan.scenes, start=1):
        blocks.append(
            f"Scene {i}: {scene.scene_name}\n"
            f"Motions:\n{', '.join(scene.motions)}\n"
            f"Narration:\n{scene.narration}"
        )
    return "\n\n".join(blocks) + "\n"


# ---------------------------------------------------------------------------
# Frame-level plan parsing
# ---------------------------------------------------------------------------

_CURLY_QUOTES = str.maketrans({"“": '"', "”": '"', "„": '"',
                               "‘": "'", "’": "'"})


def _normalize_quotes(text: str) -> str:
    return text.translate(_CURLY_QUOTES)


def parse_frame_plan(text: str) -> FrameLevelPlan:
    """Parse a fine-grained 6-frame layout plan from model output text.

    Accepts the raw model output: reasoning before a "*Plan*" marker is
    skipped, curly quotes are normalized to straight ones, and entries keep
    their in-line order.
    """
    text = _normalize_quotes(_after_output_marker(text))
    plan_marker = text.rfind("*Plan*")
    if plan_marker >= 0:
        text = text[plan_marker + len("*Plan*"):]
    lines = text.splitlines()

    background = None
    frame_lines: dict[int, str] = {}
    for line in lines:
        stripped = line.strip()
        if background is None and stripped.startswith("Background:"):
            background = stripped[len("Background:"):].strip()
            continue
        m = re.match(r"^Frame_(\d+)\s*:\s*(.*)$", stripped)
        if m:
            frame_lines[int(m.group(1))] = m.group(2)
    if background is None or not background:
        raise MissingBackground("no 'Background:' line found")

    key_frames = []
    for k in range(1, KEY_FRAME_COUNT + 1):
        if k not in frame_lines:
            raise MissingFrame(k)
        key_frames.append(tuple(_parse_frame_entries(frame_lines[k])))
    return FrameLevelPlan(background=background, key_frames=tuple(key_frames))


def _split_top_level(s: str) -> list[str]:
    """Split on commas at bracket depth 0, respecting double-quoted strings."""
    parts, depth, in_quote, start = [], 0, False, 0
    for i, ch in enumerate(s):
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            elif ch == "," and depth == 0:
                parts.append(s[start:i])
                start = i + 1
    parts.append(s[start:])
    return [p.strip() for p in parts if p.strip()]


def _strip_brackets(s: str, context: str) -> str:
    s = s.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise MalformedEntry(f"expected a bracketed group in: {context.strip()!r}")
    return s[1:-1]


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == '"' and s[-1] == '"':
        return s[1:-1]
    return s


def _parse_frame_entries(line: str) -> list[RegionEntry]:
    entries = []
    for group in _split_top_level(line):
        inner = _split_top_level(_strip_brackets(group, line))
        if len(inner) != 2:
            raise MalformedEntry(f"entry is not a [[triple], [bbox]] pair: {group!r}")
        triple = _split_top_level(_strip_brackets(inner[0], line))
        if len(triple) != 3:
            raise MalformedEntry(f"expected [entity, motion, caption]: {inner[0]!r}")
        coords = _split_top_level(_strip_brackets(inner[1], line))
        if len(coords) != 4:
            raise MalformedBBox(f"expected 4 coordinates: {inner[1]!r}")
        try:
            values = [float(c) for c in coords]
        except ValueError:
            raise MalformedBBox(f"non-numeric coordinate in: {inner[1]!r}") from None
        entries.append(
            RegionEntry(
                entity=_unquote(triple[0]),
                motion=_unquote(triple[1]),
                caption=_unquote(triple[2]),
                bbox=BBox(*values),
            )
        )
    return entries


def _format_coord(v: float) -> str:
    """Minimal decimal form, at most 4 fractional digits, at least one."""
    s = f"{v:.4f}".rstrip("0")
    if s.endswith("."):
        s += "0"
    return s


def emit_frame_plan(plan: FrameLevelPlan) -> str:
    """Render a frame plan back to its text format (re-parses identically for
    coordinates with at most 4 decimal digits)."""
    lines = [f"Background: {plan.background}"]
    for k, entries in enumerate(plan.key_frames, start=1):
        parts = []
        for e in entries:
            box = ", ".join(_format_coord(c) for c in e.bbox.as_tuple())
            parts.append(f'[["{e.entity}", "{e.motion}", "{e.caption}"], [{box}]]')
        lines.append(f"Frame_{k}: " + ", ".join(parts))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_frame_plan(plan: FrameLevelPlan, rules: RuleConfig = RuleConfig()) -> ValidationReport:
    """Lint a frame plan. Findings are data, never exceptions.

    Errors: out-of-range or inverted boxes, boxes smaller than the minimum
    side length, motions that do not persist for the minimum number of
    consecutive key frames, and (when a vocabulary is supplied) motions not
    drawn from it.  Warnings: box corners jumping more than the configured
    distance between adjacent key frames.
    """
    errors: list[Finding] = []
    warnings: list[Finding] = []

    for k, entries in enumerate(plan.key_frames):
        for e in entries:
            b = e.bbox
            if not b.is_valid:
                errors.append(Finding(
                    "bbox_bounds", k, e.entity,
                    f"bbox {b.as_tuple()} outside [0,1] or inverted",
                ))
                continue
            if (b.width < rules.min_box_size - rules.size_tolerance
                    or b.height < rules.min_box_size - rules.size_tolerance):
                errors.append(Finding(
                    "bbox_min_size", k, e.entity,
                    f"bbox {b.width:.3f}x{b.height:.3f} smaller than "
                    f"{rules.min_box_size} on a side",
                ))

    # Motion persistence: each (entity, motion) needs a run of consecutive frames.
    presence: dict[tuple[str, str], set[int]] = {}
    for k, entries in enumerate(plan.key_frames):
        for e in entries:
            if e.motion.lower() != "none":
                presence.setdefault((e.entity, e.motion), set()).add(k)
    for (entity, motion), frames in presence.items():
        if _longest_run(frames) < rules.min_motion_frames:
            errors.append(Finding(
                "motion_duration", min(frames), entity,
                f"motion {motion!r} spans fewer than "
                f"{rules.min_motion_frames} consecutive key frames",
            ))

    if rules.allowed_motions is not None:
        vocab = {m.strip().lower() for m in rules.allowed_motions} | {"none"}
        seen: set[tuple[str, str]] = set()
        for k, entries in enumerate(plan.key_frames):
            for e in entries:
                key = (e.entity, e.motion)
                if e.motion.lower() not in vocab and key not in seen:
                    seen.add(key)
                    errors.append(Finding(
                        "motion_vocab", k, e.entity,
                        f"motion {e.motion!r} not among the scene motions",
                    ))

    # Corner jumps between adjacent key frames (per entity occurrence).
    for k in range(len(plan.key_frames) - 1):
        prev = _boxes_by_entity(plan.key_frames[k])
        for entity, boxes in _boxes_by_entity(plan.key_frames[k + 1]).items():
            for j, box in enumerate(boxes):
                if entity in prev and j < len(prev[entity]):
                    deltas = [abs(a - b) for a, b in
                              zip(box.as_tuple(), prev[entity][j].as_tuple())]
                    if max(deltas) > rules.max_corner_jump:
                        warnings.append(Finding(
                            "bbox_jump", k + 1, entity,
                            f"corner moved {max(deltas):.3f} between key frames "
                            f"{k} and {k + 1}",
                        ))
    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))


def _longest_run(frames: set[int]) -> int:
    best = 0
    for f in frames:
        if f - 1 not in frames:
            n = 1
            while f + n in frames:
                n += 1
            best = max(best, n)
    return best


def _boxes_by_entity(entries: tuple[RegionEntry, ...]) -> dict[str, list[BBox]]:
    out: dict[str, list[BBox]] = {}
    for e in entries:
        out.setdefault(e.entity, []).append(e.bbox)
    return out


_ING = re.compile(r"ing$")


def _motion_stems(motion: str) -> list[str]:
    """Candidate substrings a conjugated form of ``motion`` would contain."""
    word = motion.strip().lower().split()[0] if motion.strip() else ""
    stems = [word]
    if word.endswith("ing") and len(word) > 4:
        stem = _ING.sub("", word)
        stems.append(stem)
        if len(stem) >= 2 and stem[-1] == stem[-2]:
            stems.append(stem[:-1])
    return [s for s in stems if len(s) >= 3] or [word]


def validate_high_level_plan(plan: HighLevelPlan, rules: RuleConfig = RuleConfig()) -> ValidationReport:
    """Lint a high-level plan: scene count, per-scene motion count, and the
    presence of each motion (as a conjugated form) in its narration."""
    errors: list[Finding] = []
    warnings: list[Finding] = []
    if not 5 <= len(plan.scenes) <= 8:
        errors.append(Finding(
            "scene_count", -1, "",
            f"expected 5 to 8 scenes, got {len(plan.scenes)}",
        ))
    for i, scene in enumerate(plan.scenes):
        if not scene.motions:
            errors.append(Finding("scene_motions", i, scene.scene_name,
                                  "scene lists no motions"))
        if len(scene.motions) > rules.max_scene_motions:
            errors.append(Finding(
                "motion_count", i, scene.scene_name,
                f"{len(scene.motions)} motions exceed the limit of "
                f"{rules.max_scene_motions}",
            ))
        if not scene.narration.strip():
            errors.append(Finding("scene_narration", i, scene.scene_name,
                                  "empty narration"))
            continue
        narration = scene.narration.lower()
        for motion in scene.motions:
            if not any(stem in narration for stem in _motion_stems(motion)):
                warnings.append(Finding(
                    "motion_narration", i, scene.scene_name,
                    f"motion {motion!r} does not appear in the narration",
                ))
    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# Key-frame -> latent-frame interpolation
# ---------------------------------------------------------------------------


def interpolate_plan(plan: FrameLevelPlan,
                     latent_frame_count: int = DEFAULT_LATENT_FRAMES,
                     box_mode: str = "linear") -> LatentPlan:
    """Resample the 6 key frames onto ``latent_frame_count`` latent frames.

    Latent frame ``f`` maps to the continuous key position
    ``p = f * (K - 1) / (F - 1)`` with ``K = 6``.  The (entity, motion,
    caption) triple comes from key ``round(p)`` with ties toward the lower
    key; boxes are linearly interpolated between the flanking keys by the
    fractional part of ``p`` (``box_mode="nearest"`` snaps boxes to the same
    key as the text instead).  An entity missing from one flank keeps the box
    of the flank it does appear in.  Conditions are deduplicated by their
    (entity, motion, caption) triple; the background caption becomes
    condition 0 and carries no explicit box.
    """
    if latent_frame_count < 2:
        raise InvalidFrameCount(f"need at least 2 latent frames, got {latent_frame_count}")
    if box_mode not in ("linear", "nearest"):
        raise ValueError(f"unknown box_mode {box_mode!r}")

    K = KEY_FRAME_COUNT
    F = latent_frame_count
    cond_ids: dict[tuple[str, str, str], int] = {}
    cond_frames: dict[int, set[int]] = {}
    frames: list[tuple[LatentRegion, ...]] = []

    for f in range(F):
        p = f * (K - 1) / (F - 1)
        lo = math.floor(p)
        hi = math.ceil(p)
        frac = p - lo
        src = lo if frac <= 0.5 else hi
        lo_boxes = _boxes_by_entity(plan.key_frames[lo])
        hi_boxes = _boxes_by_entity(plan.key_frames[hi])

        occurrence: dict[str, int] = {}
        regions = []
        for e in plan.key_frames[src]:
            j = occurrence.get(e.entity, 0)
            occurrence[e.entity] = j + 1
            if box_mode == "nearest" or lo == hi:
                box = e.bbox
            else:
                blo = lo_boxes.get(e.entity, [])
                bhi = hi_boxes.get(e.entity, [])
                if j < len(blo) and j < len(bhi):
                    box = blo[j].lerp(bhi[j], frac)
                elif j < len(blo):
                    box = blo[j]
                elif j < len(bhi):
                    box = bhi[j]
                else:
                    box = e.bbox
            triple = (e.entity, e.motion, e.caption)
            if triple not in cond_ids:
                cond_ids[triple] = len(cond_ids) + 1  # 0 is the background
            cid = cond_ids[triple]
            cond_frames.setdefault(cid, set()).add(f)
            regions.append(LatentRegion(condition_id=cid, bbox=box))
        frames.append(tuple(regions))

    conditions = [Condition(
        id=0, entity="background", motion="none", caption=plan.background,
        latent_frame_span=frozenset(range(F)),
    )]
    for (entity, motion, caption), cid in cond_ids.items():
        conditions.append(Condition(
            id=cid, entity=entity, motion=motion, caption=caption,
            latent_frame_span=frozenset(cond_frames[cid]),
        ))
    return LatentPlan(conditions=tuple(conditions), latent_frames=tuple(frames))


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------


def frame_plan_to_json(plan: FrameLevelPlan) -> str:
    doc = {
        "background": plan.background,
        "key_frames": [
            [{"entity": e.entity, "motion": e.motion, "caption": e.caption,
              "bbox": list(e.bbox.as_tuple())} for e in entries]
            for entries in plan.key_frames
        ],
    }
    return json.dumps(doc, indent=2)


def frame_plan_from_json(text: str) -> FrameLevelPlan:
    doc = json.loads(text)
    return FrameLevelPlan(
        background=doc["background"],
        key_frames=tuple(
            tuple(RegionEntry(e["entity"], e["motion"], e["caption"],
                              BBox(*e["bbox"])) for e in entries)
            for entries in doc["key_frames"]
        ),
    )


def latent_plan_to_json(plan: LatentPlan) -> str:
    doc = {
        "conditions": [
            {"id": c.id, "entity": c.entity, "motion": c.motion,
             "caption": c.caption,
             "latent_frame_span": sorted(c.latent_frame_span)}
            for c in plan.conditions
        ],
        "latent_frames": [
            [{"condition_id": r.condition_id, "bbox": list(r.bbox.as_tuple())}
             for r in regions]
            for regions in plan.latent_frames
        ],
    }
    return json.dumps(doc, indent=2)


def latent_plan_from_json(text: str) -> LatentPlan:
    doc = json.loads(text)
    return LatentPlan(
        conditions=tuple(
            Condition(c["id"], c["entity"], c["motion"], c["caption"],
                      frozenset(c["latent_frame_span"]))
            for c in doc["conditions"]
        ),
        latent_frames=tuple(
            tuple(LatentRegion(r["condition_id"], BBox(*r["bbox"]))
                  for r in regions)
            for regions in doc["latent_frames"]
        ),
    )

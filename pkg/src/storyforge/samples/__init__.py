"""Bundled sample plan texts used by the tests, demos, and replay backend."""

from importlib import resources

SAMPLE_NAMES = (
    "mermaid_story",
    "coral_reef_frame_plan",
    "teddy_forest_frame_plan",
)


def load(name: str) -> str:
    """Return the text of a bundled sample by name (see ``SAMPLE_NAMES``)."""
    if name not in SAMPLE_NAMES:
        raise KeyError(f"unknown sample {name!r}; available: {SAMPLE_NAMES}")
    return (resources.files(__package__) / f"{name}.txt").read_text(encoding="utf-8")

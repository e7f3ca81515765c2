"""Low-rank adapter algebra, region binding, and placement planning.

An adapter perturbs a frozen weight ``w0`` by ``scale * up @ down`` with
``down`` of shape (rank, k) and ``up`` of shape (d, rank).  ``up`` starts at
zero so a fresh adapter is a no-op.  Applied region-bound, each adapter only
sees the token columns its mask selects, so multiple adapters compose without
touching each other's regions: a column covered by exactly one mask equals
the classical globally merged output, and an uncovered column equals the base
layer output exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .regions import RegionMap

ROLES = ("spatial", "temporal")
KINDS = ("subject", "motion_temporal", "motion_spatial_pervideo")
LORA_SITES = ("q", "k", "v", "ffn")

__all__ = [
    "ROLES",
    "KINDS",
    "LORA_SITES",
    "LoraModule",
    "PlacementPlan",
    "AdapterEntry",
    "AdapterSet",
    "DimensionMismatch",
    "init_lora",
    "lora_apply",
    "merge_lora",
    "plan_lora_placement",
    "binding_token_mask",
    "save_adapter",
    "load_adapter",
    "save_adapter_set",
    "load_adapter_set",
]


class DimensionMismatch(ValueError):
    pass


@dataclass
class LoraModule:
    """One low-rank adapter: ``delta W = scale * up @ down``."""

    down: np.ndarray  # (rank, k)
    up: np.ndarray    # (d, rank)
    scale: float = 1.0
    role: str = "spatial"
    kind: str = "subject"

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise DimensionMismatch("adapter factors must be matrices")
        if self.down.shape[0] != self.up.shape[1]:
            raise DimensionMismatch(
                f"rank mismatch: down {self.down.shape}, up {self.up.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def d(self) -> int:
        return self.up.shape[0]

    @property
    def k(self) -> int:
        return self.down.shape[1]


def init_lora(d: int, k: int, rank: int = 4, rng: np.random.Generator | None = None,
              scale: float = 1.0, role: str = "spatial", kind: str = "subject",
              init_std: float = 0.02) -> LoraModule:
    """Fresh adapter: ``down`` small random, ``up`` zero (merged weight == base)."""
    rng = rng or np.random.default_rng(0)
    return LoraModule(
        down=rng.normal(0.0, init_std, size=(rank, k)),
        up=np.zeros((d, rank)),
        scale=scale,
        role=role,
        kind=kind,
    )


def lora_apply(w0: np.ndarray, bindings, x: np.ndarray) -> np.ndarray:
    """Base layer plus masked adapter contributions.

    ``bindings`` is a sequence of (LoraModule, token_mask) pairs; each mask is
    a length-c vector that zeroes the token columns outside the adapter's
    region before the low-rank path.
    """
    if w0.ndim != 2 or x.ndim != 2 or w0.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"w0 {w0.shape} incompatible with x {x.shape}")
    y = w0 @ x
    for lora, mask in bindings:
        mask = np.asarray(mask)
        if mask.shape != (x.shape[1],):
            raise DimensionMismatch(
                f"mask of length {mask.shape} does not cover {x.shape[1]} tokens")
        if lora.k != w0.shape[1] or lora.d != w0.shape[0]:
            raise DimensionMismatch(
                f"adapter ({lora.d}x{lora.k}) does not fit layer {w0.shape}")
        y = y + lora.scale * (lora.up @ (lora.down @ (x * mask[None, :])))
    return y


def merge_lora(w0: np.ndarray, lora: LoraModule) -> np.ndarray:
    """The classical globally merged weight ``w0 + scale * up @ down``."""
    if lora.k != w0.shape[1] or lora.d != w0.shape[0]:
        raise DimensionMismatch(
            f"adapter ({lora.d}x{lora.k}) does not fit layer {w0.shape}")
    return w0 + lora.scale * (lora.up @ lora.down)


@dataclass(frozen=True)
class PlacementPlan:
    """Role assigned to every transformer block."""

    assignments: dict[int, str]
    scheme: str

    def blocks_with_role(self, role: str) -> list[int]:
        return sorted(b for b, r in self.assignments.items() if r == role)


def plan_lora_placement(n_blocks: int, scheme: str = "interleaved") -> PlacementPlan:
    """Assign spatial/temporal roles to blocks.

    ``interleaved``: 0-based even blocks are spatial, odd temporal.
    ``half_half``: the first ceil(n/2) blocks are spatial, the rest temporal.
    """
    if n_blocks < 1:
        raise ValueError("need at least one block")
    if scheme == "interleaved":
        assignments = {b: ("spatial" if b % 2 == 0 else "temporal")
                       for b in range(n_blocks)}
    elif scheme == "half_half":
        cut = math.ceil(n_blocks / 2)
        assignments = {b: ("spatial" if b < cut else "temporal")
                       for b in range(n_blocks)}
    else:
        raise ValueError(f"unknown placement scheme {scheme!r}")
    return PlacementPlan(assignments=assignments, scheme=scheme)


def binding_token_mask(region_map: RegionMap, condition_id: int | None,
                       text_total: int) -> np.ndarray:
    """Token mask for one adapter over the [text segments, visual] sequence.

    Text tokens never receive adapters.  A visual token is selected when the
    binding's condition id is in its membership; ``None`` selects every
    visual token.
    """
    mask = np.zeros(text_total + region_map.grid.tokens)
    if condition_id is None:
        mask[text_total:] = 1.0
    else:
        for tok, members in enumerate(region_map.membership):
            if condition_id in members:
                mask[text_total + tok] = 1.0
    return mask


# ---------------------------------------------------------------------------
# Adapter sets (placement-aware collections used by the model)
# ---------------------------------------------------------------------------


@dataclass
class AdapterEntry:
    """An adapter attached to one injection site of one block, optionally
    bound to a region condition (``None`` = all visual tokens)."""

    block: int
    site: str
    lora: LoraModule
    condition_id: int | None = None

    def __post_init__(self):
        if self.site not in LORA_SITES:
            raise ValueError(f"unknown injection site {self.site!r}")


@dataclass
class AdapterSet:
    entries: list[AdapterEntry] = field(default_factory=list)

    def add(self, entry: AdapterEntry) -> None:
        self.entries.append(entry)

    def at(self, block: int, site: str) -> list[AdapterEntry]:
        return [e for e in self.entries if e.block == block and e.site == site]

    def extend(self, other: "AdapterSet") -> "AdapterSet":
        return AdapterSet(entries=self.entries + other.entries)

    def inference_only(self) -> "AdapterSet":
        """Drop per-video spatial motion adapters, which only serve training."""
        return AdapterSet(entries=[e for e in self.entries
                                   if e.lora.kind != "motion_spatial_pervideo"])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for e in self.entries:
            out.append(e.lora.down)
            out.append(e.lora.up)
        return out

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# Serialization: JSON header line + raw little-endian float32 factors
# ---------------------------------------------------------------------------


def save_adapter(lora: LoraModule) -> bytes:
    header = {"d": lora.d, "k": lora.k, "r": lora.rank, "scale": lora.scale,
              "role": lora.role, "kind": lora.kind}
    return (json.dumps(header).encode("ascii") + b"\n"
            + lora.down.astype("<f4").tobytes()
            + lora.up.astype("<f4").tobytes())


def load_adapter(data: bytes) -> LoraModule:
    newline = data.index(b"\n")
    header = json.loads(data[:newline])
    d, k, r = header["d"], header["k"], header["r"]
    body = np.frombuffer(data[newline + 1:], dtype="<f4")
    if body.size != r * k + d * r:
        raise ValueError(f"expected {r * k + d * r} floats, got {body.size}")
    return LoraModule(
        down=body[: r * k].reshape(r, k).astype(np.float64),
        up=body[r * k:].reshape(d, r).astype(np.float64),
        scale=header["scale"],
        role=header["role"],
        kind=header["kind"],
    )


def save_adapter_set(adapters: AdapterSet, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, e in enumerate(adapters.entries):
        name = f"block{e.block:02d}.{e.site}.{i:03d}.lora"
        (directory / name).write_bytes(save_adapter(e.lora))
        manifest.append({"file": name, "block": e.block, "site": e.site,
                         "condition_id": e.condition_id})
    (directory / "adapters.json").write_text(json.dumps(manifest, indent=2))


def load_adapter_set(directory: str | Path) -> AdapterSet:
    directory = Path(directory)
    manifest = json.loads((directory / "adapters.json").read_text())
    out = AdapterSet()
    for item in manifest:
        out.add(AdapterEntry(
            block=item["block"],
            site=item["site"],
            lora=load_adapter((directory / item["file"]).read_bytes()),
            condition_id=item["condition_id"],
        ))
    return out

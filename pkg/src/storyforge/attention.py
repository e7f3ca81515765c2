"""Region-routing attention masks over concatenated text and visual tokens.

The attended sequence is the concatenation of one text segment per condition
followed by all visual tokens.  In the default ``sr3a`` mode every visual
token attends to all visual tokens plus the text of each condition it belongs
to, while text tokens attend only within their own segment and to the visual
tokens of their condition.  ``hard_regional`` additionally restricts
visual-visual attention to tokens that share a condition; ``dense`` allows
everything.  Masks are stored as per-query rows of little-endian 64-bit
bitset words.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .regions import RegionMap

MODES = ("sr3a", "hard_regional", "dense")
_MODE_CODES = {m: i for i, m in enumerate(MODES)}
_MAGIC = b"SR3A"

__all__ = [
    "MODES",
    "SegmentLayout",
    "AttentionMask",
    "LayoutMismatch",
    "IndexOutOfRange",
    "build_attention_mask",
    "mask_query",
    "export_mask",
    "import_mask",
]


class LayoutMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class SegmentLayout:
    """Token extents: one text segment per condition, then visual tokens."""

    seg_lengths: tuple[int, ...]
    visual_tokens: int

    def __post_init__(self):
        if any(s < 1 for s in self.seg_lengths):
            raise ValueError("every text segment needs at least one token")
        if self.visual_tokens < 0:
            raise ValueError("visual token count must be non-negative")

    @property
    def n_conditions(self) -> int:
        return len(self.seg_lengths)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.seg_lengths:
            out.append(acc)
            acc += s
        return tuple(out)

    @property
    def text_total(self) -> int:
        return sum(self.seg_lengths)

    @property
    def total(self) -> int:
        return self.text_total + self.visual_tokens

    def segment_of(self, index: int) -> int | None:
        """Condition index owning a text position, or None for visual ones."""
        if index >= self.text_total:
            return None
        for i, (off, s) in enumerate(zip(self.offsets, self.seg_lengths)):
            if off <= index < off + s:
                return i
        raise IndexOutOfRange(f"index {index} out of range")


class AttentionMask:
    """Boolean routing structure stored as per-query bitset rows.

    Equality compares mode and mask bits; the layout is build-time metadata
    and is absent on masks read back from the binary format.
    """

    def __init__(self, size: int, mode: str, rows: np.ndarray,
                 layout: SegmentLayout | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mask mode {mode!r}")
        words = _words_for(size)
        if rows.shape != (size, words) or rows.dtype != np.uint64:
            raise ValueError(f"rows must be uint64 of shape ({size}, {words})")
        self.size = size
        self.mode = mode
        self.rows = rows
        self.layout = layout

    def query(self, q: int, k: int) -> bool:
        if not (0 <= q < self.size and 0 <= k < self.size):
            raise IndexOutOfRange(f"({q}, {k}) outside [0, {self.size})^2")
        return bool((int(self.rows[q, k >> 6]) >> (k & 63)) & 1)

    def to_dense(self) -> np.ndarray:
        """Full boolean matrix (queries x keys)."""
        as_bytes = self.rows.astype("<u8").view(np.uint8)
        bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
        return bits[:, : self.size].astype(bool)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return (self.size == other.size and self.mode == other.mode
                and np.array_equal(self.rows, other.rows))

    def __repr__(self) -> str:
        return f"AttentionMask(size={self.size}, mode={self.mode!r})"


def _words_for(size: int) -> int:
    return max(1, (size + 63) // 64)


def _pack(bits: np.ndarray, words: int) -> np.ndarray:
    """Pack a boolean vector into little-endian 64-bit words (padding zeroed)."""
    padded = np.zeros(words * 64, dtype=np.uint8)
    padded[: bits.size] = bits
    return np.packbits(padded, bitorder="little").view("<u8").astype(np.uint64)


def build_attention_mask(layout: SegmentLayout, region_map: RegionMap,
                         mode: str = "sr3a") -> AttentionMask:
    """Build the routing mask for a layout and its region map.

    The region map must describe exactly the layout's conditions and visual
    tokens.  The diagonal is always allowed in every mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    n = layout.n_conditions
    v = layout.visual_tokens
    if region_map.n_conditions != n:
        raise LayoutMismatch(
            f"layout has {n} conditions, region map has {region_map.n_conditions}")
    if region_map.grid.tokens != v:
        raise LayoutMismatch(
            f"layout has {v} visual tokens, region map has {region_map.grid.tokens}")

    size = layout.total
    words = _words_for(size)
    text_total = layout.text_total
    rows = np.zeros((size, words), dtype=np.uint64)

    if mode == "dense":
        rows[:] = _pack(np.ones(size, dtype=np.uint8), words)
        return AttentionMask(size, mode, rows, layout)

    member = np.zeros((v, n), dtype=bool)
    for tok, ids in enumerate(region_map.membership):
        for i in ids:
            member[tok, i] = True

    # Per-condition key bitsets: the text segment, and the member visual tokens.
    text_words = np.zeros((n, words), dtype=np.uint64)
    vis_member_words = np.zeros((n, words), dtype=np.uint64)
    for i, (off, seg) in enumerate(zip(layout.offsets, layout.seg_lengths)):
        bits = np.zeros(size, dtype=np.uint8)
        bits[off : off + seg] = 1
        text_words[i] = _pack(bits, words)
        bits = np.zeros(size, dtype=np.uint8)
        bits[text_total:][member[:, i]] = 1
        vis_member_words[i] = _pack(bits, words)

    # Text queries: own segment plus own visual tokens.
    for i, (off, seg) in enumerate(zip(layout.offsets, layout.seg_lengths)):
        rows[off : off + seg] = text_words[i] | vis_member_words[i]

    # Visual queries: OR the key sets of every owning condition.
    if v:
        selected = np.where(member[:, :, None], text_words[None, :, :],
                            np.uint64(0))
        vis_rows = np.bitwise_or.reduce(selected, axis=1)
        if mode == "sr3a":
            all_visual = np.zeros(size, dtype=np.uint8)
            all_visual[text_total:] = 1
            vis_rows |= _pack(all_visual, words)
        else:  # hard_regional: visual keys sharing at least one condition
            selected = np.where(member[:, :, None], vis_member_words[None, :, :],
                                np.uint64(0))
            vis_rows |= np.bitwise_or.reduce(selected, axis=1)
        rows[text_total:] = vis_rows

    # The diagonal is always allowed.
    q = np.arange(size)
    rows[q, q >> 6] |= np.uint64(1) << (q & 63).astype(np.uint64)
    return AttentionMask(size, mode, rows, layout)


def mask_query(mask: AttentionMask, q: int, k: int) -> bool:
    """Whether query position ``q`` may attend to key position ``k``."""
    return mask.query(q, k)


def export_mask(mask: AttentionMask, fmt: str = "bitset_binary") -> bytes:
    """Serialize a mask.

    ``pgm``: binary P5, 255 = allowed, 0 = masked.  ``bitset_binary``: magic
    "SR3A", u32 size, u8 mode code, then one row of ceil(S/64) little-endian
    64-bit words per query.
    """
    if fmt == "pgm":
        header = f"P5\n{mask.size} {mask.size}\n255\n".encode("ascii")
        dense = mask.to_dense()
        return header + (dense.astype(np.uint8) * 255).tobytes()
    if fmt == "bitset_binary":
        header = _MAGIC + struct.pack("<IB", mask.size, _MODE_CODES[mask.mode])
        return header + mask.rows.astype("<u8").tobytes()
    raise ValueError(f"unknown export format {fmt!r}")


def import_mask(data: bytes) -> AttentionMask:
    """Read a mask from its ``bitset_binary`` serialization."""
    if data[:4] != _MAGIC:
        raise ValueError("not a bitset mask: bad magic")
    size, mode_code = struct.unpack("<IB", data[4:9])
    mode = MODES[mode_code]
    words = _words_for(size)
    body = np.frombuffer(data[9:], dtype="<u8")
    if body.size != size * words:
        raise ValueError(f"expected {size * words} words, got {body.size}")
    return AttentionMask(size, mode, body.reshape(size, words).astype(np.uint64))

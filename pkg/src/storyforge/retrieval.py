"""Four-stage motion-clip retrieval over a captioned video corpus.

Stage 1 ranks captions lexically with BM25 against a "person is <motion>"
query; stage 2 filters on duration, frame count, and aspect ratio; stage 3
cuts each surviving video into person-centered clips from precomputed track
spans; stage 4 scores every clip with pluggable frame-level and clip-level
similarity scorers, keeps the ones whose average beats the threshold (capped
at ``max_keep``), and falls back to the best few when too little passes.
Everything sorts with ascending-id tie-breaks so runs are reproducible.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

__all__ = [
    "VideoRecord",
    "TrackSpan",
    "ClipCandidate",
    "ScoredClip",
    "RetrievalConfig",
    "FrameScorer",
    "ClipScorer",
    "EmptyCorpus",
    "EmptyMotion",
    "ScorerUnavailable",
    "tokenize",
    "Bm25Index",
    "bm25_rank",
    "build_query",
    "filter_attributes",
    "segment_clips",
    "sample_frame_indices",
    "score_clip",
    "select_motion_videos",
    "retrieve_motion",
    "overlap_frame_scorer",
    "overlap_clip_scorer",
    "load_records_jsonl",
    "load_tracks_jsonl",
    "scored_clips_to_json",
]


class EmptyCorpus(ValueError):
    pass


class EmptyMotion(ValueError):
    pass


class ScorerUnavailable(ValueError):
    pass


@dataclass(frozen=True)
class VideoRecord:
    id: str
    caption: str
    duration_s: float
    n_frames: int
    width: int
    height: int


@dataclass(frozen=True)
class TrackSpan:
    record_id: str
    track_id: int
    frame_start: int
    frame_end: int  # inclusive

    @property
    def length(self) -> int:
        return self.frame_end - self.frame_start + 1


@dataclass(frozen=True)
class ClipCandidate:
    record_id: str
    frame_start: int
    frame_end: int  # inclusive
    caption: str

    @property
    def length(self) -> int:
        return self.frame_end - self.frame_start + 1


@dataclass(frozen=True)
class ScoredClip:
    clip: ClipCandidate
    frame_score: float
    clip_score: float

    @property
    def avg(self) -> float:
        return (self.frame_score + self.clip_score) / 2.0


@dataclass(frozen=True)
class RetrievalConfig:
    pool_size: int = 400
    min_duration_s: float = 2.0
    min_frames: int = 40
    min_aspect: float = 0.9
    min_clip_len_frames: int = 16
    score_threshold: float = 0.2
    max_keep: int = 20
    fallback_keep: int = 4
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    query_prefix: str = "person is "
    threshold_per_scorer: bool = False

    def __post_init__(self):
        if self.fallback_keep > self.max_keep:
            raise ValueError("fallback_keep must not exceed max_keep")


class FrameScorer(Protocol):
    def __call__(self, clip: ClipCandidate, frame_index: int, query: str) -> float: ...


class ClipScorer(Protocol):
    def __call__(self, clip: ClipCandidate, query: str) -> float: ...


# ---------------------------------------------------------------------------
# Stage 1: BM25
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Bm25Index:
    """Inverted statistics over record captions.

    Per-term idf uses ``ln(1 + (N - df + 0.5) / (df + 0.5))``, which is
    strictly positive, so a caption scores 0 exactly when it contains no
    query term.
    """

    def __init__(self, records: Iterable[VideoRecord], k1: float = 1.2,
                 b: float = 0.75):
        self.records = sorted(records, key=lambda r: r.id)
        if not self.records:
            raise EmptyCorpus("cannot index an empty corpus")
        self.k1 = k1
        self.b = b
        self.term_freqs = [Counter(tokenize(r.caption)) for r in self.records]
        self.doc_lens = [sum(tf.values()) for tf in self.term_freqs]
        self.avg_len = sum(self.doc_lens) / len(self.doc_lens)
        df: Counter = Counter()
        for tf in self.term_freqs:
            df.update(tf.keys())
        n = len(self.records)
        self.idf = {t: math.log(1.0 + (n - d + 0.5) / (d + 0.5))
                    for t, d in df.items()}

    def score(self, query: str) -> list[float]:
        terms = tokenize(query)
        scores = []
        for tf, dl in zip(self.term_freqs, self.doc_lens):
            norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_len)
            s = 0.0
            for term in terms:
                f = tf.get(term, 0)
                if f:
                    s += self.idf[term] * f * (self.k1 + 1.0) / (f + norm)
            scores.append(s)
        return scores


def bm25_rank(records: Iterable[VideoRecord], query: str, k: int,
              cfg: RetrievalConfig = RetrievalConfig()) -> list[tuple[str, float]]:
    """Top-k (record id, score), score-descending with id tie-breaks."""
    index = Bm25Index(records, k1=cfg.bm25_k1, b=cfg.bm25_b)
    scores = index.score(query)
    ranked = sorted(zip((r.id for r in index.records), scores),
                    key=lambda pair: (-pair[1], pair[0]))
    return ranked[:k]


def build_query(motion: str, cfg: RetrievalConfig = RetrievalConfig()) -> str:
    """Prefix the motion ("sitting" -> "person is sitting"), space-normalized."""
    if not motion.strip():
        raise EmptyMotion("motion text is empty")
    return " ".join((cfg.query_prefix + motion).split())


# ---------------------------------------------------------------------------
# Stage 2: attribute filters
# ---------------------------------------------------------------------------


def filter_attributes(records: Iterable[VideoRecord],
                      cfg: RetrievalConfig = RetrievalConfig()) -> list[VideoRecord]:
    """Keep records meeting the duration, frame-count, and aspect minimums."""
    return [r for r in records
            if r.duration_s >= cfg.min_duration_s
            and r.n_frames >= cfg.min_frames
            and r.width / r.height >= cfg.min_aspect]


# ---------------------------------------------------------------------------
# Stage 3: clip segmentation from track spans
# ---------------------------------------------------------------------------


def segment_clips(record: VideoRecord, tracks: Iterable[TrackSpan],
                  cfg: RetrievalConfig = RetrievalConfig()) -> list[ClipCandidate]:
    """One candidate per maximal contiguous span of each track.

    Spans of the same track that overlap or touch are merged; merged spans
    shorter than ``min_clip_len_frames`` are dropped.  Clips from different
    tracks may overlap.
    """
    by_track: dict[int, list[TrackSpan]] = {}
    for span in tracks:
        if span.record_id != record.id:
            continue
        if not 0 <= span.frame_start <= span.frame_end < record.n_frames:
            raise ValueError(
                f"track span [{span.frame_start}, {span.frame_end}] outside "
                f"record {record.id} with {record.n_frames} frames")
        by_track.setdefault(span.track_id, []).append(span)

    clips = []
    for track_id in sorted(by_track):
        spans = sorted(by_track[track_id], key=lambda s: s.frame_start)
        start, end = spans[0].frame_start, spans[0].frame_end
        merged = []
        for span in spans[1:]:
            if span.frame_start <= end + 1:
                end = max(end, span.frame_end)
            else:
                merged.append((start, end))
                start, end = span.frame_start, span.frame_end
        merged.append((start, end))
        for lo, hi in merged:
            if hi - lo + 1 >= cfg.min_clip_len_frames:
                clips.append(ClipCandidate(record_id=record.id, frame_start=lo,
                                           frame_end=hi, caption=record.caption))
    return clips


# ---------------------------------------------------------------------------
# Stage 4: scoring and selection
# ---------------------------------------------------------------------------


def sample_frame_indices(clip: ClipCandidate, count: int = 8) -> list[int]:
    """Evenly spaced frame indices across the clip span, endpoints included;
    spans shorter than ``count`` repeat indices on the uniform grid."""
    length = clip.length
    if count == 1:
        return [clip.frame_start]
    return [clip.frame_start + round(i * (length - 1) / (count - 1))
            for i in range(count)]


def score_clip(frame_scorer: FrameScorer, clip_scorer: ClipScorer,
               clip: ClipCandidate, query: str) -> ScoredClip:
    """Average the frame scorer over 8 sampled frames; run the clip scorer on
    the whole span; the selection score is the mean of the two."""
    if frame_scorer is None or clip_scorer is None:
        raise ScorerUnavailable("both a frame scorer and a clip scorer are required")
    indices = sample_frame_indices(clip, 8)
    frame_score = sum(frame_scorer(clip, i, query) for i in indices) / len(indices)
    return ScoredClip(clip=clip, frame_score=frame_score,
                      clip_score=clip_scorer(clip, query))


def _clip_sort_key(scored: ScoredClip):
    return (-scored.avg, scored.clip.record_id, scored.clip.frame_start)


def select_motion_videos(scored: Iterable[ScoredClip],
                         cfg: RetrievalConfig = RetrievalConfig()) -> list[ScoredClip]:
    """Threshold, cap, and fall back.

    Clips whose average score strictly exceeds the threshold are kept, best
    first, at most ``max_keep``.  If fewer than ``fallback_keep`` pass, the
    best ``fallback_keep`` by average are returned regardless of threshold
    (or the whole pool when it is smaller than that).
    """
    pool = sorted(scored, key=_clip_sort_key)
    if cfg.threshold_per_scorer:
        passing = [s for s in pool if s.frame_score > cfg.score_threshold
                   and s.clip_score > cfg.score_threshold]
    else:
        passing = [s for s in pool if s.avg > cfg.score_threshold]
    if len(passing) >= cfg.fallback_keep:
        return passing[: cfg.max_keep]
    return pool[: cfg.fallback_keep]


def retrieve_motion(records: Iterable[VideoRecord],
                    tracks: dict[str, list[TrackSpan]],
                    motion: str,
                    frame_scorer: FrameScorer,
                    clip_scorer: ClipScorer,
                    cfg: RetrievalConfig = RetrievalConfig()) -> list[ScoredClip]:
    """Run the full pipeline for one motion; at most ``max_keep`` clips."""
    records = list(records)
    query = build_query(motion, cfg)
    ranked = bm25_rank(records, query, cfg.pool_size, cfg)
    by_id = {r.id: r for r in records}
    pool = [by_id[record_id] for record_id, _ in ranked]
    kept = filter_attributes(pool, cfg)
    scored = []
    for record in kept:
        for clip in segment_clips(record, tracks.get(record.id, []), cfg):
            scored.append(score_clip(frame_scorer, clip_scorer, clip, query))
    return select_motion_videos(scored, cfg)


# ---------------------------------------------------------------------------
# Deterministic mock scorers (word overlap; stand-ins for learned models)
# ---------------------------------------------------------------------------


def _overlap(caption: str, query: str) -> float:
    a, b = set(tokenize(caption)), set(tokenize(query))
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def overlap_frame_scorer(clip: ClipCandidate, frame_index: int, query: str) -> float:
    return _overlap(clip.caption, query)


def overlap_clip_scorer(clip: ClipCandidate, query: str) -> float:
    return _overlap(clip.caption, query)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_records_jsonl(path: str | Path) -> list[VideoRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        records.append(VideoRecord(
            id=doc["id"], caption=doc["caption"], duration_s=doc["duration_s"],
            n_frames=doc["n_frames"], width=doc["width"], height=doc["height"],
        ))
    return records


def load_tracks_jsonl(path: str | Path) -> dict[str, list[TrackSpan]]:
    tracks: dict[str, list[TrackSpan]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        span = TrackSpan(record_id=doc["record_id"], track_id=doc["track_id"],
                         frame_start=doc["frame_start"], frame_end=doc["frame_end"])
        tracks.setdefault(span.record_id, []).append(span)
    return tracks


def scored_clips_to_json(clips: list[ScoredClip]) -> str:
    return json.dumps([
        {"record_id": s.clip.record_id, "frame_start": s.clip.frame_start,
         "frame_end": s.clip.frame_end, "caption": s.clip.caption,
         "frame_score": s.frame_score, "clip_score": s.clip_score,
         "avg": s.avg}
        for s in clips
    ], indent=2)

"""Shared data model: boundaries, instances, score sequences, description store.

All types are immutable value objects once constructed and safe to share
across workers.  File formats are JSONL; floats are serialized with Python's
shortest round-trip repr, so save/load is bit-identical.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .autodiff import DiffValue, value_of

MAX_FRAMES = 200
MAX_QUERY_TOKENS = 20


@dataclass(frozen=True)
class TemporalBoundary:
    """A (center, width) pair on the normalized [0,1] timeline.

    The sigmoid prediction head keeps both components in (0,1); raw values
    outside that range are tolerated here and handled by clamping, never
    rejected.  Components may be floats or live graph nodes.
    """

    center: float | DiffValue
    width: float | DiffValue

    def as_floats(self) -> "TemporalBoundary":
        return TemporalBoundary(float(value_of(self.center)), float(value_of(self.width)))

    def interval(self) -> tuple[float, float]:
        """Unclamped (sta, end) = (c - w/2, c + w/2)."""
        c = float(value_of(self.center))
        w = float(value_of(self.width))
        return c - w / 2.0, c + w / 2.0


def clamp_interval(b: TemporalBoundary) -> tuple[float, float]:
    """The boundary's (sta, end) clamped into [0,1], with sta <= end."""
    sta, end = b.interval()
    sta = max(0.0, sta)
    end = min(1.0, end)
    if sta > end:
        sta = end = min(max(b.interval()[0], 0.0), 1.0)
    return sta, end


class ScoreKind(enum.Enum):
    QDM = "QDM"
    QFM = "QFM"


@dataclass(frozen=True)
class FrameScoreSequence:
    """Per-frame match scores in [0,1] after per-video min-max normalization."""

    scores: np.ndarray
    kind: ScoreKind

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("FrameScoreSequence: scores must be 1-D")
        if np.any(scores < 0.0) or np.any(scores > 1.0):
            raise ValueError("FrameScoreSequence: scores must lie in [0,1]")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True)
class MatchScorePair:
    """Positive and negative video-query matching scores (cosines)."""

    m_pos: float | DiffValue
    m_neg: float | DiffValue


@dataclass(frozen=True)
class GroundingInstance:
    """One video-query pair: frame features, query tokens/embedding, optional GT.

    The ground-truth interval is normalized to [0,1] and used for evaluation
    only, never during training.
    """

    video_id: str
    frames: np.ndarray
    query_tokens: tuple[str, ...]
    query_embedding: np.ndarray
    gt: tuple[float, float] | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("GroundingInstance: frames must be a (T, C) array")
        if not 1 <= frames.shape[0] <= MAX_FRAMES:
            raise ValueError(f"GroundingInstance: T={frames.shape[0]} outside [1, {MAX_FRAMES}]")
        tokens = tuple(self.query_tokens)
        if len(tokens) > MAX_QUERY_TOKENS:
            raise ValueError(f"GroundingInstance: query has {len(tokens)} tokens, max {MAX_QUERY_TOKENS}")
        emb = np.asarray(self.query_embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size != frames.shape[1]:
            raise ValueError("GroundingInstance: query_embedding dimension must match frames")
        if self.gt is not None:
            sta, end = float(self.gt[0]), float(self.gt[1])
            if sta > end:
                raise ValueError("GroundingInstance: gt interval must have sta <= end")
            object.__setattr__(self, "gt", (sta, end))
        frames.setflags(write=False)
        emb.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "query_tokens", tokens)
        object.__setattr__(self, "query_embedding", emb)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def timeline(self) -> np.ndarray:
        """Frame-center times t_i = (i + 0.5) / T, strictly inside (0,1)."""
        t = self.frames.shape[0]
        return (np.arange(t, dtype=np.float64) + 0.5) / t

    def to_json_obj(self) -> dict:
        return {
            "video_id": self.video_id,
            "frames": [list(row) for row in self.frames],
            "query_tokens": list(self.query_tokens),
            "query_embedding": list(self.query_embedding),
            "gt": list(self.gt) if self.gt is not None else None,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "GroundingInstance":
        gt = obj.get("gt")
        return cls(
            video_id=obj["video_id"],
            frames=np.array(obj["frames"], dtype=np.float64),
            query_tokens=tuple(obj["query_tokens"]),
            query_embedding=np.array(obj["query_embedding"], dtype=np.float64),
            gt=tuple(gt) if gt is not None else None,
        )


class DescriptionDict:
    """Per-video, per-frame store of generated frame descriptions.

    Lookups are deterministic; iteration is sorted by (video_id, frame_index,
    prompt_id).  Built once before training, read-only afterwards.
    """

    def __init__(self):
        self._entries: dict[tuple[str, int], list[tuple[int, str]]] = {}
        self._frames: dict[str, set[int]] = {}

    def add(self, video_id: str, frame_index: int, prompt_id: int, text: str) -> None:
        key = (video_id, int(frame_index))
        self._entries.setdefault(key, []).append((int(prompt_id), text))
        self._entries[key].sort()
        self._frames.setdefault(video_id, set()).add(int(frame_index))

    def has(self, video_id: str, frame_index: int) -> bool:
        return (video_id, int(frame_index)) in self._entries

    def descriptions(self, video_id: str, frame_index: int) -> list[str]:
        key = (video_id, int(frame_index))
        if key not in self._entries:
            raise KeyError(f"no descriptions for video {video_id!r} frame {frame_index}")
        return [text for _, text in self._entries[key]]

    def frame_indices(self, video_id: str) -> list[int]:
        return sorted(self._frames.get(video_id, ()))

    def video_ids(self) -> list[str]:
        return sorted(self._frames)

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def iter_rows(self) -> Iterator[dict]:
        for (video_id, frame_index) in sorted(self._entries):
            for prompt_id, text in self._entries[(video_id, frame_index)]:
                yield {
                    "video_id": video_id,
                    "frame_index": frame_index,
                    "prompt_id": prompt_id,
                    "text": text,
                }

    def validate_counts(self, n_p: int) -> None:
        bad = [k for k, v in sorted(self._entries.items()) if len(v) != n_p]
        if bad:
            raise ValueError(f"DescriptionDict: entries with count != {n_p}: {bad[:10]}")

    def save(self, path: str | Path, meta: Mapping | None = None) -> None:
        dump_jsonl(path, self.iter_rows(), meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "DescriptionDict":
        d = cls()
        rows, _ = load_jsonl(path)
        for row in rows:
            d.add(row["video_id"], row["frame_index"], row["prompt_id"], row["text"])
        return d


def json_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def dump_jsonl(path: str | Path, rows: Iterable[Mapping], meta: Mapping | None = None) -> None:
    """Write rows as JSONL; an optional leading {"_meta": ...} line carries provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json_line({"_meta": dict(meta)}) + "\n")
        for row in rows:
            fh.write(json_line(row) + "\n")


def load_jsonl(path: str | Path) -> tuple[list[dict], dict | None]:
    """Read JSONL rows, splitting off the leading meta line when present."""
    rows: list[dict] = []
    meta: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if i == 0 and isinstance(obj, dict) and set(obj) == {"_meta"}:
                meta = obj["_meta"]
                continue
            rows.append(obj)
    return rows, meta


def save_dataset(path: str | Path, instances: Iterable[GroundingInstance], meta: Mapping | None = None) -> None:
    dump_jsonl(path, (inst.to_json_obj() for inst in instances), meta=meta)


def load_dataset(path: str | Path) -> tuple[list[GroundingInstance], dict | None]:
    rows, meta = load_jsonl(path)
    return [GroundingInstance.from_json_obj(r) for r in rows], meta

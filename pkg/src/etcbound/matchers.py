"""Frame score sequences from query-description and query-frame matching.

The deterministic hashed bag-of-tokens embedder stands in for a sentence
encoder at desk scale; a remote scorer can be swapped in through the same
similarity callable and its raw scores still pass through the local min-max
normalization.  Scores depend only on fixed inputs, never on model
parameters, so they are computed once per instance and cached.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import FrameScoreSequence, GroundingInstance, ScoreKind, DescriptionDict, dump_jsonl, load_jsonl
from .seeding import _digest, np_substream, stable_hash

DEFAULT_HASH_SIZE = 4096


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class TokenEmbedder:
    """Deterministic hashed bag-of-tokens embedding, L2-normalized.

    Each token hashes to one of ``hash_size`` buckets; each bucket owns a
    fixed pseudo-random direction.  The same token sequence always maps to
    the same vector; an empty sequence maps to the zero vector, whose cosine
    with anything is defined as 0.
    """

    def __init__(self, dim: int, hash_size: int = DEFAULT_HASH_SIZE, seed: int = 0):
        if dim < 1 or hash_size < 1:
            raise ValueError("dim and hash_size must be positive")
        self.dim = int(dim)
        self.hash_size = int(hash_size)
        self.seed = int(seed)
        self._bucket_vecs: dict[int, np.ndarray] = {}
        self._bag_cache: dict[tuple[str, ...], np.ndarray] = {}

    def _bucket(self, token: str) -> int:
        return _digest(self.seed, "token", token) % self.hash_size

    def _bucket_vec(self, bucket: int) -> np.ndarray:
        vec = self._bucket_vecs.get(bucket)
        if vec is None:
            vec = np_substream(self.seed, "bucket", bucket).standard_normal(self.dim)
            vec.setflags(write=False)
            self._bucket_vecs[bucket] = vec
        return vec

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        cached = self._bag_cache.get(key)
        if cached is not None:
            return cached
        if not key:
            out = np.zeros(self.dim)
        else:
            out = np.zeros(self.dim)
            for tok in key:
                out += self._bucket_vec(self._bucket(tok))
            norm = float(np.linalg.norm(out))
            if norm > 0:
                out = out / norm
        out.setflags(write=False)
        self._bag_cache[key] = out
        return out

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed(tokenize(text))


def default_embedder(dim: int, hash_size: int = DEFAULT_HASH_SIZE) -> TokenEmbedder:
    """The shared fixed-seed embedder used across the whole pipeline."""
    return TokenEmbedder(dim=dim, hash_size=hash_size, seed=0)


def cosine_np(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv)


def minmax_normalize(raw: Sequence[float] | np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant sequence maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("minmax_normalize: non-finite input")
    lo = float(raw.min())
    hi = float(raw.max())
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


SimilarityFn = Callable[[str, list[str]], list[float]]


def qdm_scores(
    query_tokens: Sequence[str],
    ddict: DescriptionDict,
    video_id: str,
    n_frames: int,
    embedder: TokenEmbedder,
    agg: str = "max",
    similarity: SimilarityFn | None = None,
) -> FrameScoreSequence:
    """Per-frame query-description match, min-max normalized per video.

    Each frame's raw score aggregates (max by default, mean optionally) the
    similarities between the query and that frame's stored descriptions.
    """
    if agg not in ("max", "mean"):
        raise ValueError(f"unknown aggregation {agg!r}")
    missing = [f for f in range(n_frames) if not ddict.has(video_id, f)]
    if missing:
        raise KeyError(f"dictionary misses video {video_id!r} frames {missing}")

    per_frame_descs = [ddict.descriptions(video_id, f) for f in range(n_frames)]
    if similarity is not None:
        flat = [d for descs in per_frame_descs for d in descs]
        sims = list(similarity(" ".join(query_tokens), flat))
        if len(sims) != len(flat):
            raise ValueError("similarity backend returned wrong number of scores")
        raw = []
        pos = 0
        for descs in per_frame_descs:
            chunk = sims[pos : pos + len(descs)]
            pos += len(descs)
            raw.append(max(chunk) if agg == "max" else sum(chunk) / len(chunk))
    else:
        q = embedder.embed(query_tokens)
        raw = []
        for descs in per_frame_descs:
            vals = [cosine_np(q, embedder.embed_text(d)) for d in descs]
            raw.append(max(vals) if agg == "max" else sum(vals) / len(vals))
    return FrameScoreSequence(minmax_normalize(raw), ScoreKind.QDM)


def qfm_scores(query_embedding: np.ndarray, instance: GroundingInstance) -> FrameScoreSequence:
    """Per-frame query-feature cosine, min-max normalized per video."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (instance.feature_dim,):
        raise ValueError("query embedding dimension mismatch")
    raw = [cosine_np(q, instance.frames[i]) for i in range(instance.n_frames)]
    return FrameScoreSequence(minmax_normalize(raw), ScoreKind.QFM)


def query_hash(query_tokens: Sequence[str]) -> str:
    return stable_hash("query", *query_tokens)


def score_dataset(
    instances: Iterable[GroundingInstance],
    ddict: DescriptionDict,
    embedder: TokenEmbedder,
    agg: str = "max",
    similarity: SimilarityFn | None = None,
) -> dict[str, dict[ScoreKind, FrameScoreSequence]]:
    """Precompute the QDM and QFM sequences for every instance."""
    out: dict[str, dict[ScoreKind, FrameScoreSequence]] = {}
    for inst in instances:
        out[inst.video_id] = {
            ScoreKind.QDM: qdm_scores(
                inst.query_tokens, ddict, inst.video_id, inst.n_frames, embedder, agg, similarity
            ),
            ScoreKind.QFM: qfm_scores(inst.query_embedding, inst),
        }
    return out


def save_scores(
    path,
    scores: Mapping[str, Mapping[ScoreKind, FrameScoreSequence]],
    query_hashes: Mapping[str, str],
    meta: Mapping | None = None,
) -> None:
    rows = []
    for video_id in sorted(scores):
        for kind in (ScoreKind.QDM, ScoreKind.QFM):
            seq = scores[video_id][kind]
            rows.append(
                {
                    "video_id": video_id,
                    "query_hash": query_hashes[video_id],
                    "kind": kind.value,
                    "scores": list(seq.scores),
                }
            )
    dump_jsonl(path, rows, meta=meta)


def load_scores(path) -> tuple[dict[str, dict[ScoreKind, FrameScoreSequence]], dict | None]:
    rows, meta = load_jsonl(path)
    out: dict[str, dict[ScoreKind, FrameScoreSequence]] = {}
    for row in rows:
        kind = ScoreKind(row["kind"])
        out.setdefault(row["video_id"], {})[kind] = FrameScoreSequence(
            np.array(row["scores"], dtype=np.float64), kind
        )
    return out, meta

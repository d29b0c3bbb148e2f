"""Description dictionary construction and boundary expansion.

The dictionary is built once before training: every frame of every video
gets n_p descriptions, one per prompt, persisted as JSONL.  During training
the current initial boundary selects frames whose stored descriptions are
pooled and sampled to produce the expanded-branch text; the sampling step is
discrete, so no gradient flows through it.
"""

from __future__ import annotations

import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import DescriptionDict, GroundingInstance, TemporalBoundary, clamp_interval
from .matchers import TokenEmbedder
from .model import LiftedPredictor, predict_boundary
from .seeding import substream

DEFAULT_PROMPTS = (
    "Generate captions for that video frame.",
    "Provide a detailed description of the following frame.",
    "Describe the following frame in detail.",
    "Elaborate on the details of this frame in your own words.",
    "Describe the image concisely.",
)


@dataclass(frozen=True)
class ExpansionConfig:
    n_p: int = 5
    n_f: int = 5
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    rng_seed: int = 0
    max_in_flight: int = 1

    def __post_init__(self):
        if self.n_p < 1 or self.n_f < 1:
            raise ValueError("n_p and n_f must be at least 1")
        if not self.prompts:
            raise ValueError("prompt list must not be empty")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        object.__setattr__(self, "prompts", tuple(self.prompts))


@dataclass(frozen=True)
class CaptionRequest:
    video_id: str
    frame_index: int
    frame_payload: list[float] | str | None
    prompts: tuple[str, ...]


class CaptionProvider(Protocol):
    def describe(self, request: CaptionRequest) -> list[str]: ...


class CaptionProviderError(RuntimeError):
    """A provider failed to produce descriptions for a frame."""


class DictionaryBuildError(RuntimeError):
    """Dictionary construction failed; lists every missing (video, frame)."""

    def __init__(self, missing: list[tuple[str, int]]):
        self.missing = missing
        preview = ", ".join(f"{v}:{f}" for v, f in missing[:8])
        more = "" if len(missing) <= 8 else f" (+{len(missing) - 8} more)"
        super().__init__(f"caption provider failed for {len(missing)} frames: {preview}{more}")


class EchoProvider:
    """Offline stub: describes a frame by echoing its known tokens.

    ``frame_tokens`` maps video_id to the per-frame token lists (the synthetic
    truth sidecar).  Optional token dropout makes the n_p descriptions of a
    frame differ; dropout keeps at least one token.
    """

    def __init__(self, frame_tokens: Mapping[str, Sequence[Sequence[str]]], dropout: float = 0.0, seed: int = 0):
        self._frame_tokens = {v: [tuple(t) for t in frames] for v, frames in frame_tokens.items()}
        self._dropout = float(dropout)
        self._seed = int(seed)

    @classmethod
    def from_truth(cls, truth: Mapping[str, Mapping], dropout: float = 0.0, seed: int = 0) -> "EchoProvider":
        return cls({v: rec["frame_tokens"] for v, rec in truth.items()}, dropout=dropout, seed=seed)

    def describe(self, request: CaptionRequest) -> list[str]:
        try:
            tokens = self._frame_tokens[request.video_id][request.frame_index]
        except (KeyError, IndexError) as exc:
            raise CaptionProviderError(f"no tokens for {request.video_id}:{request.frame_index}") from exc
        out = []
        for j in range(len(request.prompts)):
            kept = list(tokens)
            if self._dropout > 0 and len(kept) > 1:
                rng = substream(self._seed, "echo", request.video_id, request.frame_index, j)
                kept = [t for t in kept if rng.random() >= self._dropout] or [tokens[0]]
            out.append(" ".join(kept))
        return out


class ReplayProvider:
    """Serves descriptions recorded in an existing dictionary file."""

    def __init__(self, ddict: DescriptionDict):
        self._ddict = ddict

    def describe(self, request: CaptionRequest) -> list[str]:
        try:
            descs = self._ddict.descriptions(request.video_id, request.frame_index)
        except KeyError as exc:
            raise CaptionProviderError(str(exc)) from exc
        if len(descs) < len(request.prompts):
            raise CaptionProviderError(
                f"replay has {len(descs)} descriptions for {request.video_id}:{request.frame_index}, "
                f"need {len(request.prompts)}"
            )
        return descs[: len(request.prompts)]


class HttpCaptionProvider:
    """Caption/similarity client for the HTTP scoring service.

    Retries with exponential backoff on 503 and transport errors; other HTTP
    errors fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        max_retries: int = 4,
        backoff_base: float = 0.25,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_retries = int(max_retries)
        self.backoff_base = float(backoff_base)
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, path: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._client.post(self.base_url + path, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if resp.status_code == 503:
                last_error = CaptionProviderError(f"{path}: service unavailable (503)")
                continue
            if resp.status_code != 200:
                raise CaptionProviderError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise CaptionProviderError(f"{path}: giving up after {self.max_retries + 1} attempts: {last_error}")

    def describe(self, request: CaptionRequest) -> list[str]:
        payload = {
            "video_id": request.video_id,
            "frame_index": request.frame_index,
            "frame_payload": request.frame_payload,
            "prompts": list(request.prompts),
        }
        body = self._post("/describe", payload)
        descriptions = body.get("descriptions")
        if not isinstance(descriptions, list) or len(descriptions) != len(request.prompts):
            raise CaptionProviderError("/describe returned a malformed description list")
        return [str(d) for d in descriptions]

    def similarity(self, query: str, candidates: list[str]) -> list[float]:
        body = self._post("/similarity", {"query": query, "candidates": candidates})
        scores = body.get("scores")
        if not isinstance(scores, list) or len(scores) != len(candidates):
            raise CaptionProviderError("/similarity returned a malformed score list")
        return [float(x) for x in scores]


def _request_prompts(cfg: ExpansionConfig) -> tuple[tuple[str, ...], list[int]]:
    # n_p descriptions per frame; prompts cycle when n_p exceeds the prompt count
    prompt_ids = [j % len(cfg.prompts) for j in range(cfg.n_p)]
    return tuple(cfg.prompts[pid] for pid in prompt_ids), prompt_ids


def build_dictionary(
    dataset: Sequence[GroundingInstance],
    provider: CaptionProvider,
    cfg: ExpansionConfig,
) -> DescriptionDict:
    """Generate n_p descriptions for every frame of every video.

    Runs strictly before training.  Provider failures are collected and the
    build fails with the complete list of missing (video, frame) pairs.
    Given the same provider and seed the result is byte-identical on re-run.
    """
    prompts, prompt_ids = _request_prompts(cfg)
    jobs: list[CaptionRequest] = []
    for inst in dataset:
        for f in range(inst.n_frames):
            jobs.append(
                CaptionRequest(
                    video_id=inst.video_id,
                    frame_index=f,
                    frame_payload=[float(x) for x in inst.frames[f]],
                    prompts=prompts,
                )
            )

    def run(req: CaptionRequest) -> list[str]:
        descs = provider.describe(req)
        if len(descs) != cfg.n_p:
            raise CaptionProviderError(
                f"provider returned {len(descs)} descriptions for {req.video_id}:{req.frame_index}, "
                f"expected {cfg.n_p}"
            )
        return descs

    results: dict[tuple[str, int], list[str]] = {}
    missing: list[tuple[str, int]] = []
    if cfg.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            for req, outcome in zip(jobs, pool.map(lambda r: _try_describe(run, r), jobs)):
                if outcome is None:
                    missing.append((req.video_id, req.frame_index))
                else:
                    results[(req.video_id, req.frame_index)] = outcome
    else:
        for req in jobs:
            outcome = _try_describe(run, req)
            if outcome is None:
                missing.append((req.video_id, req.frame_index))
            else:
                results[(req.video_id, req.frame_index)] = outcome

    if missing:
        raise DictionaryBuildError(sorted(missing))

    ddict = DescriptionDict()
    for (video_id, frame_index) in sorted(results):
        for pid, text in zip(prompt_ids, results[(video_id, frame_index)]):
            ddict.add(video_id, frame_index, pid, text)
    ddict.validate_counts(cfg.n_p)
    return ddict


def _try_describe(run, req: CaptionRequest) -> list[str] | None:
    try:
        return run(req)
    except CaptionProviderError:
        return None


def frames_in_interval(sta: float, end: float, n_frames: int) -> list[int]:
    """Hard membership: frame indices whose center lies inside [sta, end]."""
    t = (np.arange(n_frames) + 0.5) / n_frames
    return [int(i) for i in np.flatnonzero((t >= sta) & (t <= end))]


def sample_region_description(
    ddict: DescriptionDict,
    video_id: str,
    b: TemporalBoundary,
    cfg: ExpansionConfig,
    rng: random.Random,
) -> str:
    """One description for the boundary's region.

    Uniformly samples min(n_f, candidates) distinct frames inside the clamped
    interval, pools their n_p descriptions and returns one uniformly.  An
    empty inside set falls back to the single frame nearest the center.
    """
    frame_ids = ddict.frame_indices(video_id)
    if not frame_ids:
        raise KeyError(f"dictionary has no entries for video {video_id!r}")
    n_frames = max(frame_ids) + 1
    b = b.as_floats()
    sta, end = clamp_interval(b)
    inside = frames_in_interval(sta, end, n_frames)
    if not inside:
        c = float(np.clip(b.center, 0.0, 1.0))
        inside = [int(np.clip(round(c * n_frames - 0.5), 0, n_frames - 1))]
    picked = inside if len(inside) <= cfg.n_f else sorted(rng.sample(inside, cfg.n_f))
    pool: list[str] = []
    for f in picked:
        pool.extend(ddict.descriptions(video_id, f))
    return pool[rng.randrange(len(pool))]


@dataclass(frozen=True)
class ExpandResult:
    p_o: TemporalBoundary
    p_n: TemporalBoundary
    description: str
    expanded_embedding: np.ndarray


def expand_step(
    instance: GroundingInstance,
    predictor_o: LiftedPredictor,
    predictor_n: LiftedPredictor,
    ddict: DescriptionDict,
    embedder: TokenEmbedder,
    cfg: ExpansionConfig,
    rng: random.Random,
) -> ExpandResult:
    """Initial boundary, region description, expanded boundary.

    Gradients flow through both boundary predictions but not through the
    description retrieval: the sampled text is embedded to a plain array
    before it reaches the expanded predictor.
    """
    p_o = predict_boundary(instance, instance.query_embedding, predictor_o)
    description = sample_region_description(ddict, instance.video_id, p_o.as_floats(), cfg, rng)
    expanded = embedder.embed_text(description)
    p_n = predict_boundary(instance, expanded, predictor_n)
    return ExpandResult(p_o=p_o, p_n=p_n, description=description, expanded_embedding=expanded)

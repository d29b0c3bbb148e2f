"""Caption and similarity backends.

The stub backend is deterministic, instant, and has no ML dependencies, so
the HTTP contract can be tested anywhere.  The transformers-based backend is
optional: it loads lazily and the service reports 503 until (and unless) the
weights are available.
"""

from __future__ import annotations

import hashlib
import os
import random
from typing import Protocol, Sequence

_WORDS = (
    "person room table chair window light camera scene object motion "
    "hand door floor wall shadow corner group crowd street field color "
    "standing sitting walking holding moving looking turning reaching "
    "opening closing small large bright dark blurry distant near busy"
).split()


class Backend(Protocol):
    model_id: str

    def loaded(self) -> bool: ...

    def describe(self, payload_key: str, prompt: str, repeat: int, temperature: float) -> str: ...

    def similarity(self, query: str, candidates: Sequence[str]) -> list[float]: ...


def _digest(*parts: object) -> int:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


class StubBackend:
    """Deterministic caption/similarity stand-in.

    Captions are pseudo-random word strings seeded by the frame payload,
    prompt, and repeat index; temperature 0 is fully deterministic while a
    positive temperature mixes in fresh entropy per call.  Similarity is a
    hashed bag-of-words cosine, so an exact-match candidate scores highest.
    """

    model_id = "stub-caption-v1"

    def __init__(self, dim: int = 64, hash_size: int = 4096):
        self._dim = dim
        self._hash_size = hash_size
        self._bucket_cache: dict[int, list[float]] = {}

    def loaded(self) -> bool:
        return True

    def describe(self, payload_key: str, prompt: str, repeat: int, temperature: float) -> str:
        seed = _digest("caption", payload_key, prompt, repeat)
        if temperature > 0:
            seed = _digest(seed, os.urandom(8).hex())
        rng = random.Random(seed)
        length = rng.randint(6, 10)
        return " ".join(rng.choice(_WORDS) for _ in range(length))

    def _embed(self, text: str) -> list[float]:
        vec = [0.0] * self._dim
        for token in text.lower().split():
            bucket = _digest("token", token) % self._hash_size
            basis = self._bucket_cache.get(bucket)
            if basis is None:
                rng = random.Random(_digest("bucket", bucket))
                basis = [rng.gauss(0.0, 1.0) for _ in range(self._dim)]
                self._bucket_cache[bucket] = basis
            for i, b in enumerate(basis):
                vec[i] += b
        return vec

    def similarity(self, query: str, candidates: Sequence[str]) -> list[float]:
        q = self._embed(query)
        qn = sum(x * x for x in q) ** 0.5
        out = []
        for cand in candidates:
            c = self._embed(cand)
            cn = sum(x * x for x in c) ** 0.5
            if qn == 0.0 or cn == 0.0:
                out.append(0.0)
            else:
                out.append(sum(a * b for a, b in zip(q, c)) / (qn * cn))
        return out


class TransformersBackend:
    """Image captioning plus sentence similarity from pretrained weights.

    Both models load lazily on first use; until they load the service
    answers 503.  Model names come from CAPTIONSVC_CAPTION_MODEL and
    CAPTIONSVC_SIMILARITY_MODEL.
    """

    def __init__(self):
        self.caption_model_name = os.environ.get("CAPTIONSVC_CAPTION_MODEL", "Salesforce/blip2-opt-2.7b")
        self.similarity_model_name = os.environ.get(
            "CAPTIONSVC_SIMILARITY_MODEL", "sentence-transformers/all-MiniLM-L6-v2"
        )
        self.model_id = f"{self.caption_model_name}+{self.similarity_model_name}"
        self._pipe = None
        self._encoder = None
        self._load_failed = False

    def loaded(self) -> bool:
        if self._load_failed:
            return False
        if self._pipe is not None and self._encoder is not None:
            return True
        try:
            from sentence_transformers import SentenceTransformer
            from transformers import pipeline

            self._pipe = pipeline("image-to-text", model=self.caption_model_name)
            self._encoder = SentenceTransformer(self.similarity_model_name)
            return True
        except Exception:
            self._load_failed = True
            return False

    def describe(self, payload_key: str, prompt: str, repeat: int, temperature: float) -> str:
        import base64
        import io

        from PIL import Image

        image = Image.open(io.BytesIO(base64.b64decode(payload_key)))
        out = self._pipe(image, prompt=prompt)
        return out[0]["generated_text"]

    def similarity(self, query: str, candidates: Sequence[str]) -> list[float]:
        import numpy as np

        vectors = self._encoder.encode([query] + list(candidates), normalize_embeddings=True)
        q, cands = vectors[0], vectors[1:]
        return [float(np.dot(q, c)) for c in cands]


def backend_from_env() -> Backend:
    kind = os.environ.get("CAPTIONSVC_BACKEND", "stub")
    if kind == "stub":
        return StubBackend()
    if kind == "transformers":
        return TransformersBackend()
    raise ValueError(f"unknown CAPTIONSVC_BACKEND {kind!r}")

"""Query vectorization behind a pluggable contract.

Every vectorizer emits unit-norm float vectors of a declared dimension, so
downstream similarity is a plain dot product. The built-in vectorizer hashes
character n-grams and needs no model weights; an HTTP client covers real
embedding services.
"""

from __future__ import annotations

import hashlib
import threading
from abc import ABC, abstractmethod
from typing import Sequence

import httpx
import numpy as np

from .errors import BackendUnavailableError, InvalidInputError

NORM_TOL = 1e-6


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm < 1e-12:
        raise InvalidInputError("cannot normalize a zero vector")
    return vector / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of unit vectors, clipped into [-1, 1]."""
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


class Vectorizer(ABC):
    """Contract: embed(text) returns a unit-norm vector of `dimension`.

    Deterministic vectorizers map equal texts to bitwise-equal vectors.
    """

    name: str
    dimension: int
    deterministic: bool

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise InvalidInputError("cannot embed empty text")
        return self._embed(text)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        return np.stack([self.embed(t) for t in texts])

    @abstractmethod
    def _embed(self, text: str) -> np.ndarray: ...


class HashedNgramVectorizer(Vectorizer):
    """Signed feature hashing of character n-grams (n = 1, 2, 3).

    Pure function of the text bytes: the n-gram multiset is hashed into
    `dimension` buckets with a +-1 sign per n-gram, then L2-normalized.
    Signed hashing makes bucket collisions cancel noisily instead of
    biasing one direction.
    """

    deterministic = True

    def __init__(self, dimension: int = 256, ngram_sizes: Sequence[int] = (1, 2, 3)):
        if dimension <= 0:
            raise InvalidInputError("dimension must be positive")
        self.dimension = dimension
        self.ngram_sizes = tuple(ngram_sizes)
        self.name = "hashed-ngram"

    def _embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension)
        for n in self.ngram_sizes:
            for i in range(len(text) - n + 1):
                gram = text[i : i + n].encode("utf-8")
                h = int.from_bytes(hashlib.blake2b(gram, digest_size=8).digest(), "big")
                sign = 1.0 if h & 1 else -1.0
                vector[(h >> 1) % self.dimension] += sign
        return normalize(vector)


class ExternalVectorizer(Vectorizer):
    """Client for an HTTP embedding service.

    POSTs {"texts": [...]} and expects {"vectors": [[...], ...]}; vectors
    are re-normalized on receipt. Any transport failure, timeout, non-2xx
    status, or malformed body raises BackendUnavailableError so the caller
    can decide its fallback. In-flight requests are bounded.
    """

    deterministic = False

    def __init__(
        self,
        url: str,
        dimension: int,
        name: str = "external",
        timeout_s: float = 0.2,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.dimension = dimension
        self.name = name
        self._client = client or httpx.Client(timeout=timeout_s)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        if any(not t for t in texts):
            raise InvalidInputError("cannot embed empty text")
        with self._slots:
            try:
                response = self._client.post(self.url, json={"texts": list(texts)})
            except httpx.HTTPError as exc:
                raise BackendUnavailableError(f"embedding service unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise BackendUnavailableError(f"embedding service returned {response.status_code}")
        try:
            vectors = response.json()["vectors"]
            matrix = np.asarray(vectors, dtype=float)
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendUnavailableError(f"malformed embedding response: {exc}") from exc
        if matrix.shape != (len(texts), self.dimension):
            raise BackendUnavailableError(
                f"embedding response shape {matrix.shape} != ({len(texts)}, {self.dimension})"
            )
        try:
            return np.stack([normalize(row) for row in matrix])
        except InvalidInputError as exc:
            raise BackendUnavailableError(str(exc)) from exc

    def _embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def make_vectorizer(name: str, dimension: int = 256, url: str | None = None, **kwargs) -> Vectorizer:
    if name == "hashed-ngram":
        return HashedNgramVectorizer(dimension=dimension)
    if name == "external":
        if not url:
            raise InvalidInputError("external vectorizer needs a url")
        return ExternalVectorizer(url=url, dimension=dimension, **kwargs)
    raise InvalidInputError(f"unknown vectorizer {name!r}")

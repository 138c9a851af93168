"""Dense vector utilities: embedders, cosine similarity, exact top-k search."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_HASH_DIM = 256
EMBEDDER_URL_ENV = "PATHTRACK_EMBEDDER_BASE_URL"
EMBEDDER_KEY_ENV = "PATHTRACK_EMBEDDER_API_KEY"


class EmbeddingError(Exception):
    """Raised for embedding backend failures and misuse."""


class DimensionMismatch(EmbeddingError):
    """Raised when vector dimensions disagree."""


class HashEmbedder:
    """Deterministic offline embedder: feature-hashed character n-grams.

    Texts sharing character n-grams land near each other; identical texts map
    to identical unit vectors. The hash is keyed on the gram bytes only, so
    vectors are reproducible across processes and runs.
    """

    def __init__(self, dim: int = DEFAULT_HASH_DIM, ngram: int = 3) -> None:
        if dim < 8:
            raise EmbeddingError(f"hash embedder dim must be >= 8, got {dim}")
        if ngram < 1:
            raise EmbeddingError(f"ngram must be >= 1, got {ngram}")
        self.dim = dim
        self.ngram = ngram

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        normalized = " ".join(text.lower().split())
        if not normalized:
            return vec
        padded = f" {normalized} "
        n = self.ngram
        if len(padded) < n:
            padded = padded.ljust(n)
        for i in range(len(padded) - n + 1):
            gram = padded[i : i + n]
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=9).digest()
            bucket = int.from_bytes(digest[:8], "little") % self.dim
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec

    def embed(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts]) if texts else np.zeros(
            (0, self.dim), dtype=np.float64
        )


class HttpEmbedder:
    """Client for an HTTP embedding backend.

    The backend accepts ``POST {"texts": [...]}`` and returns
    ``{"vectors": [[...], ...]}``. Base URL and bearer token come from the
    constructor or the PATHTRACK_EMBEDDER_* environment variables.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ) -> None:
        self.base_url = base_url or os.environ.get(EMBEDDER_URL_ENV, "")
        if not self.base_url:
            raise EmbeddingError(
                f"HTTP embedder selected but no base URL configured; "
                f"set {EMBEDDER_URL_ENV}"
            )
        self.api_key = api_key if api_key is not None else os.environ.get(EMBEDDER_KEY_ENV)
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)
        self.dim: int | None = None

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim or 0), dtype=np.float64)
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(
                    self.base_url, json={"texts": texts}, headers=headers
                )
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_error = EmbeddingError(
                        f"embedding backend returned {resp.status_code}: {resp.text[:200]}"
                    )
                    time.sleep(0.05 * (attempt + 1))
                    continue
                if resp.status_code != 200:
                    raise EmbeddingError(
                        f"embedding backend returned {resp.status_code}: {resp.text[:200]}"
                    )
                vectors = resp.json().get("vectors")
                if not isinstance(vectors, list) or len(vectors) != len(texts):
                    raise EmbeddingError(
                        "embedding backend response missing a vector per input text"
                    )
                matrix = np.asarray(vectors, dtype=np.float64)
                if matrix.ndim != 2:
                    raise EmbeddingError("embedding backend returned malformed vectors")
                if self.dim is None:
                    self.dim = int(matrix.shape[1])
                elif matrix.shape[1] != self.dim:
                    raise DimensionMismatch(
                        f"backend switched dimension from {self.dim} to {matrix.shape[1]}"
                    )
                return matrix
            except httpx.HTTPError as exc:
                last_error = EmbeddingError(f"embedding backend unreachable: {exc}")
                time.sleep(0.05 * (attempt + 1))
        raise last_error or EmbeddingError("embedding backend failed")


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; defined as 0.0 when either vector is all-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a / na, b / nb))


@dataclass
class EmbeddingIndex:
    """Keyed vector store with exact scan search.

    Rows are L2-normalized on construction; all-zero vectors are stored as
    zero and never surface in top-k results.
    """

    keys: list[str]
    matrix: np.ndarray
    normalized: bool = True
    _row_of: dict[str, int] = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, keys: list[str], vectors: np.ndarray) -> "EmbeddingIndex":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(keys):
            raise EmbeddingError(
                f"need one vector per key: {len(keys)} keys, shape {vectors.shape}"
            )
        if len(set(keys)) != len(keys):
            raise EmbeddingError("embedding index keys must be unique")
        matrix = vectors.copy()
        norms = np.linalg.norm(matrix, axis=1)
        nonzero = norms > 0
        matrix[nonzero] = matrix[nonzero] / norms[nonzero, None]
        return cls(keys=list(keys), matrix=matrix)

    def __post_init__(self) -> None:
        if not self._row_of:
            self._row_of = {k: i for i, k in enumerate(self.keys)}

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.keys)

    def vector(self, key: str) -> np.ndarray:
        try:
            return self.matrix[self._row_of[key]]
        except KeyError:
            raise EmbeddingError(f"unknown embedding key '{key}'") from None

    def __contains__(self, key: str) -> bool:
        return key in self._row_of


def top_k(query: np.ndarray, index: EmbeddingIndex, k: int) -> list[tuple[str, float]]:
    """Exact k-nearest keys by cosine similarity.

    Ties are broken by ascending key so results are fully deterministic.
    Zero-vector entries are excluded; a zero query scores 0.0 everywhere.
    """
    if k < 1:
        raise EmbeddingError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmbeddingError("cannot search an empty embedding index")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise DimensionMismatch(
            f"query shape {query.shape} does not match index dim {index.dim}"
        )
    unit_query = _unit(query)
    row_norms = np.linalg.norm(index.matrix, axis=1)
    # Score rows one at a time: a blocked matrix product can round identical
    # rows differently depending on their position in the matrix, which would
    # let memory layout override the key tie-break below.
    ranked = sorted(
        (
            (key, float(np.dot(index.matrix[i], unit_query)))
            for i, key in enumerate(index.keys)
            if row_norms[i] > 0
        ),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def embed_into_index(embedder, keys: list[str], texts: list[str]) -> EmbeddingIndex:
    """Embed ``texts`` and build an index keyed by ``keys``."""
    if len(keys) != len(texts):
        raise EmbeddingError("keys and texts must align")
    vectors = embedder.embed(texts)
    return EmbeddingIndex.build(keys, vectors)

"""Caption embeddings and the semantic coherence weight.

The coherence weight w in [0, 1] gates how much a model trusts a ground-truth
caption versus its partner's soft labels.  Two embedders are provided: a
deterministic hashed bag-of-subwords reference (no external services), and a
client for a remote embedding service speaking a small JSON protocol.
Embeddings are constants with respect to model training; no gradients flow
through the bridge.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import requests

from .hashing import FNV64_OFFSET, fnv1a64
from .tokenizer import Vocab, encode

_INDEX_SEED = FNV64_OFFSET
_SIGN_SEED = FNV64_OFFSET ^ 0x9E3779B97F4A7C15
_BIGRAM_SEP = "\x1f"

DEFAULT_DIM = 256


@dataclass(frozen=True)
class CaptionEmbedding:
    """Unit-norm caption vector; `is_zero` marks empty/degenerate captions."""

    vector: np.ndarray
    is_zero: bool = False


class HashedBridge:
    """Signed feature hashing of subword unigrams and adjacent bigrams.

    Each term is hashed twice with FNV-1a (distinct seeds): once for the bin
    index, once for the sign.  Term frequencies accumulate and the vector is
    L2-normalized, so identical captions embed identically and lexical overlap
    drives cosine similarity.
    """

    def __init__(self, vocab: Vocab, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("bridge dim must be positive")
        self.vocab = vocab
        self.dim = dim

    def _terms(self, text: str) -> list[str]:
        toks = [self.vocab.tokens[i] for i in encode(self.vocab, text)]
        return toks + [a + _BIGRAM_SEP + b for a, b in zip(toks, toks[1:])]

    def embed(self, text: str) -> CaptionEmbedding:
        terms = self._terms(text)
        if not terms:
            return CaptionEmbedding(np.zeros(self.dim), is_zero=True)
        vec = np.zeros(self.dim)
        for term in terms:
            raw = term.encode("utf-8")
            idx = fnv1a64(raw, _INDEX_SEED) % self.dim
            sign = 1.0 if fnv1a64(raw, _SIGN_SEED) & 1 else -1.0
            vec[idx] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            return CaptionEmbedding(vec, is_zero=True)
        return CaptionEmbedding(vec / norm, is_zero=False)

    def embed_batch(self, texts: Sequence[str]) -> list[CaptionEmbedding]:
        return [self.embed(t) for t in texts]


def coherence_weight(a: CaptionEmbedding, b: CaptionEmbedding) -> float:
    """Map cosine similarity onto [0, 1]; degenerate embeddings get a neutral 0.5."""
    if a.is_zero or b.is_zero:
        return 0.5
    cos = float(np.dot(a.vector, b.vector))
    return min(1.0, max(0.0, (cos + 1.0) / 2.0))


class BridgeError(RuntimeError):
    pass


@dataclass
class RemoteBridgeConfig:
    endpoint: str
    dim: int = DEFAULT_DIM
    timeout_ms: int = 10_000
    attempts: int = 3
    backoff_base_ms: int = 200
    max_in_flight: int = 4


class RemoteBridge:
    """Client for an embedding service: POST /embed {"texts": [...]}.

    The response {"vectors": [[...], ...]} is validated, re-normalized to unit
    length locally, and returned in request order.  Transient failures retry
    with exponential backoff; concurrent callers are throttled to
    `max_in_flight` requests.
    """

    def __init__(self, config: RemoteBridgeConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._sem = threading.Semaphore(config.max_in_flight)

    def embed_batch(self, texts: Sequence[str]) -> list[CaptionEmbedding]:
        if not texts:
            return []
        cfg = self.config
        url = cfg.endpoint.rstrip("/") + "/embed"
        payload = None
        with self._sem:
            for attempt in range(cfg.attempts):
                try:
                    resp = self._session.post(
                        url, json={"texts": list(texts)}, timeout=cfg.timeout_ms / 1000.0
                    )
                    resp.raise_for_status()
                    payload = resp.json()
                    break
                except (requests.RequestException, ValueError):
                    if attempt + 1 == cfg.attempts:
                        raise BridgeError("bridge unavailable") from None
                    time.sleep(cfg.backoff_base_ms / 1000.0 * (2**attempt))
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        if vectors is None or len(vectors) != len(texts):
            raise BridgeError("bridge returned invalid vector")
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] != cfg.dim:
                raise BridgeError("bridge dimension mismatch")
            if not np.all(np.isfinite(arr)):
                raise BridgeError("bridge returned invalid vector")
            norm = float(np.linalg.norm(arr))
            if norm == 0.0:
                out.append(CaptionEmbedding(arr, is_zero=True))
            else:
                out.append(CaptionEmbedding(arr / norm, is_zero=False))
        return out

    def embed(self, text: str) -> CaptionEmbedding:
        return self.embed_batch([text])[0]


def remote_embed_batch(endpoint: str, texts: Sequence[str], **kwargs) -> list[CaptionEmbedding]:
    """One-shot convenience wrapper around RemoteBridge."""
    return RemoteBridge(RemoteBridgeConfig(endpoint=endpoint, **kwargs)).embed_batch(texts)


def make_bridge(kind: str, vocab: Vocab, dim: int = DEFAULT_DIM, endpoint: str = "",
                timeout_ms: int = 10_000):
    if kind == "hashed":
        return HashedBridge(vocab, dim=dim)
    if kind == "remote":
        if not endpoint:
            raise ValueError("remote bridge requires an endpoint")
        return RemoteBridge(RemoteBridgeConfig(endpoint=endpoint, dim=dim, timeout_ms=timeout_ms))
    raise ValueError(f"unknown bridge kind {kind!r}")

"""Toy-dimension LoRA adapters, a deterministic hashing embedder, and the
parameter-free request-wise soft mixture router.

Routing is cosine-similarity-of-embeddings followed by a softmax over the
adapter bank; no gate parameters are trained. Adapter math keeps the base map
frozen and adds the weighted low-rank corrections.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ValidationError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Embedder:
    """Seeded feature-hashing bag-of-tokens embedder, L2-normalized.

    Same text always maps to the same unit vector; empty text maps to the
    first basis vector so the output is never degenerate.
    """

    def __init__(self, dimension: int = 256, seed: int = 0):
        if dimension < 2:
            raise ValidationError("embedder dimension must be >= 2")
        self.dimension = dimension
        self.seed = seed

    def _slot(self, token: str) -> tuple[int, float]:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        index = int.from_bytes(digest[:8], "big") % self.dimension
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        return index, sign

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension)
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            vec[0] = 1.0
            return vec
        for tok in tokens:
            idx, sign = self._slot(tok)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # sign cancellations can zero the bag; fall back to the basis
            vec[0] = 1.0
            return vec
        return vec / norm


def adapter_centroid(embedder: Embedder, samples, k: int, seed: int) -> np.ndarray:
    """Unit-norm mean embedding of k seeded-random domain samples."""
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot build a centroid from zero samples")
    if k > len(samples):
        raise ValidationError("k exceeds the number of available samples")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(samples), size=k, replace=False)
    mean = np.mean([embedder.embed(samples[i]) for i in chosen], axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise NumericalError("sample embeddings cancelled to the zero vector")
    return mean / norm


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank pair (A, B) with a domain centroid for routing.

    B starts at zero so a fresh adapter leaves the base map untouched; A is
    Gaussian. The applied correction is scaled by scaling / rank.
    """

    adapter_id: str
    rank: int
    scaling: float
    a: np.ndarray  # (rank, k)
    b: np.ndarray  # (d, rank)
    domain_samples: tuple[str, ...]
    centroid: np.ndarray

    def __post_init__(self):
        d, r_b = self.b.shape
        r_a, k = self.a.shape
        if r_a != self.rank or r_b != self.rank:
            raise ValidationError("A/B ranks must match the declared rank")
        if self.rank > min(d, k) // 2:
            raise ValidationError("rank must satisfy r <= min(d, k) / 2")
        if abs(np.linalg.norm(self.centroid) - 1.0) > 1e-9:
            raise ValidationError("centroid must be unit norm")

    @classmethod
    def create(cls, adapter_id: str, embedder: Embedder, domain_samples,
               d: int, k: int, rank: int = 8, scaling: float = 16.0,
               seed: int = 0, centroid_k: int | None = None) -> "LoraAdapter":
        rng = np.random.default_rng(seed)
        a = rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k))
        b = np.zeros((d, rank))
        samples = tuple(domain_samples)
        n_cent = centroid_k if centroid_k is not None else len(samples)
        centroid = adapter_centroid(embedder, samples, n_cent, seed)
        return cls(adapter_id, rank, scaling, a, b, samples, centroid)

    def delta(self) -> np.ndarray:
        """Effective correction matrix (scaling / rank) * B @ A."""
        return (self.scaling / self.rank) * (self.b @ self.a)

    def to_json_dict(self) -> dict:
        return {
            "id": self.adapter_id,
            "rank": self.rank,
            "scaling": self.scaling,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "domain_samples": list(self.domain_samples),
            "centroid": self.centroid.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LoraAdapter":
        return cls(
            adapter_id=doc["id"], rank=int(doc["rank"]), scaling=float(doc["scaling"]),
            a=np.array(doc["a"], dtype=float), b=np.array(doc["b"], dtype=float),
            domain_samples=tuple(doc["domain_samples"]),
            centroid=np.array(doc["centroid"], dtype=float),
        )


def bank_to_json(adapters, path) -> None:
    with open(path, "w") as fh:
        json.dump([a.to_json_dict() for a in adapters], fh)
        fh.write("\n")


def bank_from_json(path) -> list[LoraAdapter]:
    with open(path) as fh:
        return [LoraAdapter.from_json_dict(doc) for doc in json.load(fh)]


@dataclass(frozen=True)
class RoutingDecision:
    similarities: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.similarities) != len(self.weights):
            raise ValidationError("similarities and weights must align")
        if any(w < 0 for w in self.weights):
            raise ValidationError("weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValidationError("weights must sum to 1")

    @property
    def argmax(self) -> int:
        best = 0
        for j in range(1, len(self.weights)):
            if self.weights[j] > self.weights[best]:
                best = j
        return best


def route(embedder: Embedder, prompt: str, adapters) -> RoutingDecision:
    """Cosine similarities against each adapter centroid, softmaxed."""
    adapters = list(adapters)
    if not adapters:
        raise ValidationError("need at least one adapter to route")
    x = embedder.embed(prompt)
    sims = np.array([float(x @ a.centroid) for a in adapters])
    shifted = sims - sims.max()
    expd = np.exp(shifted)
    weights = expd / expd.sum()
    return RoutingDecision(tuple(sims.tolist()), tuple(weights.tolist()))


def apply_adapters(w0: np.ndarray, adapters, decision: RoutingDecision,
                   x: np.ndarray) -> np.ndarray:
    """y = W0 x + sum_j omega_j * (scaling_j / r_j) * B_j (A_j x)."""
    adapters = list(adapters)
    if len(adapters) != len(decision.weights):
        raise ValidationError("decision does not cover the adapter bank")
    d, k = w0.shape
    if x.shape[-1] != k:
        raise ValidationError(f"input dimension {x.shape[-1]} does not match base map {k}")
    y = w0 @ x
    for adapter, w in zip(adapters, decision.weights):
        if adapter.a.shape[1] != k or adapter.b.shape[0] != d:
            raise ValidationError(f"adapter {adapter.adapter_id} shape mismatch")
        y = y + w * (adapter.scaling / adapter.rank) * (adapter.b @ (adapter.a @ x))
    return y


ROUTING_MODES = ("average", "top1", "soft")


def decision_for_mode(decision: RoutingDecision, mode: str) -> RoutingDecision:
    """Project a soft decision onto one of the evaluation routing modes."""
    n = len(decision.weights)
    if mode == "soft":
        return decision
    if mode == "average":
        return RoutingDecision(decision.similarities, (1.0 / n,) * n)
    if mode == "top1":
        one_hot = [0.0] * n
        one_hot[decision.argmax] = 1.0
        return RoutingDecision(decision.similarities, tuple(one_hot))
    raise ValidationError(f"unknown routing mode {mode!r}")


@dataclass(frozen=True)
class ToyTaskFixture:
    """Regression fixture: inputs X and targets produced by a hidden linear map."""

    w0: np.ndarray       # (d, k) frozen base map
    inputs: np.ndarray   # (n, k)
    targets: np.ndarray  # (n, d)

    @classmethod
    def rank_one(cls, d: int = 32, k: int = 32, n_samples: int = 128,
                 seed: int = 0) -> "ToyTaskFixture":
        rng = np.random.default_rng(seed)
        w0 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
        u = rng.normal(size=(d, 1))
        v = rng.normal(size=(1, k))
        target_map = w0 + u @ v / np.sqrt(k)
        inputs = rng.normal(size=(n_samples, k))
        return cls(w0=w0, inputs=inputs, targets=inputs @ target_map.T)


def fixture_loss(adapter: LoraAdapter, fixture: ToyTaskFixture) -> float:
    """Mean squared error of (W0 + delta) over the fixture."""
    pred = fixture.inputs @ (fixture.w0 + adapter.delta()).T
    diff = pred - fixture.targets
    return float(np.mean(np.sum(diff * diff, axis=1)))


def train_adapter(adapter: LoraAdapter, fixture: ToyTaskFixture, epochs: int,
                  lr: float, seed: int = 0) -> LoraAdapter:
    """Full-batch Adam on the fixture regression; the base map stays frozen.

    Returns a new adapter with updated A/B; zero epochs returns the input
    unchanged. Non-finite loss raises NumericalError.
    """
    if epochs == 0:
        return adapter
    a = adapter.a.copy()
    b = adapter.b.copy()
    s = adapter.scaling / adapter.rank
    x = fixture.inputs
    n = x.shape[0]
    m_a = np.zeros_like(a); v_a = np.zeros_like(a)
    m_b = np.zeros_like(b); v_b = np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    base = x @ fixture.w0.T
    for t in range(1, epochs + 1):
        ax = x @ a.T                      # (n, r)
        pred = base + s * (ax @ b.T)      # (n, d)
        err = pred - fixture.targets
        loss = np.mean(np.sum(err * err, axis=1))
        if not np.isfinite(loss):
            raise NumericalError(f"adapter training diverged at epoch {t}")
        g_b = (2.0 * s / n) * err.T @ ax
        g_a = (2.0 * s / n) * (err @ b).T @ x
        m_a = beta1 * m_a + (1 - beta1) * g_a
        v_a = beta2 * v_a + (1 - beta2) * g_a * g_a
        m_b = beta1 * m_b + (1 - beta1) * g_b
        v_b = beta2 * v_b + (1 - beta2) * g_b * g_b
        bc1 = 1 - beta1 ** t
        bc2 = 1 - beta2 ** t
        a = a - lr * (m_a / bc1) / (np.sqrt(v_a / bc2) + eps)
        b = b - lr * (m_b / bc1) / (np.sqrt(v_b / bc2) + eps)
    return replace(adapter, a=a, b=b)

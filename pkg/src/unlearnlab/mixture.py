"""Ground-truth concept data: a labeled Gaussian mixture in the plane.

Concept id 0 is the reserved null/unconditional id and has no data component;
real concepts 1..C-1 each own one Gaussian. The default layout places eight
components evenly on a radius-5 circle with covariance 0.15*I.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

__all__ = ["MixtureSpec", "ConceptDataset", "gen_dataset", "default_mixture"]


@dataclass(frozen=True)
class MixtureSpec:
    concept_count: int        # includes the null id 0
    means: np.ndarray         # [concept_count, d], row 0 unused
    covs: np.ndarray          # [concept_count, d, d], row 0 unused
    weights: np.ndarray       # [concept_count], weight 0 for the null id

    def __post_init__(self):
        C = self.concept_count
        if self.means.shape[0] != C or self.covs.shape[0] != C \
                or self.weights.shape != (C,):
            raise ValueError("component tables must have one row per concept id")
        if abs(self.weights[1:].sum() - 1.0) > 1e-12 or self.weights[0] != 0.0:
            raise ValueError("real-concept weights must sum to 1 (null gets 0)")
        for c in range(1, C):
            eig = np.linalg.eigvalsh(self.covs[c])
            if eig.min() < -1e-12:
                raise ValueError(f"covariance of concept {c} is not PSD")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def real_concepts(self) -> list[int]:
        return list(range(1, self.concept_count))

    def marginal_moments(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights[1:, None]
        mean = (w * self.means[1:]).sum(axis=0)
        cov = np.zeros((self.dim, self.dim))
        for c in self.real_concepts():
            diff = self.means[c] - mean
            cov += self.weights[c] * (self.covs[c] + np.outer(diff, diff))
        return mean, cov

    @property
    def data_std(self) -> float:
        """Global data scale: root-mean variance of the mixture marginal."""
        _, cov = self.marginal_moments()
        return float(np.sqrt(np.trace(cov) / self.dim))

    def sample_component(self, concept: int, n: int, stream: RngStream) -> np.ndarray:
        if concept not in self.real_concepts():
            raise ValueError(f"concept {concept} has no data component")
        # eigh-based factor handles singular covariances exactly (a zero
        # covariance collapses samples onto the mean)
        w, v = np.linalg.eigh(self.covs[concept])
        L = v * np.sqrt(np.clip(w, 0.0, None))
        return self.means[concept] + stream.normal((n, self.dim)) @ L.T

    def sample_marginal(self, n: int, stream: RngStream) -> np.ndarray:
        ids = stream.child("ids")._gen.choice(
            np.arange(1, self.concept_count), size=n, p=self.weights[1:])
        out = np.empty((n, self.dim))
        for c in self.real_concepts():
            rows = ids == c
            if rows.any():
                out[rows] = self.sample_component(c, int(rows.sum()),
                                                  stream.child("comp", c))
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.concept_count).tobytes())
        for arr in (self.means, self.covs, self.weights):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def default_mixture(concepts: int = 8, radius: float = 5.0,
                    variance: float = 0.15, scale: float = 1.0) -> MixtureSpec:
    """Null id plus `concepts` components evenly spaced on a circle."""
    C = concepts + 1
    means = np.zeros((C, 2))
    angles = 2 * np.pi * np.arange(concepts) / concepts
    means[1:, 0] = scale * radius * np.cos(angles)
    means[1:, 1] = scale * radius * np.sin(angles)
    covs = np.zeros((C, 2, 2))
    covs[1:] = (scale**2) * variance * np.eye(2)
    weights = np.zeros(C)
    weights[1:] = 1.0 / concepts
    return MixtureSpec(C, means, covs, weights)


class ConceptDataset:
    """Fixed labeled sample set; minibatches are index draws from it."""

    def __init__(self, x0: np.ndarray, c: np.ndarray, spec_digest: str):
        if x0.shape[0] != c.shape[0]:
            raise ValueError("x0 and labels must align")
        self.x0 = x0
        self.c = c.astype(np.int64)
        self.spec_digest = spec_digest
        self._pools: dict[tuple, np.ndarray] = {}

    def __len__(self):
        return self.x0.shape[0]

    def concepts(self) -> list[int]:
        return sorted(set(self.c.tolist()))

    def _pool(self, concepts) -> np.ndarray:
        key = tuple(sorted(concepts)) if concepts is not None else ("all",)
        if key not in self._pools:
            if concepts is None:
                self._pools[key] = np.arange(len(self))
            else:
                allowed = np.isin(self.c, list(concepts))
                if not allowed.any():
                    raise ValueError(f"no rows for concepts {sorted(concepts)}")
                self._pools[key] = np.flatnonzero(allowed)
        return self._pools[key]

    def batch(self, stream: RngStream, size: int,
              concepts=None) -> tuple[np.ndarray, np.ndarray]:
        pool = self._pool(concepts)
        idx = pool[stream.child("rows").integers(0, pool.size - 1, (size,))]
        return self.x0[idx], self.c[idx]


def gen_dataset(spec: MixtureSpec, n_per_concept: int,
                stream: RngStream) -> ConceptDataset:
    """n samples from each real concept's component, deterministic per stream."""
    if n_per_concept < 1:
        raise ValueError("need at least one sample per concept")
    xs, cs = [], []
    for c in spec.real_concepts():
        xs.append(spec.sample_component(c, n_per_concept, stream.child("c", c)))
        cs.append(np.full(n_per_concept, c, dtype=np.int64))
    return ConceptDataset(np.concatenate(xs), np.concatenate(cs), spec.digest())

"""Conditional noise-prediction network with tappable hidden features.

The architecture is a plain MLP: every hidden block sees the previous
activation concatenated with a sinusoidal time embedding and a learned
concept embedding, then a linear layer and silu. Concept id 0 is reserved for
the null (unconditional) concept and is trained by conditioning dropout.
Designated hidden layers are "taps" whose activations are returned for
feature-matching distillation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore, in_diagnostic_mode
from .rng import RngStream
from .tensor import Tensor, add, concat, embedding, matmul, silu

__all__ = [
    "DenoiserConfig",
    "FeatureTrace",
    "Denoiser",
    "embed_time",
    "init_params",
    "init_student",
]

NULL_CONCEPT = 0


@dataclass(frozen=True)
class DenoiserConfig:
    input_dim: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    time_embed_dim: int = 16
    concept_count: int = 9  # includes the reserved null id 0
    concept_embed_dim: int = 16
    feature_taps: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.concept_count < 2:
            raise ValueError("need the null concept plus at least one real one")
        for tap in self.feature_taps:
            if not 0 <= tap < len(self.hidden):
                raise ValueError(f"feature tap {tap} is not a hidden layer index")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "concept_count": self.concept_count,
            "concept_embed_dim": self.concept_embed_dim,
            "feature_taps": list(self.feature_taps),
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            time_embed_dim=int(d["time_embed_dim"]),
            concept_count=int(d["concept_count"]),
            concept_embed_dim=int(d["concept_embed_dim"]),
            feature_taps=tuple(d["feature_taps"]),
        )


@dataclass
class FeatureTrace:
    """Tapped hidden activations, one per configured tap, in layer order."""

    taps: tuple[int, ...]
    activations: tuple[Tensor, ...]

    def __len__(self):
        return len(self.taps)

    def __iter__(self):
        return iter(zip(self.taps, self.activations))


def embed_time(t: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos rows at geometric frequencies; t=0 maps to the
    (0, 1, 0, 1, ...) row."""
    if dim % 2 != 0:
        raise ValueError("time embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = 10_000.0 ** (-np.arange(half) / half)
    angles = t * freqs
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def init_params(config: DenoiserConfig, rng: RngStream,
                frozen: bool = False) -> ParamStore:
    """Fan-in-scaled normal weights, zero biases, unit-normal embeddings."""
    store = ParamStore(frozen=frozen)
    in_width = config.input_dim
    extra = config.time_embed_dim + config.concept_embed_dim
    for i, width in enumerate(config.hidden):
        fan_in = in_width + extra
        store.add(f"layer{i}.w",
                  rng.child("w", i).normal((fan_in, width)) / np.sqrt(fan_in))
        store.add(f"layer{i}.b", np.zeros(width))
        in_width = width
    store.add("out.w",
              rng.child("w", "out").normal((in_width, config.input_dim))
              / np.sqrt(in_width))
    store.add("out.b", np.zeros(config.input_dim))
    store.add("concept_embed",
              rng.child("embed").normal((config.concept_count,
                                         config.concept_embed_dim)))
    return store


class Denoiser:
    """A config plus a parameter store; ``predict`` is its only computation."""

    def __init__(self, config: DenoiserConfig, params: ParamStore):
        self.config = config
        self.params = params

    def predict(self, x_t, t: np.ndarray, c: np.ndarray) -> tuple[Tensor, FeatureTrace]:
        """Noise prediction and tapped features for a batch.

        Records on the active tape unless the store is frozen. Increments the
        store's forward-pass counters (diagnostic counters inside a
        ``diagnostic_passes()`` block).
        """
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ValueError(f"x_t must be [B, {cfg.input_dim}], got {x.shape}")
        c = np.asarray(c)
        if c.size and (c.min() < 0 or c.max() >= cfg.concept_count):
            raise ValueError(
                f"unknown concept id in batch (valid: 0..{cfg.concept_count - 1}, "
                f"got range [{c.min()}, {c.max()}])")
        store = self.params
        if in_diagnostic_mode():
            store.diag_calls += 1
            store.diag_rows += x.shape[0]
        else:
            store.fwd_calls += 1
            store.fwd_rows += x.shape[0]

        t_emb = Tensor(embed_time(t, cfg.time_embed_dim))
        c_emb = embedding(store.tensor("concept_embed"), c)
        h = x
        traces = []
        for i in range(len(cfg.hidden)):
            inp = concat([h, t_emb, c_emb], axis=1)
            h = silu(add(matmul(inp, store.tensor(f"layer{i}.w")),
                         store.tensor(f"layer{i}.b")))
            if i in cfg.feature_taps:
                traces.append((i, h))
        eps_hat = add(matmul(h, store.tensor("out.w")), store.tensor("out.b"))
        taps = tuple(i for i, _ in traces)
        return eps_hat, FeatureTrace(taps, tuple(a for _, a in traces))


def init_student(config: DenoiserConfig, mode: str,
                 teacher: Denoiser | None = None,
                 rng: RngStream | None = None) -> ParamStore:
    """Student parameters: a copy of the teacher's (mask applied later by the
    pruning step) or a fresh fan-in-scaled draw."""
    if mode == "pruned-from-teacher":
        if teacher is None:
            raise ValueError("pruned-from-teacher initialization needs a teacher")
        if teacher.config != config:
            raise ValueError("student config must match the teacher's")
        return teacher.params.copy(frozen=False)
    if mode == "random":
        if rng is None:
            raise ValueError("random initialization needs an rng stream")
        return init_params(config, rng)
    raise ValueError(f"unknown init mode '{mode}'")

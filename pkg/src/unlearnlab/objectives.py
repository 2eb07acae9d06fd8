"""Every training loss: denoising, output and feature distillation, their
weighted fine-tune combination, and the two concept-removal objectives
(anchor ablation and negative guidance).

Teachers are frozen stores, so no teacher computation is ever recorded on the
tape; gradients flow into the student only. The term builders at the bottom
work on already-computed predictions so callers that batch several
predictions into one stacked forward pass (the bilevel upper step, the
guided sampler) reuse the exact same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import NULL_CONCEPT, Denoiser, FeatureTrace
from .diffusion import DiffusionBatch, NoiseSchedule, forward_noise, noise_residual_loss
from .tensor import Tensor, add, scale, subtract, sum_sq

__all__ = [
    "FtWeights",
    "UnlearnSpec",
    "out_kd_loss",
    "feat_kd_loss",
    "ft_loss",
    "cu_anchor_loss",
    "cu_negative_guidance_loss",
    "prediction_gap_term",
    "feature_gap_term",
    "ft_terms_from_predictions",
    "guided_target",
]


@dataclass(frozen=True)
class FtWeights:
    """Weights of the combined fine-tune loss; defaults follow the reference
    recipe (denoising 1.0, output distillation 2.0, feature distillation 0.1)."""

    w_diff: float = 1.0
    w_outkd: float = 2.0
    w_featkd: float = 0.1

    def __post_init__(self):
        if min(self.w_diff, self.w_outkd, self.w_featkd) < 0:
            raise ValueError("fine-tune loss weights must be >= 0")

    def uses_teacher(self) -> bool:
        return self.w_outkd > 0 or self.w_featkd > 0


@dataclass(frozen=True)
class UnlearnSpec:
    """What to remove and what to steer toward.

    anchor-ablation regresses the student's target-concept prediction onto
    the teacher's anchor-concept prediction; negative-guidance regresses it
    onto the teacher's null prediction pushed away from the concept direction
    by ``guidance_eta``.
    """

    mode: str = "negative-guidance"
    target: int = 1
    anchor: int = NULL_CONCEPT
    guidance_eta: float = 1.0

    def __post_init__(self):
        if self.mode not in ("anchor-ablation", "negative-guidance"):
            raise ValueError(f"unknown unlearning mode '{self.mode}'")
        if self.target == self.anchor:
            raise ValueError("anchor concept must differ from the target")
        if self.target == NULL_CONCEPT:
            raise ValueError("cannot remove the null concept")
        if self.mode == "negative-guidance" and self.anchor != NULL_CONCEPT:
            raise ValueError("negative guidance steers toward the null concept")


def _check_target_batch(batch: DiffusionBatch, spec: UnlearnSpec) -> None:
    if np.any(batch.c != spec.target):
        raise ValueError("unlearning batch must carry only the target concept")


def prediction_gap_term(reference: np.ndarray, student_pred: Tensor,
                        n: int) -> Tensor:
    """mean over n rows of ||reference - student||^2, reference constant."""
    return scale(sum_sq(subtract(student_pred, Tensor(reference))), 1.0 / n)


def feature_gap_term(teacher_trace, student_trace, n: int) -> Tensor:
    """Sum over taps of the per-tap mean squared feature distance."""
    t_items = list(teacher_trace)
    s_items = list(student_trace)
    if len(t_items) != len(s_items):
        raise ValueError(f"tap count mismatch: teacher {len(t_items)} vs "
                         f"student {len(s_items)}")
    total = None
    for idx, ((tap_t, act_t), (tap_s, act_s)) in enumerate(zip(t_items, s_items)):
        if act_t.shape != act_s.shape:
            raise ValueError(f"tap {idx}: feature shapes differ "
                             f"({act_t.shape} vs {act_s.shape})")
        ref = act_t.data if isinstance(act_t, Tensor) else act_t
        term = scale(sum_sq(subtract(act_s, Tensor(ref))), 1.0 / n)
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return total


def out_kd_loss(teacher: Denoiser, student: Denoiser, batch: DiffusionBatch,
                sched: NoiseSchedule) -> Tensor:
    """Output distillation: mean ||teacher eps - student eps||^2."""
    x_t = forward_noise(batch, sched)
    t_pred, _ = teacher.predict(x_t, batch.t, batch.c)
    s_pred, _ = student.predict(x_t, batch.t, batch.c)
    return prediction_gap_term(t_pred.data, s_pred, len(batch))


def feat_kd_loss(teacher: Denoiser, student: Denoiser, batch: DiffusionBatch,
                 sched: NoiseSchedule) -> Tensor:
    """Feature distillation: sum over taps of mean squared feature distance."""
    x_t = forward_noise(batch, sched)
    _, t_trace = teacher.predict(x_t, batch.t, batch.c)
    _, s_trace = student.predict(x_t, batch.t, batch.c)
    return feature_gap_term(t_trace, s_trace, len(batch))


def ft_terms_from_predictions(batch: DiffusionBatch, sched: NoiseSchedule,
                              weights: FtWeights, student_pred: Tensor,
                              student_trace, teacher_pred,
                              teacher_trace) -> Tensor:
    """Combined fine-tune loss from already-computed predictions."""
    total = scale(noise_residual_loss(student_pred, batch, sched),
                  weights.w_diff)
    if weights.w_outkd > 0:
        ref = teacher_pred.data if isinstance(teacher_pred, Tensor) else teacher_pred
        total = add(total, scale(
            prediction_gap_term(ref, student_pred, len(batch)),
            weights.w_outkd))
    if weights.w_featkd > 0:
        total = add(total, scale(
            feature_gap_term(teacher_trace, student_trace, len(batch)),
            weights.w_featkd))
    return total


def ft_loss(teacher: Denoiser, student: Denoiser, batch: DiffusionBatch,
            sched: NoiseSchedule, weights: FtWeights) -> Tensor:
    """w_diff * denoising + w_outkd * output-KD + w_featkd * feature-KD.

    Costs one student pass, plus one teacher pass when a distillation weight
    is nonzero.
    """
    x_t = forward_noise(batch, sched)
    s_pred, s_trace = student.predict(x_t, batch.t, batch.c)
    t_pred, t_trace = (None, None)
    if weights.uses_teacher():
        t_pred, t_trace = teacher.predict(x_t, batch.t, batch.c)
    return ft_terms_from_predictions(batch, sched, weights, s_pred, s_trace,
                                     t_pred, t_trace)


def guided_target(teacher: Denoiser, x_t: np.ndarray, t: np.ndarray,
                  spec: UnlearnSpec) -> np.ndarray:
    """The constant regression target for the student's target-concept rows.

    anchor-ablation: teacher prediction under the anchor concept.
    negative-guidance: teacher null prediction pushed away from the concept,
    ``eps_null - eta * (eps_c - eps_null)``, via one stacked teacher call.
    """
    n = x_t.shape[0]
    if spec.mode == "anchor-ablation":
        pred, _ = teacher.predict(x_t, t, np.full(n, spec.anchor, dtype=np.int64))
        return pred.data
    stacked, _ = teacher.predict(
        np.concatenate([x_t, x_t], axis=0),
        np.concatenate([t, t]),
        np.concatenate([np.full(n, spec.target, dtype=np.int64),
                        np.full(n, NULL_CONCEPT, dtype=np.int64)]),
    )
    e_c = stacked.data[:n]
    e_null = stacked.data[n:]
    return e_null - spec.guidance_eta * (e_c - e_null)


def cu_anchor_loss(teacher: Denoiser, student: Denoiser, batch: DiffusionBatch,
                   spec: UnlearnSpec, sched: NoiseSchedule) -> Tensor:
    """Anchor ablation: regress student(target) onto teacher(anchor)."""
    if spec.mode != "anchor-ablation":
        raise ValueError("spec mode must be anchor-ablation")
    _check_target_batch(batch, spec)
    x_t = forward_noise(batch, sched)
    target = guided_target(teacher, x_t, batch.t, spec)
    s_pred, _ = student.predict(x_t, batch.t, batch.c)
    return prediction_gap_term(target, s_pred, len(batch))


def cu_negative_guidance_loss(teacher: Denoiser, student: Denoiser,
                              batch: DiffusionBatch, spec: UnlearnSpec,
                              sched: NoiseSchedule) -> Tensor:
    """Negative guidance: regress student(target) onto the pushed-away
    teacher target; eta=0 degenerates to anchor ablation with a null anchor."""
    if spec.mode != "negative-guidance":
        raise ValueError("spec mode must be negative-guidance")
    _check_target_batch(batch, spec)
    x_t = forward_noise(batch, sched)
    target = guided_target(teacher, x_t, batch.t, spec)
    s_pred, _ = student.predict(x_t, batch.t, batch.c)
    return prediction_gap_term(target, s_pred, len(batch))


def cu_loss(teacher: Denoiser, student: Denoiser, batch: DiffusionBatch,
            spec: UnlearnSpec, sched: NoiseSchedule) -> Tensor:
    if spec.mode == "anchor-ablation":
        return cu_anchor_loss(teacher, student, batch, spec, sched)
    return cu_negative_guidance_loss(teacher, student, batch, spec, sched)

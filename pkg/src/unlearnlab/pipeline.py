"""Experiment drivers: base-model training, pruned-model fine-tuning, and the
two unlearning pipelines, all deterministic functions of (config, seed).

Every stochastic choice draws from a stream named after its role and step
index, so runs sharing a seed align batch-for-batch across pipelines (the
bilevel lower stream matches the two-stage fine-tune stream, the upper
stream matches the two-stage unlearning stream).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bilevel import (
    BilevelConfig,
    BilevelState,
    DiffusionUnlearnProblem,
    TwoStageResult,
    run_bilevel,
    run_two_stage,
)
from .denoiser import Denoiser, DenoiserConfig, init_params, init_student
from .diffusion import NoiseSchedule, diffusion_loss, make_batch
from .evaluation import heldout_denoise_loss
from .mixture import ConceptDataset, MixtureSpec, gen_dataset
from .objectives import FtWeights, ft_loss
from .params import ParamStore, make_optimizer
from .pruning import PRUNE_STRATEGIES, PruneMask, PruneReport, apply_mask
from .rng import RngStream
from .tensor import GradientTape

__all__ = [
    "CurvePoint",
    "TrainResult",
    "train_teacher",
    "prune_model",
    "finetune",
    "unlearn_bilevel",
    "unlearn_two_stage",
]


@dataclass
class CurvePoint:
    iteration: int
    train_loss: float
    heldout_loss: float
    nnz: int

    COLUMNS = ("iteration", "train_loss", "heldout_loss", "nnz")


@dataclass
class TrainResult:
    store: ParamStore
    curve: list[CurvePoint]
    final_heldout: float
    ema_store: Optional[ParamStore] = None

    @property
    def eval_store(self) -> ParamStore:
        """The parameters the run publishes (EMA when tracked)."""
        return self.ema_store if self.ema_store is not None else self.store


def _heldout(model: Denoiser, spec: MixtureSpec, sched: NoiseSchedule,
             n: int, seed: int) -> float:
    return heldout_denoise_loss(model, spec, sched, n,
                                RngStream(seed, "heldout-set"))


def train_teacher(spec: MixtureSpec, dataset: ConceptDataset,
                  denoiser_cfg: DenoiserConfig, sched: NoiseSchedule,
                  iters: int, lr: float, optimizer: str, batch_size: int,
                  uncond_drop: float, seed: int, eval_every: int = 500,
                  heldout_n: int = 2000) -> TrainResult:
    """Train the base model on all concepts with conditioning dropout, so the
    reserved null id learns the unconditional marginal."""
    store = init_params(denoiser_cfg, RngStream(seed, "teacher-init"))
    model = Denoiser(denoiser_cfg, store)
    opt = make_optimizer(optimizer, lr)
    curve: list[CurvePoint] = []
    loss_val = float("nan")
    for i in range(iters):
        stream = RngStream(seed, "teacher-batch", i)
        x0, c = dataset.batch(stream.child("rows"), batch_size)
        if uncond_drop > 0:
            drop = stream.child("drop").uniform((batch_size,)) < uncond_drop
            c = np.where(drop, 0, c)
        batch = make_batch(x0, c, sched, stream.child("noise"))
        store.zero_grads()
        with GradientTape() as tape:
            loss = diffusion_loss(model, batch, sched)
        tape.backward(loss)
        if not store.grads_finite():
            raise ArithmeticError(f"teacher training diverged at iteration {i}")
        opt.step(store)
        loss_val = loss.item()
        if (i + 1) % eval_every == 0 or i + 1 == iters:
            curve.append(CurvePoint(i + 1, loss_val,
                                    _heldout(model, spec, sched, heldout_n, seed),
                                    store.nnz()))
    final = curve[-1].heldout_loss if curve else \
        _heldout(model, spec, sched, heldout_n, seed)
    return TrainResult(store, curve, final)


def prune_model(teacher_store: ParamStore, strategy: str, keep_fraction: float,
                scope: str) -> tuple[ParamStore, PruneMask, PruneReport]:
    """Copy the teacher, mask it to the budget, and return the sparse init."""
    if strategy not in PRUNE_STRATEGIES:
        raise ValueError(f"unknown prune strategy '{strategy}' "
                         f"(have: {sorted(PRUNE_STRATEGIES)})")
    init = teacher_store.copy(frozen=False)
    mask, report = PRUNE_STRATEGIES[strategy](init, keep_fraction, scope=scope)
    apply_mask(init, mask)
    return init, mask, report


def finetune(teacher: Denoiser, init: ParamStore, spec: MixtureSpec,
             dataset: ConceptDataset, sched: NoiseSchedule, weights: FtWeights,
             iters: int, lr: float, optimizer: str, batch_size: int, seed: int,
             eval_every: int = 500, heldout_n: int = 2000,
             concepts: Optional[list[int]] = None,
             ema_decay: Optional[float] = None) -> TrainResult:
    """Fine-tune a (typically pruned) student against the frozen teacher.

    With ``ema_decay`` set, an exponential moving average of the weights is
    tracked and used for the held-out curve (the usual way diffusion
    checkpoints are published/evaluated); masked entries stay zero since the
    average is a convex combination of masked values.
    """
    store = init.copy()
    student = Denoiser(teacher.config, store)
    ema = init.copy() if ema_decay is not None else None
    opt = make_optimizer(optimizer, lr)
    curve: list[CurvePoint] = []
    loss_val = float("nan")
    for i in range(iters):
        stream = RngStream(seed, "ft-batch", i)
        x0, c = dataset.batch(stream.child("rows"), batch_size,
                              concepts=concepts)
        batch = make_batch(x0, c, sched, stream.child("noise"))
        store.zero_grads()
        with GradientTape() as tape:
            loss = ft_loss(teacher, student, batch, sched, weights)
        tape.backward(loss)
        if not store.grads_finite():
            raise ArithmeticError(f"fine-tuning diverged at iteration {i}")
        opt.step(store)
        if ema is not None:
            d = ema_decay
            for name in ema.names():
                ema._values[name] *= d
                ema._values[name] += (1.0 - d) * store.value(name)
        loss_val = loss.item()
        if (i + 1) % eval_every == 0 or i + 1 == iters:
            eval_model = Denoiser(teacher.config, ema if ema is not None else store)
            curve.append(CurvePoint(i + 1, loss_val,
                                    _heldout(eval_model, spec, sched, heldout_n, seed),
                                    eval_model.params.nnz()))
    if curve:
        final = curve[-1].heldout_loss
    else:
        eval_model = Denoiser(teacher.config, ema if ema is not None else store)
        final = _heldout(eval_model, spec, sched, heldout_n, seed)
    return TrainResult(store, curve, final, ema_store=ema)


def unlearn_bilevel(teacher: Denoiser, init: ParamStore,
                    dataset: ConceptDataset, sched: NoiseSchedule,
                    cfg: BilevelConfig, seed: int,
                    ft_concepts: Optional[list[int]] = None,
                    on_upper=None) -> BilevelState:
    problem = DiffusionUnlearnProblem(teacher, init, dataset, sched, cfg,
                                      seed=seed, ft_concepts=ft_concepts)
    return run_bilevel(problem, cfg, on_upper=on_upper)


def unlearn_two_stage(teacher: Denoiser, init: ParamStore,
                      dataset: ConceptDataset, sched: NoiseSchedule,
                      cfg: BilevelConfig, ft_iters: int, unlearn_iters: int,
                      seed: int, stage2_lr: Optional[float] = None,
                      ft_concepts: Optional[list[int]] = None,
                      on_unlearn_step=None) -> TwoStageResult:
    problem = DiffusionUnlearnProblem(teacher, init, dataset, sched, cfg,
                                      seed=seed, ft_concepts=ft_concepts)
    return run_two_stage(problem, ft_iters, unlearn_iters, cfg,
                         stage2_lr=stage2_lr, on_unlearn_step=on_unlearn_step)

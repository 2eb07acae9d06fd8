"""Penalized minimax double loop for joint fine-tuning and concept removal,
the two-stage baseline it is compared against, and a closed-form quadratic
reference problem.

The deployed parameters (``main``) are updated only by upper steps, whose
gradient combines the removal objective with ``penalty`` times the fine-tune
loss; the shadow parameters track the fine-tune optimum through the lower
steps and feed nothing back into the main update except the logged
optimality-gap diagnostic. With ``penalty = 0`` an upper step degenerates to
a plain unlearning step, bitwise identical to stage two of the two-stage
baseline under shared streams.

Cost accounting: one "forward pass" is one batched predict() call. A lower
step costs one teacher plus one shadow call; an upper step batches all
teacher work (guided targets plus fine-tune-term targets) into one stacked
call and both student contributions into another, so a (K lower + 1 upper)
cycle costs exactly as many calls as K+1 distillation fine-tune steps.
Diagnostic-only evaluations are counted separately and never enter that
budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .denoiser import NULL_CONCEPT, Denoiser, DenoiserConfig
from .diffusion import DiffusionBatch, NoiseSchedule, forward_noise, make_batch
from .mixture import ConceptDataset
from .objectives import (
    FtWeights,
    UnlearnSpec,
    cu_loss,
    ft_loss,
    ft_terms_from_predictions,
    guided_target,
    prediction_gap_term,
)
from .params import ParamStore, diagnostic_passes, make_optimizer
from .rng import RngStream
from .tensor import (
    GradientTape,
    Tensor,
    add,
    matmul,
    multiply,
    scale,
    slice_axis,
    subtract,
    sum_sq,
    tsum,
)

__all__ = [
    "BilevelConfig",
    "BilevelState",
    "StepRecord",
    "TwoStageResult",
    "run_bilevel",
    "run_two_stage",
    "DiffusionUnlearnProblem",
    "QuadraticBilevelProblem",
    "quad_bilevel_reference",
]


@dataclass(frozen=True)
class BilevelConfig:
    upper_iters: int = 250          # upper updates (one per cycle)
    lower_iters: int = 20           # lower updates per cycle
    penalty: float = 100.0          # weight of the fine-tune term in the upper gradient
    lower_lr: float = 1e-3
    upper_lr: float = 2e-4
    shadow_policy: str = "persistent-shadow"  # or "resync-after-upper"
    batch_size: int = 64
    optimizer: str = "sgd"
    diagnostics: bool = True        # log the optimality gap (extra diag passes)
    ema_decay: Optional[float] = None  # weight average for published checkpoints
    unlearn: Optional[UnlearnSpec] = None
    ft_weights: FtWeights = field(default_factory=FtWeights)

    def __post_init__(self):
        if self.upper_iters < 1 or self.lower_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        # zero is allowed so one loop can be switched off for degenerate runs
        if self.lower_lr < 0 or self.upper_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")
        if self.shadow_policy not in ("persistent-shadow", "resync-after-upper"):
            raise ValueError(f"unknown shadow policy '{self.shadow_policy}'")

    @property
    def total_iterations(self) -> int:
        """E*K lower plus E upper steps, for budget matching."""
        return self.upper_iters * self.lower_iters + self.upper_iters


@dataclass
class StepRecord:
    step_kind: str  # "lower" | "upper"
    e: int
    k: int
    L_cu: float
    L_ft_theta: float
    L_ft_vartheta: float
    gap: float
    fwd_teacher: int
    fwd_theta: int
    fwd_vartheta: int

    COLUMNS = ("step_kind", "e", "k", "L_cu", "L_ft_theta", "L_ft_vartheta",
               "gap", "fwd_teacher", "fwd_theta", "fwd_vartheta")


@dataclass
class BilevelState:
    main: ParamStore       # deployed parameters, updated by upper steps
    shadow: ParamStore     # fine-tune tracker, updated by lower steps
    e: int = 0
    k: int = 0
    history: list = field(default_factory=list)
    total_iterations: int = 0
    main_ema: Optional[ParamStore] = None

    @property
    def published(self) -> ParamStore:
        """The parameters a run ships (the weight average when tracked)."""
        return self.main_ema if self.main_ema is not None else self.main

    def fwd_counts(self, teacher_store: Optional[ParamStore]) -> dict:
        t = teacher_store
        return {
            "teacher": t.fwd_calls if t is not None else 0,
            "theta": self.main.fwd_calls,
            "vartheta": self.shadow.fwd_calls,
            "diag_teacher": t.diag_calls if t is not None else 0,
            "diag_theta": self.main.diag_calls,
            "diag_vartheta": self.shadow.diag_calls,
            "rows_teacher": t.fwd_rows if t is not None else 0,
            "rows_theta": self.main.fwd_rows,
            "rows_vartheta": self.shadow.fwd_rows,
        }


@dataclass
class TwoStageResult:
    main: ParamStore
    history: list
    total_iterations: int
    main_ema: Optional[ParamStore] = None

    @property
    def published(self) -> ParamStore:
        return self.main_ema if self.main_ema is not None else self.main

    def fwd_counts(self, teacher_store: Optional[ParamStore]) -> dict:
        t = teacher_store
        return {
            "teacher": t.fwd_calls if t is not None else 0,
            "theta": self.main.fwd_calls,
        }


def _require_finite_grads(store: ParamStore, where: str) -> None:
    if not store.grads_finite():
        raise ArithmeticError(f"non-finite gradient at {where}")


def _ema_update(ema: Optional[ParamStore], source: ParamStore,
                decay: float) -> None:
    if ema is None:
        return
    for name in ema.names():
        ema._values[name] *= decay
        ema._values[name] += (1.0 - decay) * source.value(name)


def _record(state: BilevelState, teacher_store, **kw) -> None:
    counts = state.fwd_counts(teacher_store)
    state.history.append(StepRecord(
        fwd_teacher=counts["teacher"], fwd_theta=counts["theta"],
        fwd_vartheta=counts["vartheta"], **kw))


def run_bilevel(problem, cfg: BilevelConfig,
                on_upper: Optional[Callable] = None) -> BilevelState:
    """Algorithmic core: E cycles of K lower steps then one upper step.

    ``problem`` supplies the losses and initial stores (see
    DiffusionUnlearnProblem and QuadraticBilevelProblem). Deterministic given
    the problem's seed. Returns the final state with its step history.
    """
    state = problem.make_state()
    if cfg.ema_decay is not None:
        state.main_ema = state.main.copy()
    lower_opt = make_optimizer(cfg.optimizer, cfg.lower_lr)
    upper_opt = make_optimizer(cfg.optimizer, cfg.upper_lr)
    teacher_store = problem.teacher_store()

    for e in range(cfg.upper_iters):
        state.e = e
        for k in range(cfg.lower_iters):
            state.k = k
            step_idx = e * cfg.lower_iters + k
            state.shadow.zero_grads()
            with GradientTape() as tape:
                loss = problem.lower_loss(state.shadow, step_idx)
            tape.backward(loss)
            _require_finite_grads(state.shadow, f"lower step e={e}, k={k}")
            lower_opt.step(state.shadow)
            _record(state, teacher_store, step_kind="lower", e=e, k=k,
                    L_cu=np.nan, L_ft_theta=np.nan,
                    L_ft_vartheta=loss.item(), gap=np.nan)

        state.main.zero_grads()
        lft_theta_train = None
        with GradientTape() as tape:
            if cfg.penalty == 0.0:
                total = problem.cu_loss(state.main, e)
                cu_val = total.item()
            else:
                cu_node, ft_node = problem.upper_terms(state.main, e)
                cu_val = cu_node.item()
                lft_theta_train = ft_node.item()
                total = add(cu_node, scale(ft_node, cfg.penalty))
        tape.backward(total)
        _require_finite_grads(state.main, f"upper step e={e}")
        upper_opt.step(state.main)
        if cfg.ema_decay is not None:
            _ema_update(state.main_ema, state.main, cfg.ema_decay)

        lft_theta, lft_shadow, gap = np.nan, np.nan, np.nan
        if cfg.diagnostics:
            lft_theta, lft_shadow = problem.gap_values(state, e, lft_theta_train)
            gap = lft_theta - lft_shadow
        _record(state, teacher_store, step_kind="upper", e=e, k=cfg.lower_iters,
                L_cu=cu_val, L_ft_theta=lft_theta, L_ft_vartheta=lft_shadow,
                gap=gap)
        if cfg.shadow_policy == "resync-after-upper":
            state.shadow.load_values_from(state.main)
        if on_upper is not None:
            on_upper(e, state)

    state.total_iterations = cfg.total_iterations
    return state


def run_two_stage(problem, ft_iters: int, unlearn_iters: int,
                  cfg: BilevelConfig, stage2_lr: Optional[float] = None,
                  on_unlearn_step: Optional[Callable] = None) -> TwoStageResult:
    """Fine-tune for N steps, then unlearn for M steps, on one parameter set.

    Stage one minimizes the fine-tune loss (same sampler and stream indices
    as bilevel lower steps); stage two minimizes the unlearning loss (same
    streams as bilevel upper steps). Total budget N+M is reported for
    budget-matched comparisons.
    """
    main = problem.init_store()
    ema = main.copy() if cfg.ema_decay is not None else None
    history: list[StepRecord] = []
    teacher_store = problem.teacher_store()

    def counts():
        t = teacher_store.fwd_calls if teacher_store is not None else 0
        return t, main.fwd_calls

    ft_opt = make_optimizer(cfg.optimizer, cfg.lower_lr)
    for i in range(ft_iters):
        main.zero_grads()
        with GradientTape() as tape:
            loss = problem.lower_loss(main, i)
        tape.backward(loss)
        _require_finite_grads(main, f"fine-tune stage step {i}")
        ft_opt.step(main)
        if ema is not None:
            _ema_update(ema, main, cfg.ema_decay)
        t_calls, m_calls = counts()
        history.append(StepRecord("lower", i, 0, np.nan, loss.item(), np.nan,
                                  np.nan, t_calls, m_calls, 0))

    un_opt = make_optimizer(cfg.optimizer,
                            cfg.upper_lr if stage2_lr is None else stage2_lr)
    for m in range(unlearn_iters):
        main.zero_grads()
        with GradientTape() as tape:
            loss = problem.cu_loss(main, m)
        tape.backward(loss)
        _require_finite_grads(main, f"unlearn stage step {m}")
        un_opt.step(main)
        if ema is not None:
            _ema_update(ema, main, cfg.ema_decay)
        t_calls, m_calls = counts()
        history.append(StepRecord("upper", m, 0, loss.item(), np.nan, np.nan,
                                  np.nan, t_calls, m_calls, 0))
        if on_unlearn_step is not None:
            on_unlearn_step(m, main)

    return TwoStageResult(main, history, ft_iters + unlearn_iters, main_ema=ema)


# ---------------------------------------------------------------------------
# the diffusion unlearning problem
# ---------------------------------------------------------------------------

class DiffusionUnlearnProblem:
    """Losses and batch plumbing for unlearning a concept from a pruned model.

    Lower steps draw from the fine-tune sampler (``ft_concepts``; by default
    every real concept except the removal target, which mirrors a curated
    fine-tune set). The upper step's removal term draws target-concept data,
    and its fine-tune term draws an independent batch from the fine-tune
    sampler.
    """

    def __init__(self, teacher: Denoiser, init: ParamStore,
                 dataset: ConceptDataset, sched: NoiseSchedule,
                 cfg: BilevelConfig, seed: int,
                 ft_concepts: Optional[list[int]] = None):
        if cfg.unlearn is None:
            raise ValueError("BilevelConfig.unlearn must be set for this problem")
        if not teacher.params.frozen:
            raise ValueError("teacher store must be frozen")
        self.teacher = teacher
        self.init = init
        self.dataset = dataset
        self.sched = sched
        self.cfg = cfg
        self.seed = seed
        self.spec = cfg.unlearn
        if ft_concepts is None:
            ft_concepts = [c for c in dataset.concepts() if c != self.spec.target]
        if self.spec.target in ft_concepts:
            raise ValueError("fine-tune concepts must exclude the removal target")
        self.ft_concepts = ft_concepts
        self._cached_upper_ft = None  # (e, batch, teacher_pred, teacher_trace)

    # -- state ---------------------------------------------------------------

    def make_state(self) -> BilevelState:
        return BilevelState(main=self.init.copy(), shadow=self.init.copy())

    def init_store(self) -> ParamStore:
        return self.init.copy()

    def teacher_store(self) -> ParamStore:
        return self.teacher.params

    # -- batches ---------------------------------------------------------------

    def _ft_batch(self, stream_name: str, idx: int) -> DiffusionBatch:
        stream = RngStream(self.seed, stream_name, idx)
        x0, c = self.dataset.batch(stream.child("rows"), self.cfg.batch_size,
                                   concepts=self.ft_concepts)
        return make_batch(x0, c, self.sched, stream.child("noise"))

    def _cu_batch(self, e: int) -> DiffusionBatch:
        stream = RngStream(self.seed, "unlearn-batch", e)
        x0, c = self.dataset.batch(stream.child("rows"), self.cfg.batch_size,
                                   concepts=[self.spec.target])
        return make_batch(x0, c, self.sched, stream.child("noise"))

    # -- losses ----------------------------------------------------------------

    def lower_loss(self, store: ParamStore, step_idx: int) -> Tensor:
        batch = self._ft_batch("ft-batch", step_idx)
        student = Denoiser(self.teacher.config, store)
        return ft_loss(self.teacher, student, batch, self.sched,
                       self.cfg.ft_weights)

    def cu_loss(self, store: ParamStore, e: int) -> Tensor:
        batch = self._cu_batch(e)
        student = Denoiser(self.teacher.config, store)
        return cu_loss(self.teacher, student, batch, self.spec, self.sched)

    def upper_terms(self, store: ParamStore, e: int) -> tuple[Tensor, Tensor]:
        """Removal term and fine-tune term, each mean-per-batch, computed with
        one stacked teacher call and one stacked student call."""
        spec = self.spec
        cu_batch = self._cu_batch(e)
        ft_batch = self._ft_batch("upper-ft-batch", e)
        n_cu, n_ft = len(cu_batch), len(ft_batch)
        x_cu = forward_noise(cu_batch, self.sched)
        x_ft = forward_noise(ft_batch, self.sched)

        # teacher: guided-target rows plus fine-tune-term rows, one call
        if spec.mode == "negative-guidance":
            t_x = np.concatenate([x_cu, x_cu, x_ft])
            t_t = np.concatenate([cu_batch.t, cu_batch.t, ft_batch.t])
            t_c = np.concatenate([
                np.full(n_cu, spec.target, dtype=np.int64),
                np.full(n_cu, NULL_CONCEPT, dtype=np.int64),
                ft_batch.c,
            ])
            ft_off = 2 * n_cu
        else:
            t_x = np.concatenate([x_cu, x_ft])
            t_t = np.concatenate([cu_batch.t, ft_batch.t])
            t_c = np.concatenate([
                np.full(n_cu, spec.anchor, dtype=np.int64), ft_batch.c])
            ft_off = n_cu
        t_pred, t_trace = self.teacher.predict(t_x, t_t, t_c)
        if spec.mode == "negative-guidance":
            e_c = t_pred.data[:n_cu]
            e_null = t_pred.data[n_cu:2 * n_cu]
            target = e_null - spec.guidance_eta * (e_c - e_null)
        else:
            target = t_pred.data[:n_cu]
        t_pred_ft = t_pred.data[ft_off:ft_off + n_ft]
        t_trace_ft = [(tap, act.data[ft_off:ft_off + n_ft])
                      for tap, act in t_trace]

        # student: removal rows plus fine-tune rows, one call
        s_x = np.concatenate([x_cu, x_ft])
        s_t = np.concatenate([cu_batch.t, ft_batch.t])
        s_c = np.concatenate([cu_batch.c, ft_batch.c])
        student = Denoiser(self.teacher.config, store)
        s_pred, s_trace = student.predict(s_x, s_t, s_c)
        s_pred_cu = slice_axis(s_pred, 0, 0, n_cu)
        s_pred_ft = slice_axis(s_pred, 0, n_cu, n_cu + n_ft)
        s_trace_ft = [(tap, slice_axis(act, 0, n_cu, n_cu + n_ft))
                      for tap, act in s_trace]

        cu_node = prediction_gap_term(target, s_pred_cu, n_cu)
        ft_node = ft_terms_from_predictions(
            ft_batch, self.sched, self.cfg.ft_weights,
            s_pred_ft, s_trace_ft, t_pred_ft, t_trace_ft)
        self._cached_upper_ft = (e, ft_batch, t_pred_ft, t_trace_ft)
        return cu_node, ft_node

    def gap_values(self, state: BilevelState, e: int,
                   lft_theta_train) -> tuple[float, float]:
        """L^ft(main) and L^ft(shadow) on the upper fine-tune batch, for the
        logged gap; diagnostic-counted passes only."""
        with diagnostic_passes():
            if self._cached_upper_ft is not None and self._cached_upper_ft[0] == e:
                _, ft_batch, t_pred_ft, t_trace_ft = self._cached_upper_ft
            else:
                ft_batch = self._ft_batch("upper-ft-batch", e)
                x_ft = forward_noise(ft_batch, self.sched)
                pred, trace = self.teacher.predict(x_ft, ft_batch.t, ft_batch.c)
                t_pred_ft = pred.data
                t_trace_ft = [(tap, act.data) for tap, act in trace]

            def lft(store: ParamStore) -> float:
                x_ft = forward_noise(ft_batch, self.sched)
                model = Denoiser(self.teacher.config, store)
                pred, trace = model.predict(x_ft, ft_batch.t, ft_batch.c)
                node = ft_terms_from_predictions(
                    ft_batch, self.sched, self.cfg.ft_weights,
                    pred, trace, t_pred_ft, t_trace_ft)
                return node.item()

            # the training pass already evaluated L^ft(main) when penalty > 0;
            # recompute it only when unavailable
            lft_theta = lft_theta_train if lft_theta_train is not None \
                else lft(state.main)
            lft_shadow = lft(state.shadow)
        return lft_theta, lft_shadow


# ---------------------------------------------------------------------------
# closed-form quadratic reference
# ---------------------------------------------------------------------------

class QuadraticBilevelProblem:
    """Upper loss 1/2||theta - a||^2 subject to theta minimizing the lower
    loss 1/2 theta^T Q theta - b^T theta (Q PSD, b in range(Q)).

    The penalized stationary point solves (I + penalty*Q) theta = a +
    penalty*b, and the true bilevel solution is the projection of ``a`` onto
    the lower argmin set {theta : Q theta = b}. Used to validate the double
    loop against exact algebra; parameters live in a single (n, 1) tensor.
    """

    def __init__(self, a: np.ndarray, Q: np.ndarray, b: np.ndarray,
                 theta0: Optional[np.ndarray] = None,
                 shadow0: Optional[np.ndarray] = None):
        self.a = np.asarray(a, dtype=float).reshape(-1)
        n = self.a.size
        self.Q = np.asarray(Q, dtype=float)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.Q.shape != (n, n) or self.b.shape != (n,):
            raise ValueError("dimension mismatch between a, Q, b")
        self.theta0 = self.a.copy() if theta0 is None else \
            np.asarray(theta0, dtype=float).reshape(-1)
        self.shadow0 = self.theta0.copy() if shadow0 is None else \
            np.asarray(shadow0, dtype=float).reshape(-1)

    def make_state(self) -> BilevelState:
        return BilevelState(main=self._store(self.theta0),
                            shadow=self._store(self.shadow0))

    def init_store(self) -> ParamStore:
        return self._store(self.theta0)

    @staticmethod
    def _store(vec: np.ndarray) -> ParamStore:
        store = ParamStore()
        store.add("theta", vec.reshape(-1, 1))
        return store

    def teacher_store(self):
        return None

    def _lower(self, store: ParamStore) -> Tensor:
        th = store.tensor("theta")
        quad = scale(tsum(multiply(th, matmul(Tensor(self.Q), th))), 0.5)
        lin = tsum(multiply(th, Tensor(self.b.reshape(-1, 1))))
        return subtract(quad, lin)

    def lower_loss(self, store: ParamStore, step_idx: int) -> Tensor:
        return self._lower(store)

    def cu_loss(self, store: ParamStore, e: int) -> Tensor:
        diff = subtract(store.tensor("theta"), Tensor(self.a.reshape(-1, 1)))
        return scale(sum_sq(diff), 0.5)

    def upper_terms(self, store: ParamStore, e: int) -> tuple[Tensor, Tensor]:
        return self.cu_loss(store, e), self._lower(store)

    def gap_values(self, state: BilevelState, e: int, lft_theta_train):
        lft_theta = lft_theta_train if lft_theta_train is not None \
            else self._lower(state.main).item()
        return lft_theta, self._lower(state.shadow).item()


def quad_bilevel_reference(a: np.ndarray, Q: np.ndarray, b: np.ndarray,
                           penalties) -> dict:
    """Exact penalized minimizers and their distance to the true bilevel
    solution, per penalty value.

    Returns {"solution": projection of a onto {Q theta = b},
             "rows": [(penalty, minimizer, distance), ...]}.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    n = a.size
    if Q.shape != (n, n):
        raise ValueError(f"Q must be {n}x{n}, got {Q.shape}")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    eig = np.linalg.eigvalsh(Q)
    if eig.min() < -1e-10:
        raise ValueError("Q must be positive semidefinite")

    theta_p, *_ = np.linalg.lstsq(Q, b, rcond=None)
    if np.linalg.norm(Q @ theta_p - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
        raise ValueError("b is not in the range of Q: the lower problem has "
                         "no finite minimum")

    # null-space basis of Q via SVD
    _, s, vt = np.linalg.svd(Q)
    tol = max(Q.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    null_basis = vt[s <= tol].T if s.size else np.eye(n)
    if null_basis.size:
        solution = theta_p + null_basis @ (null_basis.T @ (a - theta_p))
    else:
        solution = theta_p

    rows = []
    eye = np.eye(n)
    for lam in penalties:
        lam = float(lam)
        if lam < 0:
            raise ValueError("penalties must be >= 0")
        minimizer = np.linalg.solve(eye + lam * Q, a + lam * b)
        rows.append((lam, minimizer, float(np.linalg.norm(minimizer - solution))))
    return {"solution": solution, "rows": rows}

"""Named parameter stores, gradient accumulators, optimizers, and the
finite-difference gradient oracle.

A store maps parameter names to f64 arrays plus a same-shaped gradient
accumulator. An optional binary mask per parameter pins pruned entries: masked
entries of both the value and every accumulated gradient are exactly zero, so
no optimizer step can resurrect them.

Frozen stores (teachers) hand out constant tensors; nothing computed from
them is ever recorded on a tape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np

from .tensor import GradientTape, Tensor

__all__ = [
    "ParamStore",
    "Sgd",
    "Adam",
    "make_optimizer",
    "finite_diff_check",
    "diagnostic_passes",
    "in_diagnostic_mode",
]

_DIAGNOSTIC = False


@contextlib.contextmanager
def diagnostic_passes():
    """Route forward-pass counts to the diagnostic counters inside the block.

    Used for observability-only evaluations (e.g. the logged optimality gap)
    so they never contaminate the training-cost accounting.
    """
    global _DIAGNOSTIC
    prev = _DIAGNOSTIC
    _DIAGNOSTIC = True
    try:
        yield
    finally:
        _DIAGNOSTIC = prev


def in_diagnostic_mode() -> bool:
    return _DIAGNOSTIC


class ParamStore:
    """Ordered map of named parameters with gradients, masks, and counters."""

    def __init__(self, frozen: bool = False):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}
        self._budgeted: tuple[str, ...] = ()  # set by pruning.apply_mask
        self.frozen = frozen
        # forward-pass accounting, maintained by the denoiser
        self.fwd_calls = 0
        self.fwd_rows = 0
        self.diag_calls = 0
        self.diag_rows = 0

    # -- construction -------------------------------------------------------

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise KeyError(f"parameter '{name}' already exists")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def copy(self, frozen: bool = False) -> "ParamStore":
        """Deep-copy values (and mask attachments); gradients start at zero."""
        out = ParamStore(frozen=frozen)
        for name, val in self._values.items():
            out.add(name, val)
        out._masks = dict(self._masks)  # mask arrays are immutable, share them
        out._budgeted = self._budgeted
        return out

    # -- access -------------------------------------------------------------

    def names(self) -> list[str]:
        return list(self._values)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._values.items())

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def mask(self, name: str):
        return self._masks.get(name)

    def tensor(self, name: str) -> Tensor:
        ref = None if self.frozen else (self, name)
        return Tensor(self._values[name], param_ref=ref)

    def set_value(self, name: str, value: np.ndarray) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(
                f"shape {arr.shape} does not match parameter '{name}' "
                f"{self._values[name].shape}")
        mask = self._masks.get(name)
        if mask is not None:
            arr = arr * mask
        self._values[name] = arr

    def load_values_from(self, other: "ParamStore") -> None:
        for name in self.names():
            self.set_value(name, other.value(name))

    # -- gradients ----------------------------------------------------------

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        mask = self._masks.get(name)
        if mask is not None:
            self._grads[name] += g * mask
        else:
            self._grads[name] += g

    def grads_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self._grads.values())

    # -- masks / sparsity ----------------------------------------------------

    def attach_mask(self, name: str, mask: np.ndarray) -> None:
        if mask.shape != self._values[name].shape:
            raise ValueError(f"mask shape {mask.shape} does not match "
                             f"parameter '{name}' {self._values[name].shape}")
        self._masks[name] = mask
        self._values[name] = self._values[name] * mask

    def check_masks(self) -> bool:
        """True iff every masked-out entry of every value is exactly zero."""
        return all(
            np.all(self._values[name][mask == 0.0] == 0.0)
            for name, mask in self._masks.items()
        )

    def nnz(self) -> int:
        """Nonzero count over the budgeted (prunable) tensors when a prune
        mask has been applied, otherwise over every tensor. Exempt tensors
        (zero-initialized biases) legitimately move off zero during training
        and are outside any sparsity budget."""
        names = self._budgeted if self._budgeted else tuple(self._values)
        return int(sum(np.count_nonzero(self._values[n]) for n in names))

    def n_params(self) -> int:
        return int(sum(v.size for v in self._values.values()))


class Sgd:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, store: ParamStore) -> None:
        for name in store.names():
            store._values[name] -= self.lr * store._grads[name]

    def reset(self) -> None:
        pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.reset()

    def reset(self) -> None:
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, store: ParamStore) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for name in store.names():
            g = store._grads[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            mask = store._masks.get(name)
            if mask is not None:
                update = update * mask
            store._values[name] -= update


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer '{kind}' (expected 'sgd' or 'adam')")


def finite_diff_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients of f and central differences.

    ``f`` must be a deterministic scalar-valued function of the store's
    current values (any randomness fixed outside). Masked-out entries are not
    free parameters and are skipped. Points where f is non-smooth (e.g. a relu
    kink exactly at an evaluation point) are outside the contract; perturb the
    inputs instead.

    Returns ``max over entries of |g_tape - g_fd| / max(1, |g_fd|)``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    store.zero_grads()
    with GradientTape() as tape:
        loss = f()
    tape.backward(loss)
    auto = {name: store.grad(name).copy() for name in store.names()}
    store.zero_grads()

    worst = 0.0
    for name in store.names():
        val = store._values[name]
        mask = store._masks.get(name)
        flat = val.reshape(-1)
        mflat = mask.reshape(-1) if mask is not None else None
        aflat = auto[name].reshape(-1)
        for i in range(flat.size):
            if mflat is not None and mflat[i] == 0.0:
                continue
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - g_fd) / max(1.0, abs(g_fd))
            if err > worst:
                worst = err
    return worst

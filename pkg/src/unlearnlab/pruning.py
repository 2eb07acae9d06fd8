"""Sparsity budgets as immutable binary masks over a parameter store.

``R`` is the kept-parameter fraction: a strategy keeps the ceil(R*n) entries
it scores highest, globally or per tensor. Embedding tables and biases are
exempt by default (they are tiny and pruning them disproportionately destroys
conditioning); exemption is recorded in the report and those tensors do not
count toward the budget.

Once applied, a mask rides along with the store: masked entries of values and
of every accumulated gradient stay exactly zero through any amount of
subsequent training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import ParamStore

__all__ = [
    "PruneMask",
    "PruneReport",
    "magnitude_prune",
    "apply_mask",
    "default_exempt",
    "PRUNE_STRATEGIES",
]


def default_exempt(name: str) -> bool:
    return "embed" in name or name.endswith(".b")


@dataclass(frozen=True)
class PruneMask:
    """Binary arrays matching a store's layout; immutable after creation."""

    entries: dict[str, np.ndarray]
    prunable: tuple[str, ...]

    def __post_init__(self):
        for arr in self.entries.values():
            arr.setflags(write=False)

    def kept_fraction(self) -> float:
        """Kept fraction over the prunable (budgeted) tensors."""
        kept = sum(int(self.entries[n].sum()) for n in self.prunable)
        total = sum(self.entries[n].size for n in self.prunable)
        return kept / total if total else 1.0

    def nnz(self, name: str) -> int:
        return int(self.entries[name].sum())


@dataclass(frozen=True)
class PruneReport:
    strategy: str
    budget: float
    scope: str
    global_kept_fraction: float
    per_tensor_kept_fraction: dict[str, float]
    exempt: tuple[str, ...]

    def rows(self) -> list[dict]:
        out = [{"tensor": "<global>", "kept_fraction": self.global_kept_fraction,
                "exempt": ""}]
        for name, frac in self.per_tensor_kept_fraction.items():
            out.append({"tensor": name, "kept_fraction": frac,
                        "exempt": "yes" if name in self.exempt else ""})
        return out


def _keep_count(r: float, n: int) -> int:
    return int(np.ceil(r * n))


def _top_k_mask(values: np.ndarray, k: int) -> np.ndarray:
    flat = np.abs(values).reshape(-1)
    mask = np.zeros(flat.size)
    if k > 0:
        idx = np.argpartition(-flat, k - 1)[:k]
        mask[idx] = 1.0
    return mask.reshape(values.shape)


def magnitude_prune(
    store: ParamStore,
    keep_fraction: float,
    scope: str = "global",
    exempt: Callable[[str], bool] = default_exempt,
) -> tuple[PruneMask, PruneReport]:
    """Keep the ceil(R*n) largest-magnitude entries of the prunable tensors.

    ``scope='global'`` ranks all prunable entries together (kept fraction is
    then within 1/n of R); ``scope='per-tensor'`` ranks within each tensor
    (rounding slack is per tensor). Ties at the cut are broken in a
    deterministic but arbitrary order, so equivariance guarantees only hold
    for distinct magnitudes.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep fraction must be in [0, 1], got {keep_fraction}")
    if scope not in ("global", "per-tensor"):
        raise ValueError(f"unknown prune scope '{scope}'")

    prunable = [n for n, _ in store.items() if not exempt(n)]
    exempt_names = tuple(n for n, _ in store.items() if exempt(n))
    entries: dict[str, np.ndarray] = {
        n: np.ones(store.value(n).shape) for n in exempt_names
    }

    if scope == "per-tensor":
        for name in prunable:
            val = store.value(name)
            entries[name] = _top_k_mask(val, _keep_count(keep_fraction, val.size))
    else:
        sizes = [store.value(n).size for n in prunable]
        flat_all = np.concatenate(
            [np.abs(store.value(n)).reshape(-1) for n in prunable])
        k = _keep_count(keep_fraction, flat_all.size)
        mask_flat = np.zeros(flat_all.size)
        if k > 0:
            idx = np.argpartition(-flat_all, min(k, flat_all.size) - 1)[:k]
            mask_flat[idx] = 1.0
        offset = 0
        for name, size in zip(prunable, sizes):
            entries[name] = mask_flat[offset:offset + size].reshape(
                store.value(name).shape)
            offset += size

    mask = PruneMask(entries=entries, prunable=tuple(prunable))
    per_tensor = {
        n: float(entries[n].sum() / entries[n].size) for n in store.names()
    }
    report = PruneReport(
        strategy="magnitude",
        budget=keep_fraction,
        scope=scope,
        global_kept_fraction=mask.kept_fraction(),
        per_tensor_kept_fraction=per_tensor,
        exempt=exempt_names,
    )
    return mask, report


def apply_mask(store: ParamStore, mask: PruneMask) -> None:
    """Zero masked values and attach the mask so every future gradient and
    optimizer step preserves the sparsity pattern."""
    names = set(store.names())
    if names != set(mask.entries):
        missing = names.symmetric_difference(mask.entries)
        raise ValueError(f"mask layout does not match store: {sorted(missing)}")
    for name in store.names():
        store.attach_mask(name, mask.entries[name])
    store._budgeted = mask.prunable


PRUNE_STRATEGIES: dict[str, Callable] = {
    "magnitude": magnitude_prune,
}

"""Learned scalar quantization of the low-dimensional weight vector.

Levels are initialized by 1-D k-means and then trained jointly with the
weights: the forward pass sees the quantized vector, the weight gradient
passes straight through the rounding, and each level receives the summed
gradient of the coordinates assigned to it.  After every update the levels
are re-sorted and assignments recomputed, so the stored state always
satisfies the nearest-level invariant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "QuantizerState",
    "kmeans_levels",
    "quantize_assign",
    "qat_step",
    "quantization_error",
]


def kmeans_levels(w: np.ndarray, num_levels: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm in 1-D, seeded and run to convergence or the cap.

    Returns levels sorted ascending.  If the data has fewer distinct values
    than requested, duplicate converged levels are collapsed with a warning,
    so the result may be shorter than ``num_levels``.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if len(w) < num_levels:
        raise ValueError(f"need at least {num_levels} samples, got {len(w)}")
    rng = np.random.default_rng(seed)
    levels = np.sort(rng.choice(w, size=num_levels, replace=False))
    for _ in range(max_iter):
        _, assign = quantize_assign(w, levels)
        new = levels.copy()
        for k in range(len(levels)):
            sel = assign == k
            if sel.any():
                new[k] = w[sel].mean()
        new = np.sort(new)
        if np.array_equal(new, levels):
            break
        levels = new
    uniq = np.unique(levels)
    if len(uniq) < num_levels:
        warnings.warn(
            f"collapsed {num_levels - len(uniq)} duplicate quantization levels "
            f"(data has too few distinct values)",
            stacklevel=2,
        )
    return uniq


def quantize_assign(w: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-level rounding; ties go to the lower level index."""
    w = np.asarray(w, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("levels must be non-empty")
    # argmin returns the first minimizer, which is exactly the tie rule
    assign = np.abs(w[:, None] - levels[None, :]).argmin(axis=1)
    return levels[assign], assign


def quantization_error(w: np.ndarray, levels: np.ndarray) -> float:
    """L2 distance between w and its quantized image."""
    w_hat, _ = quantize_assign(w, levels)
    return float(np.linalg.norm(np.asarray(w, dtype=np.float64) - w_hat))


@dataclass(frozen=True)
class QuantizerState:
    """Levels (always sorted ascending), current assignments, and the QAT rate."""

    levels: np.ndarray
    assignments: np.ndarray
    rho: float

    def __post_init__(self):
        if np.any(np.diff(self.levels) < 0):
            raise ValueError("levels must be sorted ascending")
        if self.assignments.size and (
            self.assignments.min() < 0 or self.assignments.max() >= len(self.levels)
        ):
            raise ValueError("assignment index out of range")

    @classmethod
    def init(cls, w: np.ndarray, num_levels: int, seed: int, rho: float) -> "QuantizerState":
        levels = kmeans_levels(w, num_levels, seed)
        _, assign = quantize_assign(w, levels)
        return cls(levels, assign, rho)

    def quantized(self) -> np.ndarray:
        return self.levels[self.assignments]


def qat_step(
    w: np.ndarray,
    state: QuantizerState,
    token_batch: np.ndarray,
    reparam,
    dtype=torch.float64,
) -> tuple[np.ndarray, QuantizerState]:
    """One joint gradient step on (w, levels) with a quantized forward pass.

    The forward pass uses levels[assignments]; the gradient reaching w is
    the straight-through identity, and each level accumulates the gradients
    of its assigned coordinates.  Both are updated with rate rho, then the
    levels are re-sorted and assignments recomputed.
    """
    wt = torch.as_tensor(np.asarray(w, dtype=np.float64), dtype=dtype).requires_grad_(True)
    ct = torch.as_tensor(state.levels, dtype=dtype).requires_grad_(True)
    at = torch.as_tensor(state.assignments, dtype=torch.int64)
    w_hat = ct[at] + (wt - wt.detach())
    docs = torch.as_tensor(np.asarray(token_batch, dtype=np.int64))
    if docs.ndim == 1:
        docs = docs[None, :]
    loss = reparam.model.mean_nll(reparam.theta(w_hat), docs)
    grad_w, grad_c = torch.autograd.grad(loss, [wt, ct])
    if not (torch.isfinite(grad_w).all() and torch.isfinite(grad_c).all()):
        raise RuntimeError("non-finite gradients in quantization-aware step")
    w_new = np.asarray(w, dtype=np.float64) - state.rho * grad_w.numpy().astype(np.float64)
    c_new = np.sort(state.levels - state.rho * grad_c.numpy().astype(np.float64))
    _, assign = quantize_assign(w_new, c_new)
    return w_new, QuantizerState(c_new, assign, state.rho)

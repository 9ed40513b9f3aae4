"""Compressed reparameterization: theta = theta0 + LoRA(P w).

``P`` is a Kronecker product of two column-orthonormal factors obtained by
QR-orthogonalizing seeded Gaussian matrices, applied matrix-free through the
reshape identity (Q1 (x) Q2) vec(W) = vec(Q1 W Q2^T).  The projected vector
parameterizes per-target low-rank updates U V added to selected weight
matrices (every attention query and value matrix plus the final output
projection); biases and all other parameters stay at their initialization.

Everything here is reconstructible from four integers and the seeds, so the
trained hypothesis is fully described by ``w`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelConfig, ParamVector, TransformerLM

__all__ = [
    "Projector",
    "LoraLayout",
    "SubLoraMap",
    "build_projector",
    "project",
    "build_lora_layout",
    "lora_expand",
    "build_sublora",
]


@dataclass(frozen=True)
class Projector:
    """Column-orthonormal Kronecker factors mapping R^d into the padded LoRA space."""

    q1: np.ndarray  # (D1, d1)
    q2: np.ndarray  # (D2, d2)
    d_lora: int
    seed: int

    @property
    def d1(self) -> int:
        return self.q1.shape[1]

    @property
    def d2(self) -> int:
        return self.q2.shape[1]

    @property
    def d(self) -> int:
        return self.d1 * self.d2

    @property
    def d_pad(self) -> int:
        return self.q1.shape[0] * self.q2.shape[0]


def _factor_intrinsic_dim(d: int) -> tuple[int, int]:
    """d1 = largest divisor of d not above sqrt(d); primes above 1000 are rejected."""
    d1 = 1
    for k in range(1, int(math.isqrt(d)) + 1):
        if d % k == 0:
            d1 = k
    if d1 == 1 and d > 1000:
        raise ValueError(
            f"intrinsic dimension {d} is prime and too large to factor; "
            "pick a d with a divisor near its square root"
        )
    return d1, d // d1


def build_projector(d_lora: int, d: int, seed: int) -> Projector:
    """Deterministically construct the orthonormal Kronecker projector.

    Factor shapes satisfy d1*d2 = d and D1*D2 >= d_lora with near-minimal
    padding; each factor is a QR-orthogonalized seeded Gaussian, so the
    Kronecker product has exactly orthonormal columns.
    """
    if not 1 <= d <= d_lora:
        raise ValueError(f"need 1 <= d <= d_lora, got d={d}, d_lora={d_lora}")
    d1, d2 = _factor_intrinsic_dim(d)
    big1 = max(d1, math.ceil(math.sqrt(d_lora * d1 / d2)))
    big2 = max(d2, math.ceil(d_lora / big1))
    if big1 * big2 < d_lora:
        raise ValueError("infeasible projector factorization")
    rng = np.random.default_rng(seed)
    q1 = np.linalg.qr(rng.normal(size=(big1, d1)))[0]
    q2 = np.linalg.qr(rng.normal(size=(big2, d2)))[0]
    return Projector(q1, q2, d_lora, seed)


def project(projector: Projector, w: np.ndarray) -> np.ndarray:
    """Apply P to w without materializing the Kronecker product.

    Returns the first d_lora entries of (Q1 (x) Q2) w; the padded tail is
    inert and dropped.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (projector.d,):
        raise ValueError(f"w must have length {projector.d}, got {w.shape}")
    mat = w.reshape(projector.d1, projector.d2)
    full = projector.q1 @ mat @ projector.q2.T
    return full.reshape(-1)[: projector.d_lora]


@dataclass(frozen=True)
class LoraLayout:
    """Rank and target-matrix bookkeeping for the low-rank expansion.

    ``targets`` holds, per adapted matrix, its name, shape (a, b), offset in
    the flat parameter vector, and offset of its (U, V) block inside the
    LoRA parameter vector; that block stores U (a x r) then V (r x b).
    """

    rank: int
    targets: tuple[tuple[str, tuple[int, int], int, int], ...]

    @property
    def d_lora(self) -> int:
        return sum(self.rank * (a + b) for _, (a, b), _, _ in self.targets)


def build_lora_layout(model: TransformerLM, rank: int) -> LoraLayout:
    """Select every attention query/value matrix plus the output head."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    wanted = []
    for i in range(model.config.n_layers):
        wanted += [f"h{i}.attn.q.weight", f"h{i}.attn.v.weight"]
    wanted.append("head.weight")
    by_name = {name: (shape, off) for name, shape, off in model.layout}
    targets = []
    lora_off = 0
    for name in wanted:
        shape, theta_off = by_name[name]
        a, b = shape
        targets.append((name, (a, b), theta_off, lora_off))
        lora_off += rank * (a + b)
    return LoraLayout(rank, tuple(targets))


def lora_expand(theta0: ParamVector, layout: LoraLayout, lora_vec: np.ndarray) -> ParamVector:
    """theta with W_j = W0_j + U_j V_j on targets; everything else untouched."""
    lora_vec = np.asarray(lora_vec, dtype=np.float64)
    if lora_vec.shape != (layout.d_lora,):
        raise ValueError(f"lora vector must have length {layout.d_lora}")
    r = layout.rank
    out = theta0.values.copy()
    for _, (a, b), theta_off, lora_off in layout.targets:
        u = lora_vec[lora_off : lora_off + a * r].reshape(a, r)
        v = lora_vec[lora_off + a * r : lora_off + r * (a + b)].reshape(r, b)
        out[theta_off : theta_off + a * b] += (u @ v).reshape(-1)
    return ParamVector(out, theta0.layout)


class SubLoraMap:
    """The differentiable composition w -> theta0 + LoRA(P w) as torch ops.

    Immutable after construction; `theta` is pure, so concurrent forward
    evaluations may share one instance.  Tensors are cached per dtype.
    """

    def __init__(
        self,
        model: TransformerLM,
        theta0: ParamVector,
        projector: Projector,
        layout: LoraLayout,
    ):
        if projector.d_lora != layout.d_lora:
            raise ValueError("projector and layout disagree on the LoRA dimension")
        self.model = model
        self.theta0 = theta0
        self.projector = projector
        self.layout = layout
        self.dim = projector.d
        idx = np.concatenate(
            [
                np.arange(theta_off, theta_off + a * b, dtype=np.int64)
                for _, (a, b), theta_off, _ in layout.targets
            ]
        )
        self._idx = torch.from_numpy(idx)
        self._cache: dict[torch.dtype, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    def _tensors(self, dtype: torch.dtype):
        if dtype not in self._cache:
            self._cache[dtype] = (
                torch.as_tensor(self.theta0.values, dtype=dtype),
                torch.as_tensor(self.projector.q1, dtype=dtype),
                torch.as_tensor(self.projector.q2, dtype=dtype),
            )
        return self._cache[dtype]

    def project_t(self, w: torch.Tensor) -> torch.Tensor:
        _, q1, q2 = self._tensors(w.dtype)
        full = q1 @ w.view(self.projector.d1, self.projector.d2) @ q2.T
        return full.reshape(-1)[: self.projector.d_lora]

    def theta(self, w: torch.Tensor) -> torch.Tensor:
        """Flat parameter vector; gradients flow back to w through P and UV."""
        theta0, _, _ = self._tensors(w.dtype)
        lora = self.project_t(w)
        r = self.layout.rank
        deltas = []
        for _, (a, b), _, lora_off in self.layout.targets:
            u = lora[lora_off : lora_off + a * r].view(a, r)
            v = lora[lora_off + a * r : lora_off + r * (a + b)].view(r, b)
            deltas.append((u @ v).reshape(-1))
        return theta0.index_add(0, self._idx, torch.cat(deltas))

    def theta_numpy(self, w: np.ndarray) -> ParamVector:
        """Numpy route through the same composition, for checks and export."""
        return lora_expand(self.theta0, self.layout, project(self.projector, w))


def build_sublora(
    model: TransformerLM, theta0: ParamVector, d: int, rank: int, seed: int
) -> SubLoraMap:
    """Assemble the full map from integers + seed; rebuildable bit-for-bit."""
    layout = build_lora_layout(model, rank)
    projector = build_projector(layout.d_lora, d, seed)
    return SubLoraMap(model, theta0, projector, layout)

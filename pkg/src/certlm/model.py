"""Small decoder-only transformer with an explicit flat parameter space.

The forward pass is a pure function of a parameter dictionary, so any
differentiable map from a low-dimensional vector to the flat parameter
vector composes with it and gradients flow end to end.  Sequence
probabilities are proper distributions over whole documents: every input
is prefixed with a reserved start-of-sequence embedding (an input-only row,
id = vocab_size), so the first token of a document is predicted like any
other while the output vocabulary stays at V.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ModelConfig",
    "ParamVector",
    "TransformerLM",
    "IdentityReparam",
    "NonFiniteLossError",
    "save_params",
    "load_params",
]

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 128
    context_length: int = 256
    vocab_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")

    @property
    def arch_tag(self) -> str:
        """Canonical string of every shape and initialization choice."""
        return (
            f"dec(L{self.n_layers}-H{self.n_heads}-E{self.embed_dim}"
            f"-C{self.context_length}-V{self.vocab_size})"
            f"-preLN-gelu-bosrow-init(g0.02,res/sqrt(2L),ln=1,b=0)-seed{self.seed}"
        )


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter values plus the (name, shape, offset) layout to unflatten them."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...], int], ...]

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("values must be a flat vector")
        total = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if total != len(self.values):
            raise ValueError("layout extents do not sum to the vector length")

    @property
    def dim(self) -> int:
        return len(self.values)

    def unflatten(self) -> dict[str, np.ndarray]:
        """Per-layer views; writing through them mutates the flat vector."""
        out = {}
        for name, shape, off in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[off : off + size].reshape(shape)
        return out

    @classmethod
    def flatten(
        cls,
        arrays: dict[str, np.ndarray],
        layout: tuple[tuple[str, tuple[int, ...], int], ...],
    ) -> "ParamVector":
        total = sum(int(np.prod(shape)) for _, shape, _ in layout)
        values = np.empty(total, dtype=np.float64)
        for name, shape, off in layout:
            size = int(np.prod(shape))
            values[off : off + size] = np.asarray(arrays[name], dtype=np.float64).reshape(-1)
        return cls(values, layout)


class NonFiniteLossError(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries the batch index."""

    def __init__(self, batch_index: int):
        super().__init__(f"non-finite loss at batch index {batch_index}")
        self.batch_index = batch_index


def _build_layout(cfg: ModelConfig) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    entries: list[tuple[str, tuple[int, ...]]] = []
    E, V, L = cfg.embed_dim, cfg.vocab_size, cfg.context_length
    entries.append(("tok_embed", (V + 1, E)))  # extra row: start-of-sequence
    entries.append(("pos_embed", (L, E)))
    for i in range(cfg.n_layers):
        p = f"h{i}."
        entries += [
            (p + "ln1.weight", (E,)),
            (p + "ln1.bias", (E,)),
            (p + "attn.q.weight", (E, E)),
            (p + "attn.q.bias", (E,)),
            (p + "attn.k.weight", (E, E)),
            (p + "attn.k.bias", (E,)),
            (p + "attn.v.weight", (E, E)),
            (p + "attn.v.bias", (E,)),
            (p + "attn.o.weight", (E, E)),
            (p + "attn.o.bias", (E,)),
            (p + "ln2.weight", (E,)),
            (p + "ln2.bias", (E,)),
            (p + "mlp.fc.weight", (4 * E, E)),
            (p + "mlp.fc.bias", (4 * E,)),
            (p + "mlp.proj.weight", (E, 4 * E)),
            (p + "mlp.proj.bias", (E,)),
        ]
    entries += [
        ("ln_f.weight", (E,)),
        ("ln_f.bias", (E,)),
        ("head.weight", (V, E)),
        ("head.bias", (V,)),
    ]
    layout = []
    off = 0
    for name, shape in entries:
        layout.append((name, shape, off))
        off += int(np.prod(shape))
    return tuple(layout)


class TransformerLM:
    """Shapes, initialization, and the pure functional forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.layout = _build_layout(config)
        self.dim = sum(int(np.prod(s)) for _, s, _ in self.layout)
        self.bos_id = config.vocab_size

    # ------------------------------------------------------------------ init

    def init_params(self) -> ParamVector:
        """Seeded initialization: N(0, 0.02) matrices with the residual
        projections scaled by 1/sqrt(2 * n_layers), unit layernorm gains,
        zero biases."""
        rng = np.random.default_rng(self.config.seed)
        res_scale = 1.0 / math.sqrt(2.0 * self.config.n_layers)
        values = np.empty(self.dim, dtype=np.float64)
        for name, shape, off in self.layout:
            size = int(np.prod(shape))
            if name.endswith(".bias"):
                block = np.zeros(size)
            elif len(shape) == 1:  # layernorm gain
                block = np.ones(size)
            else:
                std = 0.02
                if name.endswith("attn.o.weight") or name.endswith("mlp.proj.weight"):
                    std *= res_scale
                block = rng.normal(0.0, std, size=size)
            values[off : off + size] = block
        return ParamVector(values, self.layout)

    # ---------------------------------------------------------------- params

    def to_torch(self, theta: ParamVector | np.ndarray, dtype=torch.float64) -> torch.Tensor:
        vals = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
        return torch.as_tensor(vals, dtype=dtype)

    def unflatten_torch(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        """Views into the flat tensor; autograd flows back through them."""
        out = {}
        for name, shape, off in self.layout:
            size = int(np.prod(shape))
            out[name] = flat.narrow(0, off, size).view(shape)
        return out

    # --------------------------------------------------------------- forward

    def _forward(self, p: dict[str, torch.Tensor], idx: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        B, T = idx.shape
        if T > cfg.context_length:
            raise ValueError(f"input length {T} exceeds context length {cfg.context_length}")
        nh, E = cfg.n_heads, cfg.embed_dim
        hd = E // nh
        h = p["tok_embed"][idx] + p["pos_embed"][:T]
        mask = torch.full((T, T), float("-inf"), dtype=h.dtype).triu(1)
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            x = F.layer_norm(h, (E,), p[pre + "ln1.weight"], p[pre + "ln1.bias"])
            q = (x @ p[pre + "attn.q.weight"].T + p[pre + "attn.q.bias"])
            k = (x @ p[pre + "attn.k.weight"].T + p[pre + "attn.k.bias"])
            v = (x @ p[pre + "attn.v.weight"].T + p[pre + "attn.v.bias"])
            q = q.view(B, T, nh, hd).transpose(1, 2)
            k = k.view(B, T, nh, hd).transpose(1, 2)
            v = v.view(B, T, nh, hd).transpose(1, 2)
            att = (q @ k.transpose(-2, -1)) / math.sqrt(hd) + mask
            att = F.softmax(att, dim=-1)
            y = (att @ v).transpose(1, 2).reshape(B, T, E)
            h = h + y @ p[pre + "attn.o.weight"].T + p[pre + "attn.o.bias"]
            x = F.layer_norm(h, (E,), p[pre + "ln2.weight"], p[pre + "ln2.bias"])
            x = F.gelu(x @ p[pre + "mlp.fc.weight"].T + p[pre + "mlp.fc.bias"])
            h = h + x @ p[pre + "mlp.proj.weight"].T + p[pre + "mlp.proj.bias"]
        h = F.layer_norm(h, (E,), p["ln_f.weight"], p["ln_f.bias"])
        return h @ p["head.weight"].T + p["head.bias"]

    def logits_for_targets(self, flat: torch.Tensor, docs: torch.Tensor) -> torch.Tensor:
        """Logit rows predicting every token of each document.

        ``docs`` is (B, T) with T <= context_length; the input is the
        document shifted right behind the start-of-sequence row, so row i
        conditions on exactly the first i tokens.
        """
        B, T = docs.shape
        bos = torch.full((B, 1), self.bos_id, dtype=docs.dtype)
        idx = torch.cat([bos, docs[:, :-1]], dim=1)
        return self._forward(self.unflatten_torch(flat), idx)

    def logits_for_context(self, flat: torch.Tensor, ctxs: torch.Tensor) -> torch.Tensor:
        """Next-token logits after each raw context window (no start row).

        Used for mid-document windows where the prefix is not the document
        start.  Returns (B, V): the prediction following the last position.
        """
        logits = self._forward(self.unflatten_torch(flat), ctxs)
        return logits[:, -1, :]

    # ------------------------------------------------------------ public ops

    def conditional_logprobs(
        self, theta: ParamVector | np.ndarray, sequence: Sequence[int]
    ) -> np.ndarray:
        """Base-2 log probability rows, one per position of the sequence.

        Row i is the length-V distribution over token i given tokens [:i];
        each row exponentiates to a sum of 1 within 1e-9 (float64 softmax).
        """
        seq = np.asarray(sequence, dtype=np.int64)
        if seq.ndim != 1 or seq.size == 0:
            raise ValueError("sequence must be a non-empty 1-D token array")
        if seq.size > self.config.context_length:
            raise ValueError(
                f"sequence length {seq.size} exceeds context length "
                f"{self.config.context_length}; window the document instead"
            )
        flat = self.to_torch(theta, torch.float64)
        with torch.no_grad():
            logits = self.logits_for_targets(flat, torch.from_numpy(seq)[None, :])
            rows = F.log_softmax(logits[0], dim=-1) / LN2
        return rows.numpy()

    def mean_nll(
        self, flat: torch.Tensor, docs: torch.Tensor, per_sample: bool = False
    ) -> torch.Tensor:
        """Mean negative log-likelihood in nats over all tokens of the batch."""
        logits = self.logits_for_targets(flat, docs)
        B, T, V = logits.shape
        nll = F.cross_entropy(logits.reshape(B * T, V), docs.reshape(B * T), reduction="none")
        return nll.view(B, T).mean(dim=1) if per_sample else nll.mean()

    def loss_and_grad(
        self,
        reparam,
        w: np.ndarray,
        token_batch: np.ndarray,
        dtype=torch.float64,
    ) -> tuple[float, np.ndarray]:
        """Mean batch NLL (nats) and its exact gradient with respect to ``w``.

        ``reparam`` maps a torch vector w to the flat parameter vector
        (identity, the low-rank subspace map, or its quantized composition);
        the gradient is the chain rule through that map.
        """
        wt = torch.as_tensor(np.asarray(w, dtype=np.float64), dtype=dtype).requires_grad_(True)
        docs = torch.as_tensor(np.asarray(token_batch, dtype=np.int64))
        if docs.ndim == 1:
            docs = docs[None, :]
        flat = reparam.theta(wt)
        loss = self.mean_nll(flat, docs)
        if not torch.isfinite(loss):
            with torch.no_grad():
                per = self.mean_nll(flat.detach(), docs, per_sample=True)
            bad = int(torch.nonzero(~torch.isfinite(per))[0, 0]) if (~torch.isfinite(per)).any() else 0
            raise NonFiniteLossError(bad)
        (grad,) = torch.autograd.grad(loss, wt)
        return float(loss), grad.detach().cpu().numpy().astype(np.float64)


class IdentityReparam:
    """The trivial parameterization: w is the full flat parameter vector."""

    def __init__(self, model: TransformerLM):
        self.dim = model.dim

    def theta(self, w: torch.Tensor) -> torch.Tensor:
        return w


# ------------------------------------------------------------------ storage

_CKPT_MAGIC = b"CLMP"


def save_params(path, theta: ParamVector, config: ModelConfig) -> None:
    """Checkpoint: length-prefixed config JSON header, float32 LE payload, SHA-256 digest."""
    header = {
        "config": {
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "embed_dim": config.embed_dim,
            "context_length": config.context_length,
            "vocab_size": config.vocab_size,
            "seed": config.seed,
        },
        "arch_tag": config.arch_tag,
        "dim": theta.dim,
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += _CKPT_MAGIC
    body += struct.pack("<I", len(blob))
    body += blob
    body += theta.values.astype("<f4").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_params(path) -> tuple[ParamVector, ModelConfig]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise ValueError("digest mismatch: checkpoint corrupted")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    values = np.frombuffer(
        raw[8 + hlen : 8 + hlen + 4 * header["dim"]], dtype="<f4"
    ).astype(np.float64)
    model = TransformerLM(config)
    return ParamVector(values, model.layout), config

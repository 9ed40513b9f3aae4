"""Byte-level corpus ingestion, document splitting, sampling, and shuffling.

Documents are the unit the generalization bounds sample over, so their
boundaries must be a deterministic function of the raw bytes and the
splitting policy.  All randomness (subsampling, per-document permutation)
is seeded and reproducible.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "SplitPolicy",
    "TokenizedCorpus",
    "SampleSpec",
    "tokenize_bytes",
    "detokenize",
    "ingest",
    "ingest_path",
    "chunk_sequences",
    "permute_within",
    "draw_subsample",
    "save_corpus",
    "load_corpus",
]

BYTE_VOCAB = 256


@dataclass(frozen=True)
class SplitPolicy:
    """How raw bytes become documents.

    ``fixed_length`` cuts the byte stream into records of exactly ``length``
    tokens (the last record may be shorter).  ``blank_line`` splits on runs
    of two or more newlines, then falls back to fixed ``max_doc_tokens``
    records for any over-long piece.  Any document exceeding ``hard_cap``
    is an error.
    """

    kind: str = "fixed_length"
    length: int = 64
    max_doc_tokens: int | None = 4096
    hard_cap: int = 1_000_000

    def __post_init__(self):
        if self.kind not in ("fixed_length", "blank_line"):
            raise ValueError(f"unknown split policy {self.kind!r}")
        if self.kind == "fixed_length" and self.length < 1:
            raise ValueError("fixed_length policy needs length >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "length": self.length,
            "max_doc_tokens": self.max_doc_tokens,
            "hard_cap": self.hard_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPolicy":
        return cls(**d)


@dataclass(frozen=True)
class TokenizedCorpus:
    """An immutable set of token documents stored as one flat buffer.

    ``offsets`` has m+1 entries; document i is ``tokens[offsets[i]:offsets[i+1]]``.
    Every token lies in [0, vocab_size).
    """

    tokens: np.ndarray
    offsets: np.ndarray
    vocab_size: int = BYTE_VOCAB
    source_digest: str = ""
    split_policy: SplitPolicy | None = None

    def __post_init__(self):
        if len(self.offsets) < 2:
            raise ValueError("corpus must contain at least one document")
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.tokens):
            raise ValueError("offsets must span the token buffer")
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("empty documents are not allowed")
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    @property
    def total_tokens(self) -> int:
        return int(len(self.tokens))

    def document(self, i: int) -> np.ndarray:
        return self.tokens[self.offsets[i] : self.offsets[i + 1]]

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(self.m):
            yield self.document(i)


@dataclass(frozen=True)
class SampleSpec:
    """A reproducible with-replacement subsample of the document set."""

    n: int
    seed: int
    mode: str = "document"  # "document" | "sequence"
    sequence_length: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mode not in ("document", "sequence"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "sequence" and not self.sequence_length:
            raise ValueError("sequence mode needs a sequence_length")


def tokenize_bytes(raw: bytes) -> np.ndarray:
    """Bytes to token ids; the identity map onto [0, 256)."""
    return np.frombuffer(raw, dtype=np.uint8).copy()


def detokenize(tokens: np.ndarray) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


def _build(docs: list[np.ndarray], digest: str, policy: SplitPolicy | None) -> TokenizedCorpus:
    offsets = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum([len(d) for d in docs], out=offsets[1:])
    tokens = np.concatenate(docs) if docs else np.zeros(0, dtype=np.uint8)
    return TokenizedCorpus(tokens, offsets, BYTE_VOCAB, digest, policy)


def ingest(raw: bytes, policy: SplitPolicy = SplitPolicy()) -> TokenizedCorpus:
    """Tokenize raw bytes at byte level and split into documents.

    Empty documents are dropped; an empty input or a document exceeding the
    policy's hard cap is an error (the latter names the offending index).
    """
    if not raw:
        raise ValueError("cannot ingest empty input")
    digest = hashlib.sha256(raw).hexdigest()
    if policy.kind == "fixed_length":
        pieces = [raw[i : i + policy.length] for i in range(0, len(raw), policy.length)]
    else:
        pieces = []
        for part in re.split(rb"\n{2,}", raw):
            if not part:
                continue
            cap = policy.max_doc_tokens
            if cap is not None and len(part) > cap:
                pieces.extend(part[i : i + cap] for i in range(0, len(part), cap))
            else:
                pieces.append(part)
    docs = [tokenize_bytes(p) for p in pieces if p]
    if not docs:
        raise ValueError("splitting produced no non-empty documents")
    for i, d in enumerate(docs):
        if len(d) > policy.hard_cap:
            raise ValueError(f"document {i} has {len(d)} tokens, above the hard cap {policy.hard_cap}")
    return _build(docs, digest, policy)


def ingest_path(path: str | Path, policy: SplitPolicy = SplitPolicy()) -> TokenizedCorpus:
    """Ingest a file, or every regular file under a directory in sorted order."""
    p = Path(path)
    if p.is_dir():
        raw = b"".join(f.read_bytes() for f in sorted(p.rglob("*")) if f.is_file())
    else:
        raw = p.read_bytes()
    return ingest(raw, policy)


def chunk_sequences(corpus: TokenizedCorpus, sequence_length: int) -> TokenizedCorpus:
    """Re-split the concatenated corpus into fixed-length chunks.

    The trailing remainder shorter than one chunk is dropped.  The result is
    the sample set for sequence-level bounds, where the i.i.d. unit is a
    chunk of the fixed concatenated stream rather than a document.
    """
    if sequence_length < 1:
        raise ValueError("sequence_length must be >= 1")
    n_chunks = corpus.total_tokens // sequence_length
    if n_chunks == 0:
        raise ValueError(
            f"corpus has {corpus.total_tokens} tokens, shorter than one chunk of {sequence_length}"
        )
    tokens = corpus.tokens[: n_chunks * sequence_length].copy()
    offsets = np.arange(n_chunks + 1, dtype=np.int64) * sequence_length
    return TokenizedCorpus(tokens, offsets, corpus.vocab_size, corpus.source_digest, None)


def permute_within(corpus: TokenizedCorpus, seed: int) -> TokenizedCorpus:
    """Shuffle each document's tokens independently with a seeded permutation.

    Token multisets per document are unchanged; only order is destroyed.
    """
    rng = np.random.default_rng(seed)
    out = np.empty_like(corpus.tokens)
    for i in range(corpus.m):
        lo, hi = corpus.offsets[i], corpus.offsets[i + 1]
        out[lo:hi] = corpus.tokens[lo:hi][rng.permutation(hi - lo)]
    return TokenizedCorpus(
        out, corpus.offsets.copy(), corpus.vocab_size, corpus.source_digest, corpus.split_policy
    )


def draw_subsample(corpus: TokenizedCorpus, spec: SampleSpec) -> np.ndarray:
    """n document indices drawn i.i.d. uniformly with replacement, seed-determined."""
    rng = np.random.default_rng(spec.seed)
    return rng.integers(0, corpus.m, size=spec.n, dtype=np.int64)


def save_corpus(corpus: TokenizedCorpus, outdir: str | Path) -> None:
    """Write manifest JSON plus flat token bytes and 64-bit LE offsets."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tokens.bin").write_bytes(corpus.tokens.astype(np.uint8).tobytes())
    (out / "offsets.bin").write_bytes(corpus.offsets.astype("<i8").tobytes())
    manifest = {
        "vocab_size": corpus.vocab_size,
        "m": corpus.m,
        "total_tokens": corpus.total_tokens,
        "source_digest": corpus.source_digest,
        "split_policy": corpus.split_policy.to_dict() if corpus.split_policy else None,
        "files": {"tokens": "tokens.bin", "offsets": "offsets.bin"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(indir: str | Path) -> TokenizedCorpus:
    d = Path(indir)
    manifest = json.loads((d / "manifest.json").read_text())
    tokens = np.frombuffer((d / manifest["files"]["tokens"]).read_bytes(), dtype=np.uint8).copy()
    offsets = np.frombuffer((d / manifest["files"]["offsets"]).read_bytes(), dtype="<i8").copy()
    policy = (
        SplitPolicy.from_dict(manifest["split_policy"]) if manifest.get("split_policy") else None
    )
    return TokenizedCorpus(
        tokens, offsets, manifest["vocab_size"], manifest["source_digest"], policy
    )

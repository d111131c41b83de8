"""Dual-encoder student and the two teacher scorers.

The trainable student is a linear bag-of-hashed-tokens encoder: tokens are
hashed into ``d_feat`` buckets with 64-bit FNV-1a (offset basis
``0xcbf29ce484222325``, prime ``0x100000001b3``, over the token's UTF-8
bytes), and the count vector, divided by the total token count, is
projected by a trainable matrix W into ``d_emb`` dimensions. Relevance is
the dot product of the two encodings, so passages can be encoded once and
searched by maximum inner product. The encoder is linear in W, which gives
the training loop a closed-form gradient.

Two teachers supervise it:

* pairwise scores come from file (``TeacherScoreStore`` lookups);
* in-batch supervision uses a frozen late-interaction scorer over fixed
  hashed token embeddings: sum over query tokens of the best token-level
  dot product against the passage.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .corpus import TeacherScoreStore

D_FEAT_DEFAULT = 4096
D_EMB_DEFAULT = 64
D_TOK_DEFAULT = 32
EMBEDDING_TABLE_SIZE_DEFAULT = 65536

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF

_CHECKPOINT_MAGIC = b"TASDR_W\x00"
_CHECKPOINT_VERSION = 1


@lru_cache(maxsize=1 << 20)
def stable_hash(token: str) -> int:
    """64-bit FNV-1a over the token's UTF-8 bytes; platform independent."""
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & _U64_MASK
    return h


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse hashed-token counts: parallel (index, count) arrays."""

    indices: np.ndarray  # int64, strictly increasing, < dim
    counts: np.ndarray  # float64, each >= 1
    total: float  # counts.sum()
    dim: int

    def to_dict(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.indices, self.counts)}


def hash_features(tokens: Sequence[str], d_feat: int = D_FEAT_DEFAULT) -> FeatureVector:
    """Hash tokens into d_feat buckets, accumulating counts per bucket."""
    if not tokens:
        raise ValueError("cannot hash an empty token sequence")
    counts: dict[int, int] = {}
    for tok in tokens:
        idx = stable_hash(tok) % d_feat
        counts[idx] = counts.get(idx, 0) + 1
    indices = np.array(sorted(counts), dtype=np.int64)
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    return FeatureVector(indices, values, float(values.sum()), d_feat)


class StudentModel:
    """Trainable linear projection W (d_feat x d_emb) over hashed features."""

    def __init__(self, W: np.ndarray, seed: int = 0):
        W = np.ascontiguousarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("W must be a 2-D matrix")
        if not np.all(np.isfinite(W)):
            raise ValueError("W contains non-finite entries")
        self.W = W
        self.seed = seed

    @property
    def d_feat(self) -> int:
        return self.W.shape[0]

    @property
    def d_emb(self) -> int:
        return self.W.shape[1]

    @classmethod
    def initialize(
        cls,
        d_feat: int = D_FEAT_DEFAULT,
        d_emb: int = D_EMB_DEFAULT,
        seed: int = 0,
        scale: float = 0.1,
    ) -> "StudentModel":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((d_feat, d_emb)) * scale, seed=seed)

    def copy(self) -> "StudentModel":
        return StudentModel(self.W.copy(), seed=self.seed)

    def checksum(self) -> str:
        """SHA-256 over dims + W bytes; identifies the exact parameters."""
        h = hashlib.sha256()
        h.update(struct.pack("<II", self.d_feat, self.d_emb))
        h.update(np.ascontiguousarray(self.W).tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        """Checkpoint format: magic, version byte, d_feat u32, d_emb u32,
        seed u64, then W row-major as little-endian float64."""
        from .corpus import atomic_write_bytes

        header = _CHECKPOINT_MAGIC + struct.pack(
            "<BIIQ", _CHECKPOINT_VERSION, self.d_feat, self.d_emb, self.seed
        )
        body = self.W.astype("<f8").tobytes()
        atomic_write_bytes(path, header + body)

    @classmethod
    def load(cls, path: str) -> "StudentModel":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:8] != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a student checkpoint")
        version, d_feat, d_emb, seed = struct.unpack("<BIIQ", blob[8:25])
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        expected = 25 + d_feat * d_emb * 8
        if len(blob) != expected:
            raise ValueError(f"{path}: truncated checkpoint")
        W = np.frombuffer(blob[25:], dtype="<f8").reshape(d_feat, d_emb)
        return cls(W.copy(), seed=seed)


def student_encode(model: StudentModel, features: FeatureVector) -> np.ndarray:
    """Mean-normalized projection: (W^T f) / max(1, total token count)."""
    if features.dim != model.d_feat:
        raise ValueError(
            f"feature dim {features.dim} does not match model d_feat {model.d_feat}"
        )
    if len(features.indices) and int(features.indices[-1]) >= model.d_feat:
        raise ValueError("feature index out of range")
    vec = model.W[features.indices].T @ features.counts
    out = vec / max(1.0, features.total)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite encoding")
    return out


def encode_tokens(model: StudentModel, tokens: Sequence[str]) -> np.ndarray:
    return student_encode(model, hash_features(tokens, model.d_feat))


def encode_many(model: StudentModel, token_lists: Iterable[Sequence[str]]) -> np.ndarray:
    """Stack encodings for many token sequences into an (n, d_emb) matrix."""
    rows = [encode_tokens(model, toks) for toks in token_lists]
    if not rows:
        return np.zeros((0, model.d_emb))
    return np.ascontiguousarray(np.vstack(rows))


def student_score(q_vec: np.ndarray, p_vec: np.ndarray) -> float:
    """Dot-product relevance between one query and one passage encoding."""
    q_vec = np.asarray(q_vec, dtype=np.float64)
    p_vec = np.asarray(p_vec, dtype=np.float64)
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return float(q_vec @ p_vec)


class TokenEmbeddingTable:
    """Frozen unit-norm token embeddings for the late-interaction teacher.

    A (table_size, d_tok) matrix is generated once from the seed; a token
    maps to row ``stable_hash(token) % table_size``. Deterministic given
    the seed; never trained.
    """

    def __init__(
        self,
        d_tok: int = D_TOK_DEFAULT,
        seed: int = 0,
        table_size: int = EMBEDDING_TABLE_SIZE_DEFAULT,
    ):
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((table_size, d_tok))
        norms = np.linalg.norm(table, axis=1, keepdims=True)
        np.maximum(norms, 1e-30, out=norms)
        self._table = np.ascontiguousarray(table / norms)
        self.d_tok = d_tok
        self.seed = seed
        self.table_size = table_size

    def bucket(self, token: str) -> int:
        return stable_hash(token) % self.table_size

    def vector(self, token: str) -> np.ndarray:
        return self._table[self.bucket(token)]

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        idx = np.fromiter(
            (self.bucket(t) for t in tokens), dtype=np.int64, count=len(tokens)
        )
        return self._table[idx]


def teacher_late_interaction(
    q_tokens: Sequence[str],
    p_tokens: Sequence[str],
    table: TokenEmbeddingTable,
    backend=None,
) -> float:
    """Sum over query tokens of the max dot product over passage tokens.

    Bounded above by len(q_tokens) since all embeddings are unit norm.
    """
    if not q_tokens or not p_tokens:
        raise ValueError("token lists must be non-empty")
    kern = backend if backend is not None else _kernels.active
    q_emb = np.ascontiguousarray(table.encode_tokens(q_tokens))
    p_emb = np.ascontiguousarray(table.encode_tokens(p_tokens))
    q_off = np.array([0, len(q_tokens)], dtype=np.int64)
    p_off = np.array([0, len(p_tokens)], dtype=np.int64)
    return float(kern.late_interaction_scores(q_emb, q_off, p_emb, p_off)[0, 0])


def late_interaction_matrix(
    q_token_lists: Sequence[Sequence[str]],
    p_token_lists: Sequence[Sequence[str]],
    table: TokenEmbeddingTable,
    backend=None,
) -> np.ndarray:
    """All-pairs late-interaction scores: (n_queries, n_passages)."""
    if not q_token_lists or not p_token_lists:
        raise ValueError("token list collections must be non-empty")
    kern = backend if backend is not None else _kernels.active
    q_emb = np.ascontiguousarray(
        np.concatenate([table.encode_tokens(t) for t in q_token_lists])
    )
    p_emb = np.ascontiguousarray(
        np.concatenate([table.encode_tokens(t) for t in p_token_lists])
    )
    q_off = np.zeros(len(q_token_lists) + 1, dtype=np.int64)
    np.cumsum([len(t) for t in q_token_lists], out=q_off[1:])
    p_off = np.zeros(len(p_token_lists) + 1, dtype=np.int64)
    np.cumsum([len(t) for t in p_token_lists], out=p_off[1:])
    return kern.late_interaction_scores(q_emb, q_off, p_emb, p_off)


def pairwise_teacher(q_id: str, p_id: str, store: TeacherScoreStore) -> float:
    """Look up the file-provided pairwise teacher score, unchanged."""
    return store.lookup(q_id, p_id)


@dataclass
class FeatureCache:
    """Lazy per-id FeatureVector cache over a token store."""

    store: object
    d_feat: int
    _cache: dict = field(default_factory=dict)

    def get(self, item_id: str) -> FeatureVector:
        fv = self._cache.get(item_id)
        if fv is None:
            fv = hash_features(self.store.tokens(item_id), self.d_feat)
            self._cache[item_id] = fv
        return fv

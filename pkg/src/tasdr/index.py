"""Exact brute-force maximum-inner-product retrieval over passage vectors.

The index is a flat (uncompressed) matrix of one float64 vector per
passage, scanned exactly — no approximation — so search output can be
checked against a naive full-sort oracle. Rows are stored sorted by
passage id, which makes the kernels' ascending-row tie-break equal to an
ascending-passage-id tie-break. Results are identical across batch sizes
and thread counts because each query is searched independently.

Index file format: magic ``TASDR_I\\x00``, version byte, row count u32,
d_emb u32, 32-byte model checksum (SHA-256 of the encoder parameters),
then per row a u16 id length + UTF-8 id, then the matrix row-major as
little-endian float64.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corpus import PassageStore, QueryStore, atomic_write_bytes
from .encoder import StudentModel, encode_many, encode_tokens

_INDEX_MAGIC = b"TASDR_I\x00"
_INDEX_VERSION = 1


@dataclass
class DenseIndex:
    """Immutable flat inner-product index: ids aligned with matrix rows."""

    ids: list[str]
    matrix: np.ndarray  # (n, d_emb) C-contiguous float64
    model_checksum: str
    build_time: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError("id count does not match matrix rows")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("index matrix contains non-finite values")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d_emb(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str) -> None:
        checksum = bytes.fromhex(self.model_checksum)
        if len(checksum) != 32:
            raise ValueError("model checksum must be 32 bytes hex")
        parts = [
            _INDEX_MAGIC,
            struct.pack("<BII", _INDEX_VERSION, len(self.ids), self.d_emb),
            checksum,
        ]
        for pid in self.ids:
            enc = pid.encode("utf-8")
            parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(self.matrix.astype("<f8").tobytes())
        atomic_write_bytes(path, b"".join(parts))

    @classmethod
    def load(cls, path: str) -> "DenseIndex":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:8] != _INDEX_MAGIC:
            raise ValueError(f"{path}: not an index file")
        version, n, d_emb = struct.unpack("<BII", blob[8:17])
        if version != _INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        checksum = blob[17:49].hex()
        offset = 49
        ids = []
        for _ in range(n):
            (id_len,) = struct.unpack("<H", blob[offset : offset + 2])
            offset += 2
            ids.append(blob[offset : offset + id_len].decode("utf-8"))
            offset += id_len
        # copy: frombuffer views are read-only, kernels need writable C order
        matrix = np.frombuffer(blob[offset:], dtype="<f8").reshape(n, d_emb).copy()
        return cls(ids, matrix, checksum)


def build_index(
    model: StudentModel, passage_store: PassageStore, backend=None
) -> DenseIndex:
    """Encode every passage once; rows sorted by passage id."""
    del backend  # encoding is kernel-independent; kept for interface parity
    ids = sorted(passage_store.ids())
    if not ids:
        raise ValueError("cannot build an index over an empty passage store")
    try:
        matrix = encode_many(model, (passage_store.tokens(pid) for pid in ids))
    except Exception as exc:
        raise ValueError(f"failed to encode a passage: {exc}") from exc
    return DenseIndex(ids, matrix, model.checksum(), build_time=time.time())


def search(
    index: DenseIndex, query_vector: np.ndarray, k: int, backend=None
) -> list[tuple[str, float]]:
    """Exactly the k largest dot products, descending, ties by passage id.

    k greater than the collection size is clamped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query_vector = np.ascontiguousarray(query_vector, dtype=np.float64)
    if query_vector.shape != (index.d_emb,):
        raise ValueError(
            f"query dim {query_vector.shape} does not match index ({index.d_emb},)"
        )
    k = min(k, len(index))
    kern = backend if backend is not None else _kernels.active
    idx, scores = kern.topk_dot(index.matrix, query_vector, k)
    return [(index.ids[int(i)], float(s)) for i, s in zip(idx, scores)]


def batch_search(
    index: DenseIndex,
    query_vectors: np.ndarray,
    k: int,
    n_threads: int = 1,
    backend=None,
) -> list[list[tuple[str, float]]]:
    """Per-query search over a (m, d_emb) stack; order-aligned with input.

    Internally parallel over whole queries, so results are invariant to
    the thread count.
    """
    query_vectors = np.ascontiguousarray(query_vectors, dtype=np.float64)
    if query_vectors.ndim != 2:
        raise ValueError("query_vectors must be (m, d_emb)")
    if n_threads <= 1 or query_vectors.shape[0] <= 1:
        return [search(index, q, k, backend) for q in query_vectors]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda q: search(index, q, k, backend), query_vectors))


def nearest_rank_percentile(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no values")
    rank = max(1, int(np.ceil(pct / 100.0 * len(ordered))))
    return float(ordered[rank - 1])


@dataclass
class LatencyReport:
    """Wall-clock phase timings (milliseconds) in retrieval-table shape."""

    batch_size: int
    k: int
    repetitions: int
    rows: dict[str, tuple[float, float]]  # phase -> (mean_ms, p99_ms)

    def to_tsv(self) -> str:
        header = (
            "batch_size\tencode_avg_ms\tencode_p99_ms\tretrieve_avg_ms"
            "\tretrieve_p99_ms\ttotal_avg_ms\ttotal_p99_ms"
        )
        e, r, t = self.rows["encode"], self.rows["retrieve"], self.rows["total"]
        line = (
            f"{self.batch_size}\t{e[0]:.3f}\t{e[1]:.3f}\t{r[0]:.3f}\t{r[1]:.3f}"
            f"\t{t[0]:.3f}\t{t[1]:.3f}"
        )
        return header + "\n" + line + "\n"


def latency_report(
    index: DenseIndex,
    model: StudentModel,
    query_store: QueryStore,
    k: int,
    batch_size: int,
    repetitions: int = 100,
    n_threads: int = 1,
    backend=None,
) -> LatencyReport:
    """Measure encode / retrieve / total wall-clock time per repetition.

    Each repetition encodes ``batch_size`` queries (cycled from the store)
    and retrieves top-k for all of them. Percentiles are nearest-rank;
    fewer than ~100 repetitions make the p99 coarse.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    qids = query_store.ids()
    if not qids:
        raise ValueError("query store is empty")
    token_lists = [
        query_store.tokens(qids[i % len(qids)]) for i in range(batch_size)
    ]

    encode_ms, retrieve_ms, total_ms = [], [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        vectors = encode_many(model, token_lists)
        t1 = time.perf_counter()
        batch_search(index, vectors, k, n_threads=n_threads, backend=backend)
        t2 = time.perf_counter()
        encode_ms.append((t1 - t0) * 1e3)
        retrieve_ms.append((t2 - t1) * 1e3)
        total_ms.append((t2 - t0) * 1e3)

    rows = {
        "encode": (float(np.mean(encode_ms)), nearest_rank_percentile(encode_ms, 99)),
        "retrieve": (
            float(np.mean(retrieve_ms)),
            nearest_rank_percentile(retrieve_ms, 99),
        ),
        "total": (float(np.mean(total_ms)), nearest_rank_percentile(total_ms, 99)),
    }
    return LatencyReport(batch_size, k, repetitions, rows)


def encode_query(model: StudentModel, tokens) -> np.ndarray:
    """Single-query encoding convenience for search callers."""
    return encode_tokens(model, tokens)

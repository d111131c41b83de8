"""One-time k-means clustering of training-query embeddings.

Lloyd's algorithm with k-means++ seeding. The result partitions the query
set into topic clusters that batch sampling draws from. Determinism: given
the same vectors, k, and seed, the result (and its on-disk file) is
byte-identical. Distance ties go to the lowest cluster index; empty
clusters are repaired by moving in the point currently farthest from its
centroid.

Cluster file format: magic ``TASDR_C\\x00``, version byte, k u32, d_emb
u32, seed u64, centroids (k*d_emb little-endian float64), n_queries u32,
then per query a u16 id length, the UTF-8 id, and a u32 cluster index. A
human-readable ``<path>.tsv`` sidecar (``query_id<TAB>cluster``) is
written alongside.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corpus import QueryStore, atomic_write_bytes, atomic_write_text
from .encoder import StudentModel, encode_many

_CLUSTER_MAGIC = b"TASDR_C\x00"
_CLUSTER_VERSION = 1

QUERIES_PER_CLUSTER_DEFAULT = 200


@dataclass
class TopicClusters:
    """Centroids plus a query -> cluster partition."""

    centroids: np.ndarray  # (k, d_emb)
    assignment: dict[str, int]
    members: list[list[str]]
    seed: int = 0
    objective_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def validate_partition(self) -> None:
        total = sum(len(m) for m in self.members)
        if total != len(self.assignment):
            raise ValueError("members lists do not partition the query set")
        for c, ids in enumerate(self.members):
            for qid in ids:
                if self.assignment[qid] != c:
                    raise ValueError(f"query {qid!r} in wrong members list")
        if any(len(m) == 0 for m in self.members):
            raise ValueError("empty cluster after construction")

    def save(self, path: str) -> None:
        parts = [
            _CLUSTER_MAGIC,
            struct.pack(
                "<BIIQ", _CLUSTER_VERSION, self.k, self.centroids.shape[1], self.seed
            ),
            self.centroids.astype("<f8").tobytes(),
            struct.pack("<I", len(self.assignment)),
        ]
        for qid, c in self.assignment.items():
            encoded = qid.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<I", c))
        atomic_write_bytes(path, b"".join(parts))
        tsv = "\n".join(f"{qid}\t{c}" for qid, c in self.assignment.items())
        atomic_write_text(path + ".tsv", tsv + ("\n" if tsv else ""))

    @classmethod
    def load(cls, path: str) -> "TopicClusters":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:8] != _CLUSTER_MAGIC:
            raise ValueError(f"{path}: not a cluster file")
        version, k, d_emb, seed = struct.unpack("<BIIQ", blob[8:25])
        if version != _CLUSTER_VERSION:
            raise ValueError(f"{path}: unsupported cluster file version {version}")
        offset = 25
        centroids = np.frombuffer(
            blob[offset : offset + k * d_emb * 8], dtype="<f8"
        ).reshape(k, d_emb)
        offset += k * d_emb * 8
        (n,) = struct.unpack("<I", blob[offset : offset + 4])
        offset += 4
        assignment: dict[str, int] = {}
        for _ in range(n):
            (id_len,) = struct.unpack("<H", blob[offset : offset + 2])
            offset += 2
            qid = blob[offset : offset + id_len].decode("utf-8")
            offset += id_len
            (c,) = struct.unpack("<I", blob[offset : offset + 4])
            offset += 4
            assignment[qid] = c
        members: list[list[str]] = [[] for _ in range(k)]
        for qid, c in assignment.items():
            members[c].append(qid)
        return cls(centroids.copy(), assignment, members, seed=seed)


def _kmeans_pp_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, rest by squared-distance weight."""
    n = vectors.shape[0]
    centroids = np.empty((k, vectors.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    d2 = np.sum((vectors - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with chosen centroids; any pick works.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = vectors[idx]
        np.minimum(d2, np.sum((vectors - centroids[c]) ** 2, axis=1), out=d2)
    return centroids


def _repair_empty_clusters(
    labels: np.ndarray, sqdist: np.ndarray, centroids: np.ndarray, vectors: np.ndarray
) -> bool:
    """Move the farthest point into each empty cluster; returns True if any."""
    repaired = False
    counts = np.bincount(labels, minlength=centroids.shape[0])
    for c in np.flatnonzero(counts == 0):
        donor = int(np.argmax(sqdist))
        counts[labels[donor]] -= 1
        labels[donor] = c
        counts[c] = 1
        centroids[c] = vectors[donor]
        sqdist[donor] = 0.0
        repaired = True
    return repaired


def kmeans(
    vectors: np.ndarray,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    ids: list[str] | None = None,
    backend=None,
) -> TopicClusters:
    """Lloyd's k-means over row vectors; returns the cluster partition.

    Terminates at convergence (assignments unchanged, no repair) or after
    max_iters. The per-iteration objective (sum of squared distances after
    assignment) is recorded in ``objective_history`` and is non-increasing.
    """
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    n = vectors.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of vectors ({n})")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("vectors contain non-finite values")
    if ids is None:
        ids = [str(i) for i in range(n)]
    elif len(ids) != n:
        raise ValueError("ids length does not match vectors")

    kern = backend if backend is not None else _kernels.active
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(vectors, k, rng)

    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        new_labels, sqdist = kern.assign_nearest(vectors, centroids)
        new_labels = np.asarray(new_labels, dtype=np.int64).copy()
        sqdist = np.asarray(sqdist, dtype=np.float64).copy()
        repaired = _repair_empty_clusters(new_labels, sqdist, centroids, vectors)
        history.append(float(sqdist.sum()))
        converged = not repaired and np.array_equal(new_labels, labels)
        labels = new_labels
        for c in range(k):
            mask = labels == c
            centroids[c] = vectors[mask].mean(axis=0)
        if converged:
            break

    assignment = {ids[i]: int(labels[i]) for i in range(n)}
    members: list[list[str]] = [[] for _ in range(k)]
    for i in range(n):
        members[labels[i]].append(ids[i])
    result = TopicClusters(
        centroids, assignment, members, seed=seed, objective_history=history
    )
    result.validate_partition()
    return result


def default_cluster_count(n_queries: int) -> int:
    """One cluster per ~200 queries, at least 2."""
    return max(2, math.ceil(n_queries / QUERIES_PER_CLUSTER_DEFAULT))


def cluster_queries(
    model: StudentModel,
    query_store: QueryStore,
    k: int | None = None,
    seed: int = 0,
    max_iters: int = 50,
    out_path: str | None = None,
    backend=None,
) -> TopicClusters:
    """Encode every query with the student and k-means them into topics."""
    ids = query_store.ids()
    if not ids:
        raise ValueError("query store is empty")
    if k is None:
        k = default_cluster_count(len(ids))
    vectors = encode_many(model, (query_store.tokens(qid) for qid in ids))
    clusters = kmeans(vectors, k, max_iters=max_iters, seed=seed, ids=ids, backend=backend)
    if out_path is not None:
        clusters.save(out_path)
    return clusters

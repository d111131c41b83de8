"""Pure-numpy implementations of the hot kernels.

Used whenever the compiled extension is unavailable (or when
``TASDR_FORCE_FALLBACK=1``). Contracts match ``tasdr._kernels._core``
exactly; see the package ``__init__`` for the selection rule.
"""

from __future__ import annotations

import numpy as np

NAME = "fallback"


def topk_dot(matrix: np.ndarray, query: np.ndarray, k: int):
    """Indices and scores of the k largest dot products, descending.

    Ties are broken by ascending row index. ``matrix`` is (n, d),
    ``query`` is (d,), and 1 <= k <= n is required.
    """
    n = matrix.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} rows")
    scores = matrix @ query
    # lexsort: last key is primary, so sort by -score then row index.
    order = np.lexsort((np.arange(n), -scores))[:k]
    order = order.astype(np.int64)
    return order, scores[order]


def late_interaction_scores(
    q_emb: np.ndarray,
    q_offsets: np.ndarray,
    p_emb: np.ndarray,
    p_offsets: np.ndarray,
) -> np.ndarray:
    """All-pairs late-interaction scores over ragged token embeddings.

    ``q_emb`` stacks the token embeddings of n_q queries; query i owns rows
    ``q_offsets[i]:q_offsets[i+1]`` (every span non-empty). Same layout for
    passages. Entry (i, j) of the result is the sum over query-i tokens of
    the maximum dot product against passage-j tokens.
    """
    token_scores = q_emb @ p_emb.T
    per_passage_max = np.maximum.reduceat(token_scores, p_offsets[:-1], axis=1)
    return np.add.reduceat(per_passage_max, q_offsets[:-1], axis=0)


def assign_nearest(points: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per point by squared euclidean distance.

    Ties go to the lowest centroid index. Returns (labels, squared
    distances), both length n.
    """
    p_sq = np.einsum("ij,ij->i", points, points)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d2 = p_sq[:, None] - 2.0 * (points @ centroids.T) + c_sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    return labels, d2[np.arange(points.shape[0]), labels]

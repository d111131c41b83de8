"""Kernel backend selection.

Two complete backends provide the three hot kernels:

    topk_dot(matrix, query, k)              -> (indices, scores)
    late_interaction_scores(qe, qo, pe, po) -> (n_q, n_p) score matrix
    assign_nearest(points, centroids)       -> (labels, squared_distances)

The default ``active`` backend is selected per kernel at import time: the
compiled single-pass heap scan wins ``topk_dot`` decisively, while the
numpy fallback's BLAS matmuls beat scalar C loops on the two dense-algebra
kernels (see benchmarks/bench_backends.py), so the hybrid takes the
compiled scan and the BLAS math. When the extension is missing, or when
``TASDR_FORCE_FALLBACK=1`` is set, everything is pure numpy;
``TASDR_FORCE_COMPILED=1`` forces the extension everywhere (benchmarks,
tests).

Backends are individually deterministic. Bitwise identity *across*
backends is not promised (summation order differs), only agreement of
ranked outputs, which the test suite checks on random instances.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

from . import fallback

_compiled = None
if not os.environ.get("TASDR_FORCE_FALLBACK"):
    try:
        from . import _core as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

compiled = _compiled

if _compiled is None:
    active = fallback
elif os.environ.get("TASDR_FORCE_COMPILED"):
    active = _compiled
else:
    active = SimpleNamespace(
        NAME="hybrid",
        topk_dot=_compiled.topk_dot,
        late_interaction_scores=fallback.late_interaction_scores,
        assign_nearest=fallback.assign_nearest,
    )


def available_backends() -> dict:
    """Name -> module for every importable (pure) backend."""
    out = {"fallback": fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def get_backend(name: str | None = None):
    """Resolve a backend by name; None means the active default."""
    if name is None or name == "auto":
        return active
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"unknown or unavailable kernel backend: {name!r}")
    return backends[name]

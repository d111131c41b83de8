"""Pipeline configuration: one key=value file drives every command.

Format: ``key = value`` lines, ``#`` comments, blank lines ignored. Keys
must match a ``PipelineConfig`` field; values are coerced to the field's
type (booleans accept true/false/1/0/yes/no). Unknown keys are an error so
typos surface immediately.

One global seed fans out to per-component seeds via fixed offsets, so the
randomization-robustness protocol can vary a single number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import get_type_hints

SEED_OFFSET_MODEL = 101
SEED_OFFSET_CLUSTER = 202
SEED_OFFSET_SAMPLER = 303
SEED_OFFSET_TEACHER = 404
SEED_OFFSET_SYNTH = 505
SEED_OFFSET_VALIDATION = 606


def component_seed(global_seed: int, offset: int, instance: int = 0) -> int:
    """Derived seed: global seed + fixed component offset (+1000/instance)."""
    return global_seed + offset + 1000 * instance


@dataclass
class PipelineConfig:
    # data paths (unused when synthetic = true)
    collection: str | None = None
    queries: str | None = None
    triples: str | None = None
    scores: str | None = None
    qrels: str | None = None
    out_dir: str = "out"

    # global seed, fanned out by fixed offsets
    seed: int = 42

    # encoder
    d_feat: int = 4096
    d_emb: int = 64
    d_tok: int = 32
    init_scale: float = 0.1
    embedding_table_size: int = 65536

    # clustering
    k_clusters: int = 0  # 0 -> one cluster per ~200 queries, min 2
    kmeans_max_iters: int = 50

    # sampling
    strategy: str = "tas-balanced"
    batch_size: int = 32
    clusters_per_batch: int = 1
    margin_bins: int = 10
    queue_capacity: int = 4
    threaded_queue: bool = False

    # training
    alpha: float = 0.75
    learning_rate: float = 1e-3
    teacher_mode: str = "dual"
    inbatch_loss: str = "margin-mse"
    max_steps: int = 10000
    eval_interval: int = 4000
    patience: int = 30
    validation_sample: int = 200
    validation_top_k: int = 100

    # retrieval / evaluation
    eval_k: int = 100
    binarization: int = 2
    cutoffs: str = "10,100"
    n_threads: int = 1

    # built-in synthetic corpus
    synthetic: bool = False
    topics: int = 50
    queries_per_topic: int = 40
    n_passages: int = 4000

    # ablation / robustness harness
    harness_max_steps: int = 1500
    harness_eval_interval: int = 40
    harness_patience: int = 10
    baseline_steps: int = 300
    harness_seeds: int = 5

    def cutoff_list(self) -> list[int]:
        return [int(c) for c in self.cutoffs.split(",") if c.strip()]

    def require_paths(self, *names: str) -> None:
        import os

        for name in names:
            value = getattr(self, name)
            if not value:
                raise ValueError(f"config key {name!r} is required for this command")
            if not os.path.exists(value):
                raise ValueError(f"{name} path does not exist: {value}")


def _coerce(raw: str, target_type) -> object:
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Parse a key=value config file, then apply overrides (CLI flags)."""
    config = PipelineConfig()
    hints = get_type_hints(PipelineConfig)
    valid = {f.name for f in fields(PipelineConfig)}

    def assign(key: str, raw: str, where: str):
        if key not in valid:
            raise ValueError(f"{where}: unknown config key {key!r}")
        hint = hints[key]
        base = hint if hint in (int, float, bool, str) else str  # Optional[str] -> str
        try:
            config.__dict__[key] = _coerce(raw, base)
        except ValueError as e:
            raise ValueError(f"{where}: bad value for {key!r}: {e}") from e

    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw_line in enumerate(f, start=1):
                line = raw_line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                assign(key, raw, f"{path}:{line_no}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in valid:
            raise ValueError(f"override: unknown config key {key!r}")
        config.__dict__[key] = value
    return config

"""Distillation losses, analytic gradients, Adam, and the training loop.

The student's pairwise loss is the squared difference between its score
margin and the file teacher's margin over each (positive, negative) pair.
The in-batch loss crosses every query with all positives and negatives in
the batch, supervised by the frozen late-interaction teacher; the i-th
query's pairing with its own positive contributes exactly zero. The
combined objective is ``L_pair + alpha * L_inbatch``.

Normalization: the pairwise loss is the mean over the batch's tuples; the
in-batch loss divides its two cross sums by 2b, exactly as the dual-teacher
formulation states it, even though each inner sum itself has b terms (no
extra 1/b is applied — flagged here because the resulting magnitude grows
with b).

Because the student is linear in W, all gradients are closed-form; the
test suite checks them against central finite differences. Two list-based
in-batch alternatives (KL divergence and ListNet top-one cross-entropy)
are available for loss-comparison experiments. Note the ListNet value at a
perfect distribution match is the teacher entropy, not zero; the KL loss
is the one that vanishes at a match.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clustering import TopicClusters
from .corpus import (
    PassageStore,
    Qrels,
    QueryStore,
    atomic_write_text,
)
from .encoder import (
    FeatureCache,
    StudentModel,
    TokenEmbeddingTable,
    late_interaction_matrix,
)
from .sampler import Batch, BatchSampler, TrainingPool, batch_queue

TEACHER_MODES = ("pairwise", "inbatch", "dual")
INBATCH_LOSSES = ("margin-mse", "kldiv", "listnet")


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    alpha: float = 0.75
    learning_rate: float = 1e-3
    batch_size: int = 32
    clusters_per_batch: int = 1
    margin_bins: int = 10
    strategy: str = "tas-balanced"
    teacher_mode: str = "dual"
    inbatch_loss_kind: str = "margin-mse"
    max_steps: int = 10_000
    eval_interval_steps: int = 4_000
    patience_evals: int = 30
    seed: int = 0
    model_seed: int | None = None
    d_feat: int = 4096
    d_emb: int = 64
    init_scale: float = 0.1
    queue_capacity: int = 4
    threaded_queue: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.patience_evals < 1:
            raise ValueError("patience_evals must be >= 1")
        if self.teacher_mode not in TEACHER_MODES:
            raise ValueError(f"unknown teacher mode {self.teacher_mode!r}")
        if self.inbatch_loss_kind not in INBATCH_LOSSES:
            raise ValueError(f"unknown in-batch loss {self.inbatch_loss_kind!r}")
        if self.strategy not in BatchSampler.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: StudentModel) -> "AdamState":
        return cls(np.zeros_like(model.W), np.zeros_like(model.W))


def margin_mse(s_pos: float, s_neg: float, t_pos: float, t_neg: float) -> float:
    """Squared difference of student and teacher score margins."""
    values = (s_pos, s_neg, t_pos, t_neg)
    if any(math.isnan(v) for v in values):
        raise ValueError("NaN score passed to margin_mse")
    return ((s_pos - s_neg) - (t_pos - t_neg)) ** 2


def inbatch_loss(
    s_pos: np.ndarray,
    s_neg: np.ndarray,
    t_pos: np.ndarray,
    t_neg: np.ndarray,
) -> float:
    """Cross-batch margin loss over b x b score matrices.

    ``s_pos[i, j]`` is the student score of query i against positive j
    (same layout for the other three). Query i's own positive appears in
    the positive-vs-positive sum with both margins zero, contributing
    nothing.
    """
    s_pos, s_neg = np.asarray(s_pos, float), np.asarray(s_neg, float)
    t_pos, t_neg = np.asarray(t_pos, float), np.asarray(t_neg, float)
    b = s_pos.shape[0]
    s_self = np.diag(s_pos)[:, None]
    t_self = np.diag(t_pos)[:, None]
    e_neg = (s_self - s_neg) - (t_self - t_neg)
    e_pos = (s_self - s_pos) - (t_self - t_pos)
    return float((np.sum(e_neg**2) + np.sum(e_pos**2)) / (2 * b))


def dual_loss(pair_loss: float, inbatch: float, alpha: float) -> float:
    """Weighted combination of the pairwise and in-batch losses."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return pair_loss + alpha * inbatch


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kldiv_inbatch_loss(student: np.ndarray, teacher: np.ndarray) -> float:
    """Mean per-query KL(softmax(teacher) || softmax(student)).

    Zero exactly when the two softmax distributions match per query.
    """
    student = np.atleast_2d(np.asarray(student, float))
    teacher = np.atleast_2d(np.asarray(teacher, float))
    if student.shape != teacher.shape or student.shape[1] < 2:
        raise ValueError("need aligned score lists of length >= 2")
    log_ps = _log_softmax(student)
    log_pt = _log_softmax(teacher)
    pt = np.exp(log_pt)
    return float(np.mean(np.sum(pt * (log_pt - log_ps), axis=1)))


def listnet_inbatch_loss(student: np.ndarray, teacher: np.ndarray) -> float:
    """Mean per-query top-one cross-entropy -sum softmax(t) log softmax(s).

    Minimized when the distributions match, where its value equals the
    teacher distribution's entropy (not zero; see module docstring).
    """
    student = np.atleast_2d(np.asarray(student, float))
    teacher = np.atleast_2d(np.asarray(teacher, float))
    if student.shape != teacher.shape or student.shape[1] < 2:
        raise ValueError("need aligned score lists of length >= 2")
    log_ps = _log_softmax(student)
    pt = np.exp(_log_softmax(teacher))
    return float(np.mean(-np.sum(pt * log_ps, axis=1)))


@dataclass
class BatchTensors:
    """Dense per-batch inputs: features, file-teacher margins, toy-teacher
    cross matrices (present only when the mode needs in-batch signals)."""

    f_q: np.ndarray  # (b, d_feat) normalized query features
    f_pos: np.ndarray
    f_neg: np.ndarray
    t_pos_pair: np.ndarray  # (b,) file teacher
    t_neg_pair: np.ndarray
    t_pos_mat: np.ndarray | None  # (b, b) toy teacher
    t_neg_mat: np.ndarray | None

    @property
    def b(self) -> int:
        return self.f_q.shape[0]


def _dense_features(cache: FeatureCache, ids: Sequence[str], d_feat: int) -> np.ndarray:
    rows = np.zeros((len(ids), d_feat))
    for i, item_id in enumerate(ids):
        fv = cache.get(item_id)
        rows[i, fv.indices] = fv.counts / max(1.0, fv.total)
    return rows


def prepare_batch(
    batch: Batch,
    query_store: QueryStore,
    passage_store: PassageStore,
    q_features: FeatureCache,
    p_features: FeatureCache,
    table: TokenEmbeddingTable | None,
    need_inbatch: bool,
    backend=None,
) -> BatchTensors:
    """Materialize one batch's feature rows and teacher signals."""
    q_ids = [t.query_id for t in batch.tuples]
    pos_ids = [t.pos_id for t in batch.tuples]
    neg_ids = [t.neg_id for t in batch.tuples]
    d_feat = q_features.d_feat

    t_pos_mat = t_neg_mat = None
    if need_inbatch:
        if table is None:
            raise ValueError("in-batch supervision requires a token embedding table")
        q_tokens = [query_store.tokens(q) for q in q_ids]
        pos_tokens = [passage_store.tokens(p) for p in pos_ids]
        neg_tokens = [passage_store.tokens(p) for p in neg_ids]
        t_pos_mat = late_interaction_matrix(q_tokens, pos_tokens, table, backend)
        t_neg_mat = late_interaction_matrix(q_tokens, neg_tokens, table, backend)

    return BatchTensors(
        f_q=_dense_features(q_features, q_ids, d_feat),
        f_pos=_dense_features(p_features, pos_ids, d_feat),
        f_neg=_dense_features(p_features, neg_ids, d_feat),
        t_pos_pair=np.array([t.t_pos for t in batch.tuples]),
        t_neg_pair=np.array([t.t_neg for t in batch.tuples]),
        t_pos_mat=t_pos_mat,
        t_neg_mat=t_neg_mat,
    )


@dataclass
class LossValue:
    """Scalar loss with its pairwise / in-batch component breakdown."""

    pair: float
    inbatch: float
    total: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.pair, self.inbatch, self.total))):
            raise ValueError("non-finite loss")


def _list_loss_inputs(bt: BatchTensors, W: np.ndarray):
    q = bt.f_q @ W
    x = np.vstack([bt.f_pos, bt.f_neg]) @ W
    student = q @ x.T  # (b, 2b)
    teacher = np.hstack([bt.t_pos_mat, bt.t_neg_mat])
    return q, x, student, teacher


def compute_loss(
    bt: BatchTensors,
    W: np.ndarray,
    alpha: float,
    teacher_mode: str = "dual",
    inbatch_loss_kind: str = "margin-mse",
) -> LossValue:
    """Loss components for one batch as a pure function of W."""
    q = bt.f_q @ W
    p = bt.f_pos @ W
    n = bt.f_neg @ W
    s_pos = np.einsum("ij,ij->i", q, p)
    s_neg = np.einsum("ij,ij->i", q, n)
    e_pair = (s_pos - s_neg) - (bt.t_pos_pair - bt.t_neg_pair)
    l_pair = float(np.mean(e_pair**2))

    l_inb = 0.0
    if teacher_mode in ("inbatch", "dual"):
        if inbatch_loss_kind == "margin-mse":
            l_inb = inbatch_loss(q @ p.T, q @ n.T, bt.t_pos_mat, bt.t_neg_mat)
        else:
            _, _, student, teacher = _list_loss_inputs(bt, W)
            fn = kldiv_inbatch_loss if inbatch_loss_kind == "kldiv" else listnet_inbatch_loss
            l_inb = fn(student, teacher)

    if teacher_mode == "pairwise":
        total = l_pair
    elif teacher_mode == "inbatch":
        total = l_inb
    else:
        total = dual_loss(l_pair, l_inb, alpha)
    return LossValue(l_pair, l_inb, total)


def _pair_grad(bt: BatchTensors, q, p, n) -> np.ndarray:
    b = bt.b
    s_pos = np.einsum("ij,ij->i", q, p)
    s_neg = np.einsum("ij,ij->i", q, n)
    c = (2.0 / b) * ((s_pos - s_neg) - (bt.t_pos_pair - bt.t_neg_pair))
    grad = bt.f_q.T @ (c[:, None] * (p - n))
    grad += bt.f_pos.T @ (c[:, None] * q)
    grad -= bt.f_neg.T @ (c[:, None] * q)
    return grad


def _inbatch_mse_grad(bt: BatchTensors, q, p, n) -> np.ndarray:
    b = bt.b
    s_pos = q @ p.T
    s_neg = q @ n.T
    s_self = np.diag(s_pos)[:, None]
    t_self = np.diag(bt.t_pos_mat)[:, None]
    d_neg = ((s_self - s_neg) - (t_self - bt.t_neg_mat)) / b
    d_pos = ((s_self - s_pos) - (t_self - bt.t_pos_mat)) / b
    # dL/dS_pos carries the diagonal contribution from both cross sums.
    g_pos = np.diag(d_neg.sum(axis=1) + d_pos.sum(axis=1)) - d_pos
    g_neg = -d_neg
    grad = bt.f_q.T @ (g_pos @ p) + bt.f_pos.T @ (g_pos.T @ q)
    grad += bt.f_q.T @ (g_neg @ n) + bt.f_neg.T @ (g_neg.T @ q)
    return grad


def _list_loss_grad(bt: BatchTensors, W, kind: str) -> np.ndarray:
    b = bt.b
    q, x, student, teacher = _list_loss_inputs(bt, W)
    p_s = np.exp(_log_softmax(student))
    p_t = np.exp(_log_softmax(teacher))
    dz = (p_s - p_t) / b  # same gradient for KL and cross-entropy
    del kind
    f_x = np.vstack([bt.f_pos, bt.f_neg])
    return bt.f_q.T @ (dz @ x) + f_x.T @ (dz.T @ q)


def loss_and_grad(
    model: StudentModel,
    bt: BatchTensors,
    alpha: float,
    teacher_mode: str = "dual",
    inbatch_loss_kind: str = "margin-mse",
) -> tuple[LossValue, np.ndarray]:
    """Loss components and the analytic gradient w.r.t. W."""
    W = model.W
    loss = compute_loss(bt, W, alpha, teacher_mode, inbatch_loss_kind)
    q = bt.f_q @ W
    p = bt.f_pos @ W
    n = bt.f_neg @ W

    grad = np.zeros_like(W)
    if teacher_mode in ("pairwise", "dual"):
        grad += _pair_grad(bt, q, p, n)
    if teacher_mode in ("inbatch", "dual"):
        weight = alpha if teacher_mode == "dual" else 1.0
        if inbatch_loss_kind == "margin-mse":
            grad += weight * _inbatch_mse_grad(bt, q, p, n)
        else:
            grad += weight * _list_loss_grad(bt, W, inbatch_loss_kind)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    return loss, grad


def grad_dual_loss(
    model: StudentModel,
    bt: BatchTensors,
    alpha: float = 0.75,
    teacher_mode: str = "dual",
    inbatch_loss_kind: str = "margin-mse",
) -> np.ndarray:
    """Analytic gradient of the combined loss w.r.t. W."""
    return loss_and_grad(model, bt, alpha, teacher_mode, inbatch_loss_kind)[1]


def adam_step(
    model: StudentModel, grads: np.ndarray, state: AdamState, lr: float
) -> tuple[StudentModel, AdamState]:
    """One bias-corrected Adam update (in place; returned for chaining)."""
    if grads.shape != model.W.shape:
        raise ValueError("gradient shape does not match parameters")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    model.W -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state


def early_stop_check(history: Sequence[float], patience: int) -> bool:
    """True when the best metric is more than `patience` evaluations old.

    The best is the first occurrence of the maximum; a tie with the best
    counts as non-improving.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        return False
    best_idx = int(np.argmax(history))  # argmax returns the first maximum
    return (len(history) - 1 - best_idx) >= patience


@dataclass
class ValidationSet:
    """Per-query candidate pools for fast between-steps evaluation."""

    pools: dict[str, tuple[str, ...]]

    def save(self, path: str) -> None:
        lines = [
            f"{qid}\t{pid}" for qid, pool in self.pools.items() for pid in pool
        ]
        atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path: str) -> "ValidationSet":
        pools: dict[str, list[str]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for raw in f:
                line = raw.rstrip("\n")
                if not line:
                    continue
                qid, pid = line.split("\t")
                pools.setdefault(qid, []).append(pid)
        return cls({qid: tuple(pids) for qid, pids in pools.items()})


def build_validation_set(
    baseline_model: StudentModel,
    query_store: QueryStore,
    qrels: Qrels,
    passage_store: PassageStore,
    sample_size: int,
    top_k: int = 100,
    seed: int = 0,
    query_ids: Sequence[str] | None = None,
    exclude_query_ids: Sequence[str] = (),
    out_path: str | None = None,
    backend=None,
) -> ValidationSet:
    """Candidate pools: baseline top-k union all judged-relevant passages.

    Queries come from ``query_ids`` (or a seeded uniform sample of judged
    queries in the store) and must be disjoint from ``exclude_query_ids``
    (the held-out evaluation queries).
    """
    from .index import build_index, search

    if query_ids is None:
        judged = [q for q in query_store.ids() if qrels.relevant_ids(q, 1)]
        if sample_size > len(judged):
            raise ValueError(
                f"sample_size {sample_size} exceeds {len(judged)} judged queries"
            )
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(judged), size=sample_size, replace=False)
        query_ids = [judged[int(i)] for i in sorted(picks)]
    overlap = set(query_ids) & set(exclude_query_ids)
    if overlap:
        raise ValueError(
            f"validation queries overlap evaluation queries: {sorted(overlap)[:5]}"
        )

    from .encoder import encode_tokens

    index = build_index(baseline_model, passage_store, backend=backend)
    pools: dict[str, tuple[str, ...]] = {}
    for qid in query_ids:
        q_vec = encode_tokens(baseline_model, query_store.tokens(qid))
        retrieved = [pid for pid, _ in search(index, q_vec, top_k, backend=backend)]
        pool = list(retrieved)
        for pid in sorted(qrels.relevant_ids(qid, 1)):
            if pid not in set(retrieved) and pid in passage_store:
                pool.append(pid)
        pools[qid] = tuple(pool)
    valset = ValidationSet(pools)
    if out_path is not None:
        valset.save(out_path)
    return valset


def evaluate_validation(
    model: StudentModel,
    valset: ValidationSet,
    query_store: QueryStore,
    passage_store: PassageStore,
    qrels: Qrels,
    cutoff: int = 10,
) -> float:
    """Mean nDCG@cutoff of the model's ranking over each candidate pool."""
    from .corpus import Run
    from .encoder import encode_many, encode_tokens
    from .evaluation import ndcg_at

    scores: dict[str, list[tuple[str, float]]] = {}
    for qid, pool in valset.pools.items():
        q_vec = encode_tokens(model, query_store.tokens(qid))
        p_mat = encode_many(model, (passage_store.tokens(p) for p in pool))
        s = p_mat @ q_vec
        scores[qid] = [(pid, float(v)) for pid, v in zip(pool, s)]
    run = Run.from_scores(scores, tag="validation")
    return ndcg_at(run, qrels.subset(valset.pools), cutoff).aggregate


@dataclass
class TrainData:
    """Everything the loop consumes besides hyperparameters."""

    query_store: QueryStore
    passage_store: PassageStore
    pool: TrainingPool
    teacher_table: TokenEmbeddingTable | None = None
    clusters: TopicClusters | None = None
    validation: ValidationSet | None = None
    qrels: Qrels | None = None
    initial_model: StudentModel | None = None


@dataclass
class TrainResult:
    model: StudentModel  # best checkpoint (by validation metric when present)
    final_model: StudentModel
    loss_log: list[tuple[int, float, float, float]] = field(repr=False, default_factory=list)
    eval_log: list[tuple[int, float]] = field(repr=False, default_factory=list)
    best_step: int = 0
    steps_run: int = 0
    stopped_early: bool = False


def _write_logs(out_dir: str, result: TrainResult) -> None:
    loss_lines = ["step\tl_pair\tl_inbatch\tl_total"] + [
        f"{s}\t{lp:.8f}\t{li:.8f}\t{lt:.8f}" for s, lp, li, lt in result.loss_log
    ]
    atomic_write_text(os.path.join(out_dir, "train_log.tsv"), "\n".join(loss_lines) + "\n")
    eval_lines = ["step\tndcg_at_10"] + [
        f"{s}\t{v:.8f}" for s, v in result.eval_log
    ]
    atomic_write_text(os.path.join(out_dir, "eval_log.tsv"), "\n".join(eval_lines) + "\n")


def train(config: TrainConfig, data: TrainData, out_dir: str | None = None) -> TrainResult:
    """Run the sample -> loss -> gradient -> Adam loop with early stopping.

    Draws batches endlessly from the configured strategy, evaluates the
    validation pool every ``eval_interval_steps``, and stops after
    ``patience_evals`` evaluations without a new best (or at
    ``max_steps``). The best-scoring checkpoint is retained; on a terminal
    sampler/teacher error it is saved to ``out_dir`` before re-raising.
    """
    model = (
        data.initial_model.copy()
        if data.initial_model is not None
        else StudentModel.initialize(
            config.d_feat,
            config.d_emb,
            seed=config.model_seed if config.model_seed is not None else config.seed,
            scale=config.init_scale,
        )
    )
    need_inbatch = config.teacher_mode in ("inbatch", "dual")
    if need_inbatch and data.teacher_table is None:
        raise ValueError("teacher_mode requires a token embedding table in TrainData")

    sampler = BatchSampler(
        data.pool,
        config.strategy,
        config.batch_size,
        n=config.clusters_per_batch,
        h=config.margin_bins,
        clusters=data.clusters,
        seed=config.seed,
    )
    q_features = FeatureCache(data.query_store, model.d_feat)
    p_features = FeatureCache(data.passage_store, model.d_feat)
    state = AdamState.for_model(model)
    result = TrainResult(model=model.copy(), final_model=model)
    can_validate = data.validation is not None and data.qrels is not None
    history: list[float] = []

    source = batch_queue(
        sampler, capacity=config.queue_capacity, threaded=config.threaded_queue
    )
    try:
        with source:
            for step in range(1, config.max_steps + 1):
                batch = next(source)
                bt = prepare_batch(
                    batch,
                    data.query_store,
                    data.passage_store,
                    q_features,
                    p_features,
                    data.teacher_table,
                    need_inbatch,
                )
                loss, grad = loss_and_grad(
                    model,
                    bt,
                    config.alpha,
                    config.teacher_mode,
                    config.inbatch_loss_kind,
                )
                adam_step(model, grad, state, config.learning_rate)
                result.loss_log.append((step, loss.pair, loss.inbatch, loss.total))
                result.steps_run = step

                if can_validate and step % config.eval_interval_steps == 0:
                    metric = evaluate_validation(
                        model,
                        data.validation,
                        data.query_store,
                        data.passage_store,
                        data.qrels,
                    )
                    history.append(metric)
                    result.eval_log.append((step, metric))
                    if metric > max(history[:-1], default=-np.inf):
                        result.model = model.copy()
                        result.best_step = step
                    if early_stop_check(history, config.patience_evals):
                        result.stopped_early = True
                        break
    except Exception:
        if out_dir is not None:
            result.model.save(os.path.join(out_dir, "best_model.ckpt"))
            _write_logs(out_dir, result)
        raise

    if not history:
        # no validation evals happened; the final parameters are the result
        result.model = model.copy()
        result.best_step = result.steps_run
    result.final_model = model
    if out_dir is not None:
        result.model.save(os.path.join(out_dir, "best_model.ckpt"))
        result.final_model.save(os.path.join(out_dir, "final_model.ckpt"))
        _write_logs(out_dir, result)
    return result

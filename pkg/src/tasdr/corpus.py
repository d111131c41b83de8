"""MSMARCO-style corpus ingestion and TREC-format run/qrels I/O.

File formats
------------
collection / queries   ``id<TAB>text``                 (one row per item)
training triples       ``qid<TAB>pos_id<TAB>neg_id``
teacher scores         ``qid<TAB>pos_id<TAB>neg_id<TAB>score_pos<TAB>score_neg``
qrels                  ``qid 0 pid grade``             (whitespace separated)
run                    ``qid Q0 pid rank score tag``   (whitespace separated)

Ingest is deterministic: identical file bytes always produce identical
stores. Tokenization lowercases, replaces every non-alphanumeric (ASCII)
character with a space and splits on whitespace; truncation keeps the
token prefix. Stores are immutable after load and safe for concurrent
reads.
"""

from __future__ import annotations

import os
import re
import tempfile
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator

QUERY_CAP_DEFAULT = 30
PASSAGE_CAP_DEFAULT = 200

RUN_SCORE_DECIMALS = 6

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip non-alphanumerics to spaces, split on whitespace."""
    return _NON_ALNUM.sub(" ", text.lower()).split()


def atomic_write_text(path: str, content: str) -> None:
    """Write text via a temp file + rename so partial outputs never land."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, content: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class Query:
    id: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Passage:
    id: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class TrainTriple:
    query_id: str
    pos_id: str
    neg_id: str


class TokenStore:
    """Immutable id -> token-sequence map with a length cap applied at ingest."""

    def __init__(self, items: dict[str, tuple[str, ...]], cap: int):
        self._items = items
        self.cap = cap

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def ids(self) -> list[str]:
        return list(self._items)

    def tokens(self, item_id: str) -> tuple[str, ...]:
        try:
            return self._items[item_id]
        except KeyError:
            raise KeyError(f"unknown id {item_id!r}") from None

    def items(self):
        return self._items.items()


class QueryStore(TokenStore):
    pass


class PassageStore(TokenStore):
    pass


def _load_token_store(path: str, cap: int, kind: str) -> dict[str, tuple[str, ...]]:
    items: dict[str, tuple[str, ...]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(
                    f"{path}:{line_no}: expected 'id<TAB>text', got {line!r}"
                )
            item_id, text = line.split("\t", 1)
            if not item_id:
                raise ValueError(f"{path}:{line_no}: empty id")
            if item_id in items:
                raise ValueError(f"{path}:{line_no}: duplicate {kind} id {item_id!r}")
            tokens = tokenize(text)[:cap]
            if not tokens:
                warnings.warn(
                    f"{path}:{line_no}: skipping {kind} {item_id!r} with empty text"
                )
                continue
            items[item_id] = tuple(tokens)
    return items


def load_collection(path: str, passage_cap: int = PASSAGE_CAP_DEFAULT) -> PassageStore:
    """Load a passage collection TSV, truncating each passage to the cap."""
    return PassageStore(_load_token_store(path, passage_cap, "passage"), passage_cap)


def load_queries(path: str, query_cap: int = QUERY_CAP_DEFAULT) -> QueryStore:
    """Load a query TSV, truncating each query to the cap."""
    return QueryStore(_load_token_store(path, query_cap, "query"), query_cap)


class TeacherScoreStore:
    """(query_id, passage_id) -> pairwise teacher score, O(1) lookup."""

    def __init__(self, scores: dict[tuple[str, str], float]):
        self._scores = scores

    def __len__(self) -> int:
        return len(self._scores)

    def __contains__(self, pair: tuple[str, str]) -> bool:
        return pair in self._scores

    def lookup(self, query_id: str, passage_id: str) -> float:
        try:
            return self._scores[(query_id, passage_id)]
        except KeyError:
            raise KeyError(
                f"no teacher score for pair ({query_id!r}, {passage_id!r})"
            ) from None

    def get(self, query_id: str, passage_id: str, default: float | None = None):
        return self._scores.get((query_id, passage_id), default)


def _parse_triple_fields(path, line_no, qid, pos_id, neg_id):
    if not qid or not pos_id or not neg_id:
        raise ValueError(f"{path}:{line_no}: empty id field")
    if pos_id == neg_id:
        raise ValueError(
            f"{path}:{line_no}: positive and negative ids are equal ({pos_id!r})"
        )


def load_triples_with_scores(
    triples_path: str,
    scores_path: str,
    queries: QueryStore | None = None,
    passages: PassageStore | None = None,
) -> tuple[list[TrainTriple], TeacherScoreStore]:
    """Load training triples plus their pairwise teacher scores.

    The score file must cover exactly the triples listed in the triples
    file (no missing rows, no extras), and every (query, passage) pair must
    have a single unambiguous score. When stores are passed, every id is
    checked against them.
    """
    triples: list[TrainTriple] = []
    triple_set: set[tuple[str, str, str]] = set()
    with open(triples_path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{triples_path}:{line_no}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            qid, pos_id, neg_id = parts
            _parse_triple_fields(triples_path, line_no, qid, pos_id, neg_id)
            key = (qid, pos_id, neg_id)
            if key in triple_set:
                raise ValueError(f"{triples_path}:{line_no}: duplicate triple {key}")
            triple_set.add(key)
            triples.append(TrainTriple(qid, pos_id, neg_id))

    scores: dict[tuple[str, str], float] = {}
    scored_triples: set[tuple[str, str, str]] = set()
    with open(scores_path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(
                    f"{scores_path}:{line_no}: expected 5 tab-separated fields, "
                    f"got {len(parts)}"
                )
            qid, pos_id, neg_id, s_pos_str, s_neg_str = parts
            _parse_triple_fields(scores_path, line_no, qid, pos_id, neg_id)
            try:
                s_pos, s_neg = float(s_pos_str), float(s_neg_str)
            except ValueError as e:
                raise ValueError(f"{scores_path}:{line_no}: bad score value") from e
            key = (qid, pos_id, neg_id)
            if key in scored_triples:
                raise ValueError(
                    f"{scores_path}:{line_no}: triple {key} scored more than once "
                    "(ambiguous teacher)"
                )
            scored_triples.add(key)
            for pid, val in ((pos_id, s_pos), (neg_id, s_neg)):
                existing = scores.get((qid, pid))
                if existing is not None and existing != val:
                    raise ValueError(
                        f"{scores_path}:{line_no}: conflicting teacher scores for "
                        f"pair ({qid!r}, {pid!r}): {existing} vs {val}"
                    )
                scores[(qid, pid)] = val

    missing = triple_set - scored_triples
    if missing:
        q, p, n = sorted(missing)[0]
        raise ValueError(
            f"{scores_path}: missing teacher scores for triple ({q!r}, {p!r}, {n!r})"
        )
    extra = scored_triples - triple_set
    if extra:
        q, p, n = sorted(extra)[0]
        raise ValueError(
            f"{scores_path}: teacher scores for triple ({q!r}, {p!r}, {n!r}) "
            f"not present in {triples_path}"
        )

    if queries is not None or passages is not None:
        for t in triples:
            if queries is not None and t.query_id not in queries:
                raise ValueError(f"triple references unknown query {t.query_id!r}")
            if passages is not None:
                for pid in (t.pos_id, t.neg_id):
                    if pid not in passages:
                        raise ValueError(f"triple references unknown passage {pid!r}")

    return triples, TeacherScoreStore(scores)


class Qrels:
    """Graded relevance judgments; absent pairs have grade 0."""

    def __init__(self, grades: dict[tuple[str, str], int]):
        self._grades = grades
        self._by_query: dict[str, dict[str, int]] = {}
        for (qid, pid), g in grades.items():
            self._by_query.setdefault(qid, {})[pid] = g

    def __len__(self) -> int:
        return len(self._grades)

    def grade(self, query_id: str, passage_id: str) -> int:
        return self._grades.get((query_id, passage_id), 0)

    def query_ids(self) -> list[str]:
        return list(self._by_query)

    def judged(self, query_id: str) -> dict[str, int]:
        return dict(self._by_query.get(query_id, {}))

    def relevant_ids(self, query_id: str, min_grade: int = 1) -> set[str]:
        return {
            pid
            for pid, g in self._by_query.get(query_id, {}).items()
            if g >= min_grade
        }

    def subset(self, query_ids) -> "Qrels":
        """Judgments restricted to the given query ids (split evaluation)."""
        keep = set(query_ids)
        return Qrels({k: g for k, g in self._grades.items() if k[0] in keep})


def load_qrels(path: str) -> Qrels:
    """Load TREC qrels (``qid 0 pid grade``); grades must be in 0..3."""
    grades: dict[tuple[str, str], int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{line_no}: expected 4 whitespace-separated fields, "
                    f"got {len(parts)}"
                )
            qid, _, pid, grade_str = parts
            try:
                grade = int(grade_str)
            except ValueError as e:
                raise ValueError(f"{path}:{line_no}: bad grade {grade_str!r}") from e
            if not 0 <= grade <= 3:
                raise ValueError(
                    f"{path}:{line_no}: grade {grade} outside TREC range 0..3"
                )
            key = (qid, pid)
            if key in grades and grades[key] != grade:
                raise ValueError(
                    f"{path}:{line_no}: conflicting grades for pair {key}"
                )
            grades[key] = grade
    return Qrels(grades)


class Run:
    """Per-query ranked (passage_id, score) lists, descending score.

    Score ties are ordered by ascending passage id; ranks are the implicit
    positions 1..m of each list.
    """

    def __init__(self, rankings: dict[str, list[tuple[str, float]]], tag: str = "run"):
        self.tag = tag
        self._rankings = rankings
        for qid, ranking in rankings.items():
            pids = [pid for pid, _ in ranking]
            if len(pids) != len(set(pids)):
                raise ValueError(f"duplicate passage id in run for query {qid!r}")

    @classmethod
    def from_scores(
        cls, scores: dict[str, Iterable[tuple[str, float]]], tag: str = "run"
    ) -> "Run":
        """Build a run by sorting raw scores (descending, ties by passage id)."""
        rankings = {
            qid: sorted(items, key=lambda it: (-it[1], it[0]))
            for qid, items in scores.items()
        }
        return cls(rankings, tag)

    def query_ids(self) -> list[str]:
        return list(self._rankings)

    def ranking(self, query_id: str) -> list[tuple[str, float]]:
        return list(self._rankings.get(query_id, []))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Run):
            return NotImplemented
        return self._rankings == other._rankings

    def __len__(self) -> int:
        return len(self._rankings)


def write_run(run: Run, path: str, tag: str | None = None) -> None:
    """Write a TREC run file; queries in sorted id order, atomic replace."""
    out_tag = tag if tag is not None else run.tag
    lines = []
    for qid in sorted(run.query_ids()):
        for rank, (pid, score) in enumerate(run.ranking(qid), start=1):
            lines.append(f"{qid} Q0 {pid} {rank} {score:.{RUN_SCORE_DECIMALS}f} {out_tag}")
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_run(path: str) -> Run:
    """Load a TREC run file.

    Round-trips ``write_run`` output exactly (scores at 6 decimal places).
    Non-contiguous ranks or non-descending scores trigger a warning and a
    re-rank by (score desc, passage id asc).
    """
    per_query: dict[str, list[tuple[str, float, int]]] = {}
    tag = "run"
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(
                    f"{path}:{line_no}: expected 6 whitespace-separated fields, "
                    f"got {len(parts)}"
                )
            qid, _, pid, rank_str, score_str, tag = parts
            try:
                rank = int(rank_str)
                score = float(score_str)
            except ValueError as e:
                raise ValueError(f"{path}:{line_no}: bad rank or score") from e
            per_query.setdefault(qid, []).append((pid, score, rank))

    rankings: dict[str, list[tuple[str, float]]] = {}
    for qid, rows in per_query.items():
        pids = [pid for pid, _, _ in rows]
        if len(pids) != len(set(pids)):
            raise ValueError(f"{path}: duplicate passage id for query {qid!r}")
        ranks = [r for _, _, r in rows]
        scores = [s for _, s, _ in rows]
        well_formed = ranks == list(range(1, len(rows) + 1)) and all(
            scores[i] >= scores[i + 1] for i in range(len(scores) - 1)
        )
        if well_formed:
            rankings[qid] = [(pid, score) for pid, score, _ in rows]
        else:
            warnings.warn(
                f"{path}: malformed ranks for query {qid!r}; re-ranking by score"
            )
            rankings[qid] = sorted(
                ((pid, score) for pid, score, _ in rows),
                key=lambda it: (-it[1], it[0]),
            )
    return Run(rankings, tag)

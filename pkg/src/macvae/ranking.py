"""Tag prediction for existing and cold items, and top-N ranking metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .collab import decode_to_tag_logprobs, encode_ratings
from .errors import DataError, UnknownIdError

LN2 = math.log(2.0)


@dataclass
class RankedList:
    item: int
    tags: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.tags)) != len(self.tags):
            raise DataError("ranked list repeats a tag")


@dataclass
class EvalReport:
    n: int
    recall: float
    ndcg: float
    mrr: float
    n_items: int
    n_skipped: int
    segment: str
    ndcg_convention: str = "literal"
    per_item: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        return {"segment": self.segment, "N": self.n, "recall": self.recall, "ndcg": self.ndcg,
                "mrr": self.mrr, "items": self.n_items, "skipped": self.n_skipped,
                "ndcg_convention": self.ndcg_convention}


def rank_tags(scores, n: int, exclude=(), item: int = -1) -> RankedList:
    """Top-``n`` tags by descending score; ties go to the smaller tag id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.ones(len(scores), dtype=bool)
    candidates[np.asarray(exclude, dtype=np.int64)] = False
    ids = np.flatnonzero(candidates)
    order = np.lexsort((ids, -scores[ids]))[:n]
    return RankedList(item, ids[order], scores[ids[order]])


def _top(ranked) -> np.ndarray:
    return ranked.tags if isinstance(ranked, RankedList) else np.asarray(ranked)


def recall_at_n(ranked, truth) -> float:
    truth = set(int(t) for t in truth)
    if not truth:
        raise DataError("recall needs a non-empty truth set")
    hits = sum(1 for t in _top(ranked) if int(t) in truth)
    return hits / len(truth)


def ndcg_at_n(ranked, truth, standard: bool = False) -> float:
    """Binary-relevance DCG with log2 discounts.

    The default divides by |truth| / ln 2; ``standard`` divides by the
    ideal DCG of min(N, |truth|) hits instead.
    """
    truth = set(int(t) for t in truth)
    if not truth:
        raise DataError("ndcg needs a non-empty truth set")
    top = _top(ranked)
    dcg = sum(1.0 / math.log2(i + 2) for i, t in enumerate(top) if int(t) in truth)
    if standard:
        norm = sum(1.0 / math.log2(i + 2) for i in range(min(len(top), len(truth))))
    else:
        norm = len(truth) / LN2
    return min(1.0, max(0.0, dcg / norm)) if norm > 0 else 0.0


def mrr_at_n(ranked, truth) -> float:
    truth = set(int(t) for t in truth)
    for i, t in enumerate(_top(ranked)):
        if int(t) in truth:
            return 1.0 / (i + 1)
    return 0.0


# -- prediction --------------------------------------------------------------------

def _probs(log_probs: np.ndarray) -> np.ndarray:
    return np.exp(log_probs)


def score_existing(items, bundle, data) -> np.ndarray:
    """Sum of the decoder's tag probabilities from the item mean and from the
    fused auxiliary mean (the second term is absent for the collaborative-only
    variant)."""
    items = np.asarray(items, dtype=np.int64)
    known = set(int(i) for i in data.split.existing)
    unknown = [int(i) for i in items if int(i) not in known]
    if unknown:
        raise UnknownIdError(f"item {unknown[0]} is not an existing (training) item")
    rows = data.train.dense(items)
    scores = _probs(decode_to_tag_logprobs(encode_ratings(rows, bundle.collab).mean, bundle.collab))
    fused = bundle.auxiliary_mean(items, data, cold=False)
    if fused is not None:
        scores = scores + _probs(decode_to_tag_logprobs(fused, bundle.collab))
    return scores


def predict_existing(item: int, bundle, data) -> np.ndarray:
    return score_existing([item], bundle, data)[0]


def score_cold(items, bundle, data) -> np.ndarray:
    """Decoder probabilities from the fused auxiliary mean only."""
    fused = bundle.auxiliary_mean(np.asarray(items, dtype=np.int64), data, cold=True)
    if fused is None:
        raise DataError("the collaborative-only model cannot score cold items")
    return _probs(decode_to_tag_logprobs(fused, bundle.collab))


def predict_cold(content_row, neighbors, bundle, data, item: int | None = None) -> np.ndarray:
    """Score a new item from its content row and intrinsic neighbours.

    ``item`` is the id slot the item occupies in the graph; by default a
    fresh id one past the universe is appended.
    """
    if content_row is None:
        raise DataError("a cold item needs a content row")
    fused = bundle.fuse_new_item(content_row, neighbors, data, item)
    return _probs(decode_to_tag_logprobs(fused[None, :], bundle.collab))[0]


# -- evaluation --------------------------------------------------------------------

def evaluate(split, bundle, data, n: int = 20, segment: str = "existing", truth: str = "test",
             standard_ndcg: bool = False, batch_size: int = 512) -> EvalReport:
    """Average Recall/NDCG/MRR@n over items with a non-empty truth set."""
    if segment == "existing":
        parts = {"test": split.test, "valid": split.valid}[truth]
        items = [int(i) for i in split.existing]
        truths = {i: parts[i] for i in items}
        exclude = {i: split.train[i] for i in items}
        scorer = score_existing
    elif segment == "cold":
        items = [int(i) for i in split.cold]
        truths = {i: data.interactions.rows[i] for i in items}
        exclude = {i: () for i in items}
        scorer = score_cold
    else:
        raise DataError(f"unknown segment {segment!r}")
    evaluable = [i for i in items if len(truths[i])]
    if not evaluable:
        raise DataError(f"no evaluable items in segment {segment!r}")
    per_item = {}
    for lo in range(0, len(evaluable), batch_size):
        chunk = evaluable[lo:lo + batch_size]
        scores = scorer(chunk, bundle, data)
        for i, s in zip(chunk, scores):
            ranked = rank_tags(s, n, exclude[i], i)
            per_item[i] = (recall_at_n(ranked, truths[i]), ndcg_at_n(ranked, truths[i], standard_ndcg),
                           mrr_at_n(ranked, truths[i]))
    values = np.array([per_item[i] for i in evaluable])
    means = values.mean(axis=0)
    return EvalReport(n, float(means[0]), float(means[1]), float(means[2]), len(evaluable),
                      len(items) - len(evaluable), segment, "standard" if standard_ndcg else "literal", per_item)


def format_reports(reports) -> str:
    """Aligned text table of several reports."""
    header = f"{'segment':<10}{'N':>5}{'recall':>10}{'ndcg':>10}{'mrr':>10}{'items':>8}{'skipped':>9}  ndcg"
    lines = [header]
    for r in reports:
        lines.append(f"{r.segment:<10}{r.n:>5}{r.recall:>10.4f}{r.ndcg:>10.4f}{r.mrr:>10.4f}"
                     f"{r.n_items:>8}{r.n_skipped:>9}  {r.ndcg_convention}")
    return "\n".join(lines)


def write_reports_csv(path, reports):
    cols = ["segment", "N", "recall", "ndcg", "mrr", "items", "skipped", "ndcg_convention"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in reports:
            row = r.row()
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")

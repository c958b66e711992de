"""Exact retrieval metrics: AP, mAP, Rank-1 and the attack drop rates."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ImageSet, apply_perturbation


class NoPositivesError(ValueError):
    pass


@dataclass(frozen=True)
class RankedQuery:
    distances: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        y = np.asarray(self.labels, dtype=bool)
        if d.shape != y.shape or d.ndim != 1:
            raise ValueError("distances and labels must be 1-D arrays of equal length")
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "labels", y)


def exact_ap(rq: RankedQuery) -> float:
    """Average precision of a ranking (ascending distance, ties by index)."""
    labels = np.asarray(rq.labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositivesError("query has no positive gallery items")
    order = np.argsort(rq.distances, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1.0
    return float(np.sum(np.arange(1, n_pos + 1) / ranks) / n_pos)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def ranking_scores(query_emb, query_ids, gallery_emb, gallery_ids, query_names=None):
    """Per-query AP and Rank-1 hit for embedded queries against an embedded gallery."""
    dist = pairwise_distances(query_emb, gallery_emb)
    gallery_ids = np.asarray(gallery_ids)
    aps = np.empty(len(dist))
    hits = np.empty(len(dist), dtype=bool)
    for i, (row, qid) in enumerate(zip(dist, query_ids)):
        labels = gallery_ids == qid
        try:
            aps[i] = exact_ap(RankedQuery(row, labels))
        except NoPositivesError as exc:
            name = query_names[i] if query_names is not None else i
            raise NoPositivesError(f"query {name}: {exc}") from exc
        hits[i] = labels[np.argmin(row)]
    return aps, hits


def _embed_queries(model, queries: ImageSet, u, clamp):
    images = queries.images
    if u is not None:
        images = apply_perturbation(images, u, clamp=clamp)
    return model.forward(images)


def per_query_scores(model, queries: ImageSet, gallery: ImageSet, u=None, clamp=True, gallery_emb=None):
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if gallery_emb is None:
        gallery_emb = model.forward(gallery.images)
    q_emb = _embed_queries(model, queries, u, clamp)
    return ranking_scores(q_emb, queries.identities, gallery_emb, gallery.identities)


def mean_ap(model, queries: ImageSet, gallery: ImageSet, u=None, clamp=True) -> float:
    """mAP over the query split; only the queries carry ``u``."""
    aps, _ = per_query_scores(model, queries, gallery, u, clamp)
    return float(np.mean(aps, dtype=np.float64))


def rank1(model, queries: ImageSet, gallery: ImageSet, u=None, clamp=True) -> float:
    _, hits = per_query_scores(model, queries, gallery, u, clamp)
    return float(np.mean(hits))


def drop_rate(before: float, after: float) -> float:
    if before <= 0:
        raise ValueError("drop rate is undefined when the clean score is 0")
    return (before - after) / before


@dataclass
class AttackReport:
    map_before: float
    map_after: float
    rank1_before: float
    rank1_after: float
    mdr: float
    rdr: float
    per_query_ap: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls(**json.loads(text))

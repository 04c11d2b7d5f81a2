"""Retrieval metrics under the cross-camera protocol.

Per query the gallery is sorted by ascending distance (ties by gallery
index) after dropping items that share both identity and camera with the
query.  AP is the mean of precision at each relevant rank; queries with no
remaining relevant item are skipped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class EmbeddingMatrix:
    features: np.ndarray
    pids: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids)
        self.cams = np.asarray(self.cams)
        if self.features.ndim != 2:
            raise ValueError("features must be [n, d]")
        n = len(self.features)
        if len(self.pids) != n or len(self.cams) != n:
            raise ValueError("features, pids and cams need equal lengths")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite embedding values")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class Protocol:
    metric: str = "euclidean"
    exclude_same_camera: bool = True
    max_rank: int = 50


@dataclass
class EvalReport:
    rank1: float
    mAP: float
    cmc: list[float]
    per_query_ap: list[float]
    num_valid_queries: int
    num_queries: int
    protocol: dict = field(default_factory=dict)

    def to_json(self, checkpoint_id: str | None = None) -> dict:
        return {
            "rank1": self.rank1,
            "map": self.mAP,
            "cmc": self.cmc,
            "num_valid_queries": self.num_valid_queries,
            "num_queries": self.num_queries,
            "protocol": self.protocol,
            "checkpoint_id": checkpoint_id,
        }


def distance_matrix(query: EmbeddingMatrix | np.ndarray, gallery: EmbeddingMatrix | np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    q = query.features if isinstance(query, EmbeddingMatrix) else np.asarray(query, dtype=np.float64)
    g = gallery.features if isinstance(gallery, EmbeddingMatrix) else np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        # explicit differences, chunked: the expanded |q|^2+|g|^2-2qg form loses exact ties
        out = np.empty((len(q), len(g)))
        step = max(1, 2_000_000 // max(1, g.size))
        for s in range(0, len(q), step):
            diff = q[s:s + step, None, :] - g[None, :, :]
            out[s:s + step] = np.sqrt((diff * diff).sum(-1))
        return out
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


def evaluate_distmat(dist: np.ndarray, q_pids, g_pids, q_cams, g_cams,
                     protocol: Protocol | None = None) -> EvalReport:
    protocol = protocol or Protocol()
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    num_q, num_g = dist.shape
    if num_g == 0:
        raise ValueError("empty gallery")
    max_rank = min(protocol.max_rank, num_g)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = g_pids[order] == q_pids[:, None]
    if protocol.exclude_same_camera:
        keep = ~(matches & (g_cams[order] == q_cams[:, None]))
    else:
        keep = np.ones_like(matches)

    cmc_rows, aps = [], []
    for i in range(num_q):
        hits = matches[i][keep[i]]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        row = np.zeros(max_rank)
        row[first:] = 1.0
        cmc_rows.append(row)
        ranks = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    if not aps:
        raise ValueError("no query has a valid gallery match")
    cmc = np.mean(cmc_rows, axis=0)
    return EvalReport(rank1=float(cmc[0]), mAP=float(np.mean(aps)), cmc=cmc.tolist(),
                      per_query_ap=aps, num_valid_queries=len(aps), num_queries=num_q,
                      protocol=asdict(protocol))


def evaluate(query: EmbeddingMatrix, gallery: EmbeddingMatrix, protocol: Protocol | None = None) -> EvalReport:
    protocol = protocol or Protocol()
    dist = distance_matrix(query, gallery, protocol.metric)
    return evaluate_distmat(dist, query.pids, gallery.pids, query.cams, gallery.cams, protocol)


def brute_force_oracle(query: EmbeddingMatrix, gallery: EmbeddingMatrix,
                       protocol: Protocol | None = None) -> EvalReport:
    """Deliberately naive reference: per-pair loops, explicit relevance lists."""
    protocol = protocol or Protocol()
    qf, gf = query.features.tolist(), gallery.features.tolist()
    num_g = len(gf)
    R = min(protocol.max_rank, num_g)
    curves, aps = [], []
    for qi, qv in enumerate(qf):
        dists = []
        for gi, gv in enumerate(gf):
            if protocol.metric == "euclidean":
                d = math.sqrt(sum((a - b) ** 2 for a, b in zip(qv, gv)))
            else:
                dot = sum(a * b for a, b in zip(qv, gv))
                na = max(math.sqrt(sum(a * a for a in qv)), 1e-12)
                nb = max(math.sqrt(sum(b * b for b in gv)), 1e-12)
                d = 1.0 - dot / (na * nb)
            dists.append((d, gi))
        ranked = sorted(dists)
        ranked_ids = []
        for _, gi in ranked:
            same_id = gallery.pids[gi] == query.pids[qi]
            same_cam = gallery.cams[gi] == query.cams[qi]
            if protocol.exclude_same_camera and same_id and same_cam:
                continue
            ranked_ids.append(gi)
        relevant_positions = [pos for pos, gi in enumerate(ranked_ids, start=1)
                              if gallery.pids[gi] == query.pids[qi]]
        if not relevant_positions:
            continue
        precisions = [(k + 1) / pos for k, pos in enumerate(relevant_positions)]
        aps.append(sum(precisions) / len(precisions))
        first = relevant_positions[0]
        curves.append([1.0 if r >= first else 0.0 for r in range(1, R + 1)])
    if not aps:
        raise ValueError("no query has a valid gallery match")
    cmc = [sum(c[r] for c in curves) / len(curves) for r in range(R)]
    return EvalReport(rank1=cmc[0], mAP=sum(aps) / len(aps), cmc=cmc, per_query_ap=aps,
                      num_valid_queries=len(aps), num_queries=len(qf), protocol=asdict(protocol))


def rank_lists(query: EmbeddingMatrix, gallery: EmbeddingMatrix, protocol: Protocol | None = None,
               top: int = 10) -> str:
    """Plain-text top-k retrieval lists, one line per query ('+' marks a true match)."""
    protocol = protocol or Protocol()
    dist = distance_matrix(query, gallery, protocol.metric)
    lines = []
    for i in range(len(query)):
        order = np.argsort(dist[i], kind="stable")
        items = []
        for j in order:
            if protocol.exclude_same_camera and gallery.pids[j] == query.pids[i] \
                    and gallery.cams[j] == query.cams[i]:
                continue
            mark = "+" if gallery.pids[j] == query.pids[i] else "-"
            items.append(f"{mark}{gallery.pids[j]}c{gallery.cams[j]}")
            if len(items) == top:
                break
        lines.append(f"q{i} id={query.pids[i]} cam={query.cams[i]}: " + " ".join(items))
    return "\n".join(lines) + "\n"


@dataclass
class CrossDatasetReport:
    """The same checkpoint scored on its own test split and on an unseen
    target domain."""

    source: EvalReport
    target: EvalReport
    source_name: str = "source"
    target_name: str = "target"

    def rows(self) -> list[dict]:
        return [{"eval_on": name, "rank1": r.rank1, "map": r.mAP}
                for name, r in ((self.source_name, self.source), (self.target_name, self.target))]

    def to_json(self, checkpoint_id: str | None = None) -> dict:
        return {"source": self.source.to_json(checkpoint_id),
                "target": self.target.to_json(checkpoint_id),
                "rows": self.rows()}


def embed_split(models, dataset, split: str) -> EmbeddingMatrix:
    from .trainer import extract_embeddings

    return extract_embeddings(models, dataset, split)


def evaluate_model(models, dataset, protocol: Protocol | None = None) -> EvalReport:
    """Query-vs-gallery evaluation of a model set's visual encoder."""
    return evaluate(embed_split(models, dataset, "query"), embed_split(models, dataset, "gallery"), protocol)


def cross_dataset_eval(checkpoint, source_dataset, target_dataset,
                       protocol: Protocol | None = None) -> CrossDatasetReport:
    """``checkpoint`` is a ModelSet or a checkpoint path."""
    if not hasattr(checkpoint, "encoder"):
        from .checkpoint import load_checkpoint

        checkpoint = load_checkpoint(checkpoint)
    return CrossDatasetReport(evaluate_model(checkpoint, source_dataset, protocol),
                              evaluate_model(checkpoint, target_dataset, protocol))

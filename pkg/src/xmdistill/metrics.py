"""Top-1 accuracy and cosine-ranked retrieval metrics (R@K, mAP@K).

AP@K convention: precision at each relevant rank within the top K, summed
and divided by min(#relevant, K).  Queries with no relevant item score 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class MetricsReport:
    accuracy: float
    r_at: dict[int, float]
    map_at: dict[int, float]
    per_class: dict[int, float] = field(default_factory=dict)
    split: str = "test"
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "r_at": {str(k): v for k, v in sorted(self.r_at.items())},
            "map_at": {str(k): v for k, v in sorted(self.map_at.items())},
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "split": self.split,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def rows(self) -> list[tuple[str, str, float, str]]:
        out = [("accuracy", "", self.accuracy, self.split)]
        out += [("R", str(k), v, self.split) for k, v in sorted(self.r_at.items())]
        out += [("mAP", str(k), v, self.split) for k, v in sorted(self.map_at.items())]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "K", "value", "split"])
        w.writerows(self.rows())
        return buf.getvalue()


def top1_accuracy(logits: np.ndarray, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("top1_accuracy needs a non-empty [n, K] array")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape} labels for {logits.shape[0]} rows")
    return float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)


def _cosine_matrix(q: np.ndarray, g: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    nq = np.linalg.norm(q, axis=1)
    ng = np.linalg.norm(g, axis=1)
    return (q @ g.T) / np.maximum(np.outer(nq, ng), eps)


def rank_gallery(
    query: np.ndarray,
    gallery: np.ndarray,
    exclude_self: bool = False,
    gallery_ids: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gallery indices per query, best first.  Ties go to the smaller id.

    With ``exclude_self`` (query set == gallery set) query i never ranks
    gallery item i, and each row has one fewer entry.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    n_g = gallery.shape[0]
    ids = np.arange(n_g) if gallery_ids is None else np.asarray(gallery_ids)
    presort = np.argsort(ids, kind="stable")
    key = -_cosine_matrix(query, gallery)[:, presort]
    if exclude_self:
        if query.shape[0] != n_g:
            raise ValueError("exclude_self needs query and gallery to be the same set")
        self_col = np.argsort(presort)  # column of gallery item i after presort
        key[np.arange(n_g), self_col] = np.inf
    order = presort[np.argsort(key, axis=1, kind="stable")]
    return order[:, :-1] if exclude_self else order


def retrieval(
    query_embs,
    gallery_embs,
    query_labels,
    gallery_labels,
    r_ks: Sequence[int] = (1, 5, 20),
    map_ks: Sequence[int] = (100, 500),
    exclude_self: bool = False,
    gallery_ids=None,
) -> dict:
    """R@K and mAP@K in percent.  K larger than the gallery is clamped, so
    mAP at such K is the full-list mAP."""
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    order = rank_gallery(query_embs, gallery_embs, exclude_self, gallery_ids)
    rel = gl[order] == ql[:, None]  # [n_q, G]
    n_rel = rel.sum(axis=1)
    depth = rel.shape[1]
    hits = np.cumsum(rel, axis=1)
    prec = hits / np.arange(1, depth + 1)

    r_at = {}
    for k in r_ks:
        kk = min(k, depth)
        r_at[int(k)] = float(np.mean(hits[:, kk - 1] > 0) * 100.0)
    map_at = {}
    for k in map_ks:
        kk = min(k, depth)
        num = (prec[:, :kk] * rel[:, :kk]).sum(axis=1)
        den = np.minimum(n_rel, kk)
        ap = np.where(den > 0, num / np.maximum(den, 1), 0.0)
        map_at[int(k)] = float(np.mean(ap) * 100.0)
    return {"r_at": r_at, "map_at": map_at}

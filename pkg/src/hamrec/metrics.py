"""Full-ranking Recall@k, NDCG@k and HitRate@k from exported hard codes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import BipartiteGraph, InteractionDataset
from .hamming import CodeMatrix
from .retrieval import build_index, topk_scan_batch

DEFAULT_KS = (10, 20)
METRICS = ("recall", "ndcg", "hit")


@dataclass
class MetricsTable:
    """Per-user metric arrays keyed by ``(metric, k)`` plus their means."""

    ks: tuple
    users: np.ndarray
    per_user: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def mean(self, metric: str, k: int) -> float:
        vals = self.per_user[(metric, k)]
        return float(vals.mean()) if len(vals) else 0.0

    def means(self) -> dict:
        return {f"{m}@{k}": self.mean(m, k) for m in METRICS for k in self.ks}

    def to_dict(self) -> dict:
        return {"users": self.n_users, "ks": list(self.ks), "means": self.means()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        header = ["k"] + [m for m in ("Recall", "NDCG", "HitRate")]
        rows = [[str(k)] + [f"{self.mean(m, k):.4f}" for m in METRICS] for k in self.ks]
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        lines.append(f"({self.n_users} users)")
        return "\n".join(lines)


def ranking_metrics(ranked: np.ndarray, relevant: np.ndarray, k: int):
    """Recall, NDCG and hit for one ranked list with binary relevance."""
    top = np.asarray(ranked)[:k]
    hits = np.isin(top, relevant)
    n_rel = len(relevant)
    recall = hits.sum() / n_rel
    discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
    dcg = float((hits * discounts).sum())
    idcg = float((1.0 / np.log2(np.arange(2, min(n_rel, k) + 2))).sum())
    return float(recall), dcg / idcg, float(hits.any())


def evaluate(user_codes: CodeMatrix, item_codes: CodeMatrix, test: InteractionDataset,
             train_graph: BipartiteGraph | None, ks=DEFAULT_KS, workers: int = 1) -> MetricsTable:
    """Rank all non-train items for every test user and score the held-out items."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    users = np.unique(test.user)
    if len(users) and users.max() >= len(user_codes):
        raise ValueError(f"user {int(users.max())} is not in the code matrix ({len(user_codes)} rows)")
    if test.n_events and test.item.max() >= len(item_codes):
        raise ValueError(f"item {int(test.item.max())} is not in the item code matrix")
    per_items = test.items_by_user()
    if train_graph is None:
        exclude = None
    else:
        exclude = [train_graph.items_of(u) if u < train_graph.n_users else np.zeros(0, np.int64) for u in users]
    index = build_index(item_codes)
    queries = CodeMatrix(user_codes.words[users], user_codes.K)
    ids, _, lens = topk_scan_batch(index, queries, ks[-1], exclude, workers=workers)
    table = MetricsTable(ks, users)
    vals = {(m, k): np.zeros(len(users)) for m in METRICS for k in ks}
    for row, u in enumerate(users):
        ranked = ids[row, :lens[row]]
        rel = per_items[u]
        for k in ks:
            r, n, h = ranking_metrics(ranked, rel, k)
            vals[("recall", k)][row] = r
            vals[("ndcg", k)][row] = n
            vals[("hit", k)][row] = h
    table.per_user = vals
    return table


def random_recall_expectation(test: InteractionDataset, train_graph: BipartiteGraph, k: int):
    """Per-user expected Recall@k under a uniformly random ranking of candidates.

    Each relevant item lands in the top ``k`` of ``C`` candidates with
    probability ``min(k, C) / C``.
    """
    users = np.unique(test.user)
    cand = train_graph.n_items - train_graph.user_degree()[users]
    return np.minimum(k, cand) / cand

"""Retrieval metrics: recall at K, median rank and mean rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingTruth


@dataclass(frozen=True)
class Metrics:
    r_at_1: float
    r_at_5: float
    r_at_10: float
    mdr: float
    mnr: float
    count: int

    def as_record(self) -> dict:
        return {
            "r1": f"{self.r_at_1:.4f}",
            "r5": f"{self.r_at_5:.4f}",
            "r10": f"{self.r_at_10:.4f}",
            "mdr": f"{self.mdr:g}",
            "mnr": f"{self.mnr:.4f}",
            "n": str(self.count),
        }


def metrics_from_ranks(ranks) -> Metrics:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise MissingTruth("no ranks to evaluate")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    s = np.sort(ranks)
    return Metrics(
        100.0 * float(np.mean(ranks <= 1)),
        100.0 * float(np.mean(ranks <= 5)),
        100.0 * float(np.mean(ranks <= 10)),
        float(s[(s.size - 1) // 2]),  # lower median
        float(ranks.mean()),
        int(ranks.size),
    )


def evaluate(results) -> Metrics:
    ranks = []
    for r in results:
        if r.rank_of_truth is None:
            raise MissingTruth(f"query {r.query_id} has no rank for its labeled document")
        ranks.append(r.rank_of_truth)
    return metrics_from_ranks(ranks)

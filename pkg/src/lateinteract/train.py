"""Toy training loop: plain gradient descent on the two WTI weight heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Corpus, split_ids
from .index import build_index, query_many
from .interaction import ScoringModel, WeightHead, init_weight_head, score_wti_batch
from .losses import LossConfig, grad_wti_heads, info_nce
from .metrics import Metrics, evaluate
from .numerics import make_rng


@dataclass
class TrainReport:
    seed: int
    steps: list
    probe_initial: float
    probe_final: float
    metrics: dict
    text_head: WeightHead = field(repr=False, default=None)
    video_head: WeightHead = field(repr=False, default=None)

    def records(self):
        """Line-oriented key:value records, one per step, then summaries."""
        for row in self.steps:
            yield {"record": "step", **{k: _fmt(v) for k, v in row.items()}}
        yield {"record": "probe", "seed": str(self.seed), "info_nce_initial": _fmt(self.probe_initial),
               "info_nce_final": _fmt(self.probe_final)}
        for mech, m in self.metrics.items():
            yield {"record": "metrics", "split": "val", "mechanism": mech, **m.as_record()}


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def heldout_metrics(corpus: Corpus, ids, model: ScoringModel, mechanisms=("dp", "ti", "wti")) -> dict:
    """Retrieve each held-out query among the held-out videos only."""
    videos = [corpus.videos[i] for i in ids]
    queries = [corpus.queries[i] for i in ids]
    truth = {corpus.queries[i].id: corpus.truth[corpus.queries[i].id] for i in ids}
    shard = build_index(videos, model.video_head)
    out = {}
    for mech in mechanisms:
        out[mech] = evaluate(query_many(queries, shard, 1, mech, model, truth))
    return out


def train_heads(
    corpus: Corpus,
    steps: int = 200,
    step_size: float = 2.0,
    cfg: LossConfig = LossConfig(),
    seed: int = 0,
    batch_size: int = 32,
    probe_size: int = 128,
    val_fraction: float = 0.2,
    hidden: int | None = None,
    mechanisms=("dp", "ti", "wti"),
) -> TrainReport:
    """Minibatch gradient descent on both weight heads from the uniform-weight point.

    Heads start with random hidden layers and a zero output layer, i.e. at
    exactly TI(mean).  Every step draws ``batch_size`` positive pairs from
    the training split.  ``probe_*`` is InfoNCE on a fixed training batch.
    """
    rng = make_rng(seed)
    dim = corpus.videos[0].dim
    tw = init_weight_head(dim, rng, "text", hidden=hidden, init="zero_last")
    vw = init_weight_head(dim, rng, "video", hidden=hidden, init="zero_last")
    train_ids, val_ids = split_ids(len(corpus.videos), seed, val_fraction)
    probe = train_ids[: min(probe_size, len(train_ids))]
    probe_t = [corpus.queries[i] for i in probe]
    probe_v = [corpus.videos[i] for i in probe]

    def probe_nce():
        return info_nce(score_wti_batch(probe_t, probe_v, tw, vw), cfg)

    initial = probe_nce()
    rows = []
    bsz = min(batch_size, len(train_ids))
    for step in range(steps):
        idx = rng.choice(train_ids, size=bsz, replace=False)
        g = grad_wti_heads([corpus.queries[i] for i in idx], [corpus.videos[i] for i in idx], tw, vw, cfg)
        rows.append({"step": step, "total": g.loss, "info_nce": g.info_nce, "cdcr": g.cdcr})
        for head, grads in ((tw, g.text), (vw, g.video)):
            for (w, b), (dw, db) in zip(head.layers, grads):
                w -= step_size * dw
                b -= step_size * db
    final = probe_nce()
    model = ScoringModel(text_head=tw, video_head=vw)
    metrics = heldout_metrics(corpus, val_ids, model, mechanisms)
    return TrainReport(seed, rows, initial, final, metrics, tw, vw)

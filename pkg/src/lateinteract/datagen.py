"""Synthetic multi-scene video corpora with planted query -> video truth.

Each video is a run of scenes; each scene is a cluster of frame tokens
around one latent direction.  A query describes exactly one scene of its
target video, so mean-pooling the video dilutes the match while token-wise
maxima do not.  Each scene mixes in, with probability ``distractor_overlap``, a topic
direction drawn from a small shared pool.  A video holding several scenes
of the query's topic then beats the true target under mean pooling, while
token-wise maxima still see that only the target has the specific scene.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import TokenMatrix, make_rng


@dataclass(frozen=True)
class CorpusConfig:
    num_docs: int = 1000
    scenes_per_doc: tuple = (1, 3)
    tokens_per_scene: int = 4
    text_tokens: int = 32
    video_tokens: int = 12
    dim: int = 512
    noise_sigma: float = 0.3
    distractor_overlap: float = 0.5
    seed: int = 0
    min_text_tokens: int = 8
    filler_fraction: float = 0.0
    topic_weight: float = 0.8
    num_topics: int = 0
    filler_directions: int = 4

    def validate(self):
        lo, hi = self.scenes_per_doc
        checks = [
            (self.num_docs >= 1, "num_docs must be >= 1"),
            (1 <= lo <= hi, "scenes_per_doc must be a range lo <= hi with lo >= 1"),
            (self.tokens_per_scene >= 1, "tokens_per_scene must be >= 1"),
            (self.video_tokens >= hi, "video_tokens must allow one token per scene"),
            (1 <= self.min_text_tokens <= self.text_tokens, "need 1 <= min_text_tokens <= text_tokens"),
            (self.dim >= 2, "dim must be >= 2"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (0 <= self.distractor_overlap <= 1, "distractor_overlap must lie in [0, 1]"),
            (0 <= self.filler_fraction < 1, "filler_fraction must lie in [0, 1)"),
            (0 <= self.topic_weight < 1, "topic_weight must lie in [0, 1)"),
            (self.num_topics >= 0 and self.filler_directions >= 1, "bad topic/filler counts"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def topics(self) -> int:
        return self.num_topics or max(2, self.num_docs // 20)

    def as_record(self) -> dict:
        rec = asdict(self)
        rec["scenes_per_doc"] = f"{self.scenes_per_doc[0]}-{self.scenes_per_doc[1]}"
        return rec


@dataclass
class Corpus:
    videos: list
    queries: list
    truth: dict
    latents: list = field(repr=False)
    target_scene: dict = field(repr=False)
    config: CorpusConfig = None

    def __iter__(self):
        return iter((self.videos, self.queries, self.truth))


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _orthonormal(rng, k, d):
    """k random unit vectors, mutually orthogonal when k <= d."""
    g = rng.standard_normal((d, k))
    if k <= d:
        q, r = np.linalg.qr(g)
        # sign fix keeps the draw a deterministic function of g
        return (q * np.sign(np.diag(r))).T
    return _unit_rows(g.T)


def _noisy(rng, center, count, sigma):
    d = center.shape[0]
    return center + sigma / np.sqrt(d) * rng.standard_normal((count, d))


def _split_tokens(total, scenes, per_scene):
    n = min(total, scenes * per_scene)
    base, extra = divmod(n, scenes)
    return [base + (1 if s < extra else 0) for s in range(scenes)]


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    """Videos, one query per video (same id), and the truth map query -> video."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    d = cfg.dim
    topics = _orthonormal(rng, cfg.topics, d)
    fillers = _orthonormal(rng, cfg.filler_directions, d)
    lo, hi = cfg.scenes_per_doc
    c = cfg.topic_weight

    videos, queries, latents, target = [], [], [], {}
    for doc in range(cfg.num_docs):
        n_scenes = int(rng.integers(lo, hi + 1))
        specific = _orthonormal(rng, n_scenes, d)
        topic = topics[rng.integers(cfg.topics, size=n_scenes)]
        shared = rng.random(n_scenes) < cfg.distractor_overlap
        lat = np.where(shared[:, None], c * topic + np.sqrt(1 - c * c) * specific, specific)
        lat = _unit_rows(lat)
        latents.append(lat)

        tokens = np.zeros((cfg.video_tokens, d))
        mask = np.zeros(cfg.video_tokens, dtype=bool)
        row = 0
        for s, count in enumerate(_split_tokens(cfg.video_tokens, n_scenes, cfg.tokens_per_scene)):
            tokens[row : row + count] = _noisy(rng, lat[s], count, cfg.noise_sigma)
            mask[row : row + count] = True
            row += count
        videos.append(TokenMatrix(doc, tokens, mask, "video"))

        scene = int(rng.integers(n_scenes))
        target[doc] = scene
        length = int(rng.integers(cfg.min_text_tokens, cfg.text_tokens + 1))
        n_fill = int(round(cfg.filler_fraction * (length - 1)))
        n_content = max(1, length - 1 - n_fill)
        n_fill = length - 1 - n_content
        content = _noisy(rng, lat[scene], n_content, cfg.noise_sigma)
        which = rng.integers(cfg.filler_directions, size=n_fill)
        fill = fillers[which] + cfg.noise_sigma / np.sqrt(d) * rng.standard_normal((n_fill, d))
        body = np.concatenate([content, fill])[rng.permutation(n_content + n_fill)]
        glob = content.mean(axis=0)
        q = np.zeros((cfg.text_tokens, d))
        q[0] = glob / np.linalg.norm(glob)
        q[1:length] = body
        qmask = np.zeros(cfg.text_tokens, dtype=bool)
        qmask[:length] = True
        queries.append(TokenMatrix(doc, q, qmask, "text"))

    truth = {doc: doc for doc in range(cfg.num_docs)}
    return Corpus(videos, queries, truth, latents, target, cfg)


def split_ids(n, seed, val_fraction=0.2):
    """Seeded train/validation split of ``range(n)``."""
    perm = make_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])

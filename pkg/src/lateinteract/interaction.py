"""The six text-video interaction mechanisms as batch scorers.

Every scorer takes lists of :class:`TokenMatrix` (text side first) and
returns a :class:`ScoreMatrix` of shape ``(len(T), len(V))``.  Tokens are
l2-normalized internally, so callers may pass raw or normalized rows.

Parameter-free: DP, TI.  Light-parameter: HI (level weights), WTI (two
token-weight heads).  Black-box: MLP, XTI (forward only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import AllMasked, DegenerateLevel, ShapeMismatch
from .numerics import NORM_EPS, TokenMatrix, masked_softmax, normalize_array, stack_batch

MECHANISMS = ("dp", "hi", "mlp", "xti", "ti", "wti")
PATHS = ("t2v", "v2t", "both")


def _relu(x):
    return np.maximum(x, 0.0)


def _uniform_layer(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def _forward(layers, x):
    """Affine layers with a rectifier between them (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1:
            x = _relu(x)
    return x


# --------------------------------------------------------------------- types


@dataclass
class WeightHead:
    """Per-token weight MLP; output logits go through a masked softmax."""

    layers: list
    side: str = "text"

    @property
    def dim(self) -> int:
        return self.layers[0][0].shape[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Raw per-token logits for an (..., D) array of token rows."""
        return _forward(self.layers, x)[..., 0]

    def copy(self) -> WeightHead:
        return WeightHead([(w.copy(), b.copy()) for w, b in self.layers], self.side)

    def params(self) -> list:
        return [p for layer in self.layers for p in layer]


def init_weight_head(dim, rng=None, side="text", hidden=None, depth=2, init="uniform"):
    """Build a weight head.

    ``init`` is ``"uniform"`` (all layers from U(+-1/sqrt(fan_in))),
    ``"zero"`` (every parameter 0, i.e. uniform token weights) or
    ``"zero_last"`` (uniform hidden layers, zero output layer: starts at
    uniform weights but still has a nonzero gradient).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    hidden = hidden or dim
    widths = [dim] + [hidden] * (depth - 1) + [1]
    layers = []
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == depth - 1
        if init == "zero" or (init == "zero_last" and last):
            layers.append((np.zeros((fi, fo)), np.zeros(fo)))
        else:
            if rng is None:
                raise ValueError("random init needs an rng")
            layers.append(_uniform_layer(rng, fi, fo))
    return WeightHead(layers, side)


@dataclass
class HiLevels:
    """Per-level (text vector, video vector) pairs plus fusion weights."""

    levels: list
    level_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.level_weights, dtype=np.float64)
        if len(self.levels) < 1 or w.shape != (len(self.levels),):
            raise ShapeMismatch("need one weight per level and at least one level")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("level weights must be nonnegative and sum to 1")
        self.level_weights = w


@dataclass
class MlpScorerParams:
    """L affine layers: 2D -> D -> ... -> D -> 1, rectifier in between."""

    layers: list

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ShapeMismatch("MLP scorer needs at least 2 layers")
        for (w0, _), (w1, _) in zip(self.layers[:-1], self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ShapeMismatch("MLP layer shapes do not chain")
        if self.layers[0][0].shape[0] != 2 * self.layers[0][0].shape[1] or self.layers[-1][0].shape[1] != 1:
            raise ShapeMismatch("MLP must map 2D -> D -> ... -> 1")

    @property
    def dim(self) -> int:
        return self.layers[0][0].shape[1]


def init_mlp_scorer(dim, depth=4, rng=None) -> MlpScorerParams:
    widths = [2 * dim] + [dim] * (depth - 1) + [1]
    return MlpScorerParams([_uniform_layer(rng, fi, fo) for fi, fo in zip(widths[:-1], widths[1:])])


@dataclass
class XtiParams:
    """Stack of multi-head self-attention blocks and a scalar score head.

    Each block is a dict of D x D projections ``wq, wk, wv, wo``.  There is
    no residual path and no positional term.
    """

    blocks: list
    heads: int
    score_w: np.ndarray
    score_b: float = 0.0

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ShapeMismatch("XTI needs at least one block")
        d = self.score_w.shape[0]
        if d % self.heads:
            raise ShapeMismatch(f"width {d} not divisible by {self.heads} heads")
        for blk in self.blocks:
            if any(blk[k].shape != (d, d) for k in ("wq", "wk", "wv", "wo")):
                raise ShapeMismatch("XTI projections must be D x D")

    @property
    def dim(self) -> int:
        return self.score_w.shape[0]


def init_xti(dim, depth=1, heads=1, rng=None) -> XtiParams:
    bound = 1.0 / math.sqrt(dim)
    blocks = [
        {k: rng.uniform(-bound, bound, size=(dim, dim)) for k in ("wq", "wk", "wv", "wo")}
        for _ in range(depth)
    ]
    return XtiParams(blocks, heads, rng.uniform(-bound, bound, size=dim), float(rng.uniform(-bound, bound)))


@dataclass
class ScoreMatrix:
    """Pairwise scores; argmax tensors are filled by TI and WTI only.

    ``t2v_argmax[a, b, t]`` is the video token best matching text token t
    of pair (a, b), -1 at masked text positions (symmetrically for v2t).
    """

    scores: np.ndarray
    t2v_argmax: np.ndarray | None = None
    v2t_argmax: np.ndarray | None = None
    t2v: np.ndarray | None = None
    v2t: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


# ------------------------------------------------------------------- helpers


def _check_dims(T, V):
    if not T or not V:
        raise ShapeMismatch("empty text or video batch")
    d = T[0].dim
    if any(m.dim != d for m in list(T) + list(V)):
        raise ShapeMismatch("token widths differ")
    return d


def _normalized_batch(items):
    tokens, mask = stack_batch(items)
    return normalize_array(tokens, mask), mask


def _global_vectors(T):
    g = np.stack([np.asarray(m.global_row(), dtype=np.float64) for m in T])
    return normalize_array(g)


def _mean_vectors(vn, vmask):
    """Normalized mean of the (already normalized) valid rows of each item."""
    counts = vmask.sum(axis=1, keepdims=True)
    means = vn.sum(axis=1) / counts
    norms = np.linalg.norm(means, axis=-1)
    if np.any(norms <= NORM_EPS):
        raise DegenerateLevel("mean of video tokens is the zero vector")
    return means / norms[:, None]


def head_weights(head: WeightHead, tokens_n, mask):
    """Masked-softmax weights of a head applied to normalized token rows."""
    if head.dim != tokens_n.shape[-1]:
        raise ShapeMismatch(f"head expects D={head.dim}, tokens have D={tokens_n.shape[-1]}")
    return masked_softmax(head.logits(tokens_n), mask)


def _uniform_weights(mask):
    return mask / mask.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------------ DP


def score_dp(t: TokenMatrix, v: TokenMatrix) -> float:
    """Cosine between the text global row and the mean video token."""
    return float(score_dp_batch([t], [v]).scores[0, 0])


def score_dp_batch(T, V) -> ScoreMatrix:
    _check_dims(T, V)
    g = _global_vectors(T)
    vn, vmask = _normalized_batch(V)
    return ScoreMatrix(g @ _mean_vectors(vn, vmask).T)


# ------------------------------------------------------------------------ HI


def score_hi(levels: HiLevels) -> float:
    total = 0.0
    for w, (tv, vv) in zip(levels.level_weights, levels.levels):
        tv = np.asarray(tv, dtype=np.float64)
        vv = np.asarray(vv, dtype=np.float64)
        nt, nv = np.linalg.norm(tv), np.linalg.norm(vv)
        if nt <= NORM_EPS or nv <= NORM_EPS:
            raise DegenerateLevel("zero level vector")
        total += w * float(tv @ vv) / (nt * nv)
    return total


def level_vectors(m: TokenMatrix, levels: int) -> np.ndarray:
    """(S, D) level representation: means of S contiguous chunks of valid rows.

    Chunks are cut with ``np.array_split``; when there are fewer valid rows
    than levels, the empty chunks fall back to the whole-sequence mean.
    """
    rows = normalize_array(m.valid())
    overall = rows.mean(axis=0)
    out = np.empty((levels, m.dim))
    for s, chunk in enumerate(np.array_split(np.arange(rows.shape[0]), levels)):
        out[s] = rows[chunk].mean(axis=0) if len(chunk) else overall
    return out


def hi_levels(t: TokenMatrix, v: TokenMatrix, level_weights) -> HiLevels:
    w = np.asarray(level_weights, dtype=np.float64)
    lt, lv = level_vectors(t, len(w)), level_vectors(v, len(w))
    return HiLevels(list(zip(lt, lv)), w)


def _unit_levels(items, levels):
    lv = np.stack([level_vectors(m, levels) for m in items])
    norms = np.linalg.norm(lv, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateLevel("zero level vector")
    return lv / norms


def score_hi_batch(T, V, level_weights) -> ScoreMatrix:
    _check_dims(T, V)
    w = np.asarray(level_weights, dtype=np.float64)
    lt, lv = _unit_levels(T, len(w)), _unit_levels(V, len(w))
    return ScoreMatrix(np.einsum("s,asd,bsd->ab", w, lt, lv))


# ----------------------------------------------------------------------- MLP


def score_mlp(t_global, v_mean, p: MlpScorerParams) -> float:
    t_global = np.asarray(t_global, dtype=np.float64)
    v_mean = np.asarray(v_mean, dtype=np.float64)
    if t_global.shape != (p.dim,) or v_mean.shape != (p.dim,):
        raise ShapeMismatch(f"MLP expects two {p.dim}-vectors")
    return float(_forward(p.layers, np.concatenate([t_global, v_mean]))[0])


def mlp_pairs(g, vm, p: MlpScorerParams) -> np.ndarray:
    """All-pairs MLP scores for (Bt, D) text and (Bv, D) video vectors."""
    d = p.dim
    if g.shape[1] != d or vm.shape[1] != d:
        raise ShapeMismatch(f"MLP expects width {d}")
    w0, b0 = p.layers[0]
    # the first layer splits over the concatenation, so pairs never materialize 2D inputs
    h = (g @ w0[:d])[:, None, :] + (vm @ w0[d:])[None, :, :] + b0
    if len(p.layers) > 1:
        h = _relu(h)
    return _forward(p.layers[1:], h)[..., 0]


def score_mlp_batch(T, V, p: MlpScorerParams) -> ScoreMatrix:
    _check_dims(T, V)
    vn, vmask = _normalized_batch(V)
    return ScoreMatrix(mlp_pairs(_global_vectors(T), _mean_vectors(vn, vmask), p))


# ----------------------------------------------------------------------- XTI


def xti_forward(x, mask, p: XtiParams) -> np.ndarray:
    """Scores for a stack of concatenated sequences x: (P, N, D), mask: (P, N)."""
    n_pairs, n, d = x.shape
    h = p.heads
    dh = d // h
    if not mask.any(axis=1).all():
        raise AllMasked("XTI sequence with no valid token")
    key_ok = mask[:, None, None, :]
    for blk in p.blocks:
        q = (x @ blk["wq"]).reshape(n_pairs, n, h, dh).transpose(0, 2, 1, 3)
        k = (x @ blk["wk"]).reshape(n_pairs, n, h, dh).transpose(0, 2, 1, 3)
        v = (x @ blk["wv"]).reshape(n_pairs, n, h, dh).transpose(0, 2, 1, 3)
        logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        attn = masked_softmax(logits, np.broadcast_to(key_ok, logits.shape))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(n_pairs, n, d)
        x = np.where(mask[..., None], out @ blk["wo"], 0.0)
    pooled = x.sum(axis=1) / mask.sum(axis=1, keepdims=True)
    return pooled @ p.score_w + p.score_b


def score_xti(t: TokenMatrix, v: TokenMatrix, p: XtiParams) -> float:
    return float(score_xti_batch([t], [v], p).scores[0, 0])


def score_xti_batch(T, V, p: XtiParams, chunk: int = 256) -> ScoreMatrix:
    d = _check_dims(T, V)
    if d != p.dim:
        raise ShapeMismatch(f"XTI params expect D={p.dim}")
    tn, tmask = _normalized_batch(T)
    vn, vmask = _normalized_batch(V)
    return ScoreMatrix(xti_pairs(tn, tmask, vn, vmask, p, chunk))


def xti_pairs(tn, tmask, vn, vmask, p, chunk=256):
    """All (text, video) pairs of normalized padded batches, chunked over videos."""
    bt, bv = tn.shape[0], vn.shape[0]
    out = np.empty((bt, bv))
    for a in range(bt):
        for lo in range(0, bv, chunk):
            hi = min(lo + chunk, bv)
            m = hi - lo
            x = np.concatenate([np.broadcast_to(tn[a], (m,) + tn.shape[1:]), vn[lo:hi]], axis=1)
            mask = np.concatenate([np.broadcast_to(tmask[a], (m, tmask.shape[1])), vmask[lo:hi]], axis=1)
            out[a, lo:hi] = xti_forward(x, mask, p)
    return out


# ------------------------------------------------------------------ TI / WTI


def token_weights(m: TokenMatrix, head: WeightHead) -> np.ndarray:
    """Per-token fusion weights: masked softmax of the head over normalized rows."""
    if head.side != m.modality:
        raise ShapeMismatch(f"{head.side} head applied to a {m.modality} item")
    tokens_n = normalize_array(m.tokens, m.mask)
    return head_weights(head, tokens_n, m.mask)


def token_similarities(tn, vn):
    """(Bt, Bv, Nt, Nv) cosine tensor of normalized padded batches."""
    return np.einsum("atd,bvd->abtv", tn, vn, optimize=True)


def weighted_interaction(tn, tmask, vn, vmask, wt, wv) -> ScoreMatrix:
    """Dual-path weighted token-wise scores from normalized arrays and weights."""
    t2v_max, t2v_idx, v2t_max, v2t_idx = _kernels.maxsim(token_similarities(tn, vn), tmask, vmask)
    t2v = np.einsum("abt,at->ab", t2v_max, wt)
    v2t = np.einsum("abv,bv->ab", v2t_max, wv)
    return ScoreMatrix(
        0.5 * (t2v + v2t),
        t2v_argmax=t2v_idx,
        v2t_argmax=v2t_idx,
        t2v=t2v,
        v2t=v2t,
        extras={"t2v_max": t2v_max, "v2t_max": v2t_max, "text_weights": wt, "video_weights": wv},
    )


def score_ti_batch(T, V, form: str = "mean") -> ScoreMatrix:
    """Token-wise interaction; ``form="sum"`` sums token maxima instead of averaging."""
    if form not in ("mean", "sum"):
        raise ValueError(f"unknown TI form {form!r}")
    _check_dims(T, V)
    tn, tmask = _normalized_batch(T)
    vn, vmask = _normalized_batch(V)
    if form == "mean":
        wt, wv = _uniform_weights(tmask), _uniform_weights(vmask)
    else:
        wt, wv = tmask.astype(np.float64), vmask.astype(np.float64)
    return weighted_interaction(tn, tmask, vn, vmask, wt, wv)


def score_wti_batch(T, V, tw: WeightHead, vw: WeightHead) -> ScoreMatrix:
    _check_dims(T, V)
    tn, tmask = _normalized_batch(T)
    vn, vmask = _normalized_batch(V)
    return weighted_interaction(tn, tmask, vn, vmask, head_weights(tw, tn, tmask), head_weights(vw, vn, vmask))


def score_path(T, V, tw, vw, path: str = "both") -> ScoreMatrix:
    """WTI restricted to one aggregation direction, or the dual-path average."""
    if path not in PATHS:
        raise ValueError(f"unknown path {path!r}")
    s = score_wti_batch(T, V, tw, vw)
    if path == "t2v":
        s.scores = s.t2v.copy()
    elif path == "v2t":
        s.scores = s.v2t.copy()
    return s


# ------------------------------------------------------------------ dispatch


@dataclass
class ScoringModel:
    """Parameters needed by the parametric mechanisms; unused ones may be None."""

    text_head: WeightHead | None = None
    video_head: WeightHead | None = None
    mlp: MlpScorerParams | None = None
    xti: XtiParams | None = None
    level_weights: np.ndarray | None = None
    ti_form: str = "mean"


def default_model(dim, rng, levels=3, mlp_depth=4, xti_depth=1, xti_heads=1, head_init="zero_last"):
    """Seeded parameters for every mechanism (head init per ``init_weight_head``)."""
    return ScoringModel(
        text_head=init_weight_head(dim, rng, "text", init=head_init),
        video_head=init_weight_head(dim, rng, "video", init=head_init),
        mlp=init_mlp_scorer(dim, mlp_depth, rng),
        xti=init_xti(dim, xti_depth, xti_heads, rng),
        level_weights=np.full(levels, 1.0 / levels),
    )


def score_batch(mechanism: str, T, V, model: ScoringModel | None = None) -> ScoreMatrix:
    model = model or ScoringModel()
    if mechanism == "dp":
        return score_dp_batch(T, V)
    if mechanism == "ti":
        return score_ti_batch(T, V, model.ti_form)
    if mechanism == "hi":
        return score_hi_batch(T, V, _need(model.level_weights, "level_weights"))
    if mechanism == "mlp":
        return score_mlp_batch(T, V, _need(model.mlp, "mlp"))
    if mechanism == "xti":
        return score_xti_batch(T, V, _need(model.xti, "xti"))
    if mechanism == "wti":
        return score_wti_batch(T, V, _need(model.text_head, "text_head"), _need(model.video_head, "video_head"))
    raise ValueError(f"unknown mechanism {mechanism!r}")


def _need(x, name):
    if x is None:
        raise ValueError(f"mechanism needs model.{name}")
    return x

"""Contrastive and channel-decorrelation losses, head gradients, FD checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssignmentMismatch, NonSquare, ShapeMismatch
from .interaction import (
    ScoreMatrix,
    WeightHead,
    _global_vectors,
    _mean_vectors,
    _normalized_batch,
    head_weights,
    weighted_interaction,
)
from .numerics import batch_standardize_columns, masked_softmax, stack_batch

CDCR_MODES = ("none", "single", "sequential")


@dataclass(frozen=True)
class LossConfig:
    """``logit_scale`` multiplies scores before the softmax (the tau=100 setting)."""

    logit_scale: float = 100.0
    alpha: float = 0.06
    lam: float = 0.001
    cdcr_mode: str = "sequential"

    def __post_init__(self):
        if self.logit_scale <= 0 or self.alpha < 0 or self.lam < 0:
            raise ValueError("need logit_scale > 0, alpha >= 0, lam >= 0")
        if self.cdcr_mode not in CDCR_MODES:
            raise ValueError(f"cdcr_mode must be one of {CDCR_MODES}")


def _scores(s) -> np.ndarray:
    m = np.asarray(s.scores if isinstance(s, ScoreMatrix) else s, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise NonSquare(f"InfoNCE needs a square B x B matrix with B >= 2, got {m.shape}")
    return m


def _log_softmax(x, axis):
    top = x.max(axis=axis, keepdims=True)
    return x - top - np.log(np.exp(x - top).sum(axis=axis, keepdims=True))


def info_nce(s, cfg: LossConfig = LossConfig()) -> float:
    """Row-wise plus column-wise cross-entropy at the diagonal, each a mean over B."""
    logits = cfg.logit_scale * _scores(s)
    rows = -np.diag(_log_softmax(logits, axis=1)).mean()
    cols = -np.diag(_log_softmax(logits, axis=0)).mean()
    return float(rows + cols)


def info_nce_grad(s, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """d info_nce / d scores."""
    logits = cfg.logit_scale * _scores(s)
    b = logits.shape[0]
    p_rows = np.exp(_log_softmax(logits, axis=1))
    p_cols = np.exp(_log_softmax(logits, axis=0))
    return cfg.logit_scale * (p_rows + p_cols - 2.0 * np.eye(b)) / b


def correlation_matrix(et, ev) -> np.ndarray:
    """D x D cross-correlation of column-standardized features."""
    et = np.asarray(et, dtype=np.float64)
    ev = np.asarray(ev, dtype=np.float64)
    if et.shape != ev.shape:
        raise ShapeMismatch(f"paired features differ in shape: {et.shape} vs {ev.shape}")
    return batch_standardize_columns(et).T @ batch_standardize_columns(ev) / et.shape[0]


def cdcr_penalty(c, alpha: float) -> float:
    diag = np.diag(c)
    off = (c**2).sum() - (diag**2).sum()
    return float(((1.0 - diag) ** 2).sum() + alpha * off)


def cdcr_single(et, ev, cfg: LossConfig = LossConfig()) -> float:
    return cdcr_penalty(correlation_matrix(et, ev), cfg.alpha)


def _diag_assignments(assign, bsz):
    if isinstance(assign, ScoreMatrix):
        if assign.t2v_argmax is None or assign.v2t_argmax is None:
            raise AssignmentMismatch("score matrix carries no argmax assignments")
        r = np.arange(bsz)
        return assign.t2v_argmax[r, r], assign.v2t_argmax[r, r]
    i4t, i4v = assign
    return np.asarray(i4t), np.asarray(i4v)


def gather_matches(T, V, assign):
    """Rows and matched rows for every valid token of every positive pair.

    Returns ``(text, text_match, video_match, video)`` where ``text_match[x]``
    is the video feature assigned to text token x and ``video_match[y]`` the
    text feature assigned to video token y.
    """
    if len(T) != len(V):
        raise ShapeMismatch("sequential CDCR needs paired batches")
    i4t, i4v = _diag_assignments(assign, len(T))
    et, tmask = stack_batch(T)
    ev, vmask = stack_batch(V)
    if i4t.shape != tmask.shape or i4v.shape != vmask.shape:
        raise AssignmentMismatch("assignment shapes do not match the batch")
    for idx, own, other in ((i4t, tmask, vmask), (i4v, vmask, tmask)):
        sel = idx[own]
        rows = np.nonzero(own)[0]
        if np.any(sel < 0) or np.any(sel >= other.shape[1]) or not other[rows, sel].all():
            raise AssignmentMismatch("assignment references a masked or missing token")
    b_t, t_pos = np.nonzero(tmask)
    b_v, v_pos = np.nonzero(vmask)
    return et[b_t, t_pos], ev[b_t, i4t[b_t, t_pos]], et[b_v, i4v[b_v, v_pos]], ev[b_v, v_pos]


def cdcr_sequential(T, V, assign, cfg: LossConfig = LossConfig()) -> float:
    """Average of the text->matched-video and matched-text->video correlations.

    Each correlation divides by its own row count (number of valid tokens).
    """
    text, text_match, video_match, video = gather_matches(T, V, assign)
    c = 0.5 * (correlation_matrix(text, text_match) + correlation_matrix(video_match, video))
    return cdcr_penalty(c, cfg.alpha)


def cdcr_term(s, T, V, cfg: LossConfig) -> float:
    if cfg.cdcr_mode == "none":
        return 0.0
    if cfg.cdcr_mode == "single":
        vn, vmask = _normalized_batch(V)
        return cdcr_single(_global_vectors(T), _mean_vectors(vn, vmask), cfg)
    return cdcr_sequential(T, V, s, cfg)


def total_loss(s, T, V, assign=None, cfg: LossConfig = LossConfig()) -> float:
    nce = info_nce(s, cfg)
    if cfg.cdcr_mode == "none":
        return nce
    return nce + cfg.lam * cdcr_term(assign if assign is not None else s, T, V, cfg)


# ------------------------------------------------------------------ gradients


def _mlp_grads(layers, x, dout):
    """Parameter gradients of sum(dout * mlp(x)[..., 0]) for rows x: (M, D)."""
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    grads = [None] * len(layers)
    g = dout[:, None]
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (pre[i] > 0)
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads


def _softmax_backward(w, dw):
    return w * (dw - (w * dw).sum(axis=-1, keepdims=True))


@dataclass
class HeadGrads:
    loss: float
    info_nce: float
    cdcr: float
    text: list
    video: list
    scores: ScoreMatrix = field(repr=False)


def grad_wti_heads(T, V, tw: WeightHead, vw: WeightHead, cfg: LossConfig = LossConfig()) -> HeadGrads:
    """Analytic gradient of the total loss w.r.t. both weight heads.

    Argmax assignments are held fixed (lowest-index subgradient at ties).
    The CDCR term sees token features and assignments only, neither of
    which depends on the heads, so it contributes a value but no gradient.
    """
    tn, tmask = _normalized_batch(T)
    vn, vmask = _normalized_batch(V)
    wt = head_weights(tw, tn, tmask)
    wv = head_weights(vw, vn, vmask)
    s = weighted_interaction(tn, tmask, vn, vmask, wt, wv)
    nce = info_nce(s, cfg)
    reg = cdcr_term(s, T, V, cfg)
    g = info_nce_grad(s, cfg)

    d_wt = 0.5 * np.einsum("ab,abt->at", g, s.extras["t2v_max"])
    d_wv = 0.5 * np.einsum("ab,abv->bv", g, s.extras["v2t_max"])
    dz_t = _softmax_backward(wt, d_wt)
    dz_v = _softmax_backward(wv, d_wv)
    text = _mlp_grads(tw.layers, tn[tmask], dz_t[tmask])
    video = _mlp_grads(vw.layers, vn[vmask], dz_v[vmask])
    return HeadGrads(nce + cfg.lam * reg, nce, reg, text, video, s)


def wti_head_loss(T, V, tw, vw, cfg: LossConfig = LossConfig()) -> float:
    """Total loss as a plain function of the heads (for finite differences)."""
    tn, tmask = _normalized_batch(T)
    vn, vmask = _normalized_batch(V)
    wt = masked_softmax(tw.logits(tn), tmask)
    wv = masked_softmax(vw.logits(vn), vmask)
    s = weighted_interaction(tn, tmask, vn, vmask, wt, wv)
    return total_loss(s, T, V, s, cfg)


@dataclass
class GradReport:
    max_rel_error: float
    per_param: list
    step: float
    numeric: list = field(repr=False, default_factory=list)


def rel_error(a, n, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps roundoff on ~0 entries out."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_check(loss_fn, params, analytic, step=1e-4, floor=1e-6) -> GradReport:
    """Central finite differences for every coordinate of every array in ``params``.

    ``loss_fn()`` must read the arrays in ``params``; they are perturbed in
    place and restored.
    """
    numeric, per_param = [], []
    for p, a in zip(params, analytic):
        num = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        out = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
        numeric.append(num)
        per_param.append(float(rel_error(a, num, floor).max()) if num.size else 0.0)
    return GradReport(max(per_param, default=0.0), per_param, step, numeric)

"""Slow per-pair reference implementations used as test oracles.

Everything here is written with explicit Python loops over pairs and
tokens and only uses the truncated (valid) rows of each item, so it shares
no batching, padding or masking code with :mod:`lateinteract.interaction`.
"""

from __future__ import annotations

import math

import numpy as np


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / math.sqrt(float(sum(c * c for c in x)))


def _dot(a, b):
    return float(sum(x * y for x, y in zip(a, b)))


def _rows(m):
    return [_unit(r) for r, ok in zip(m.tokens, m.mask) if ok]


def _mlp(layers, x):
    x = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        x = np.array([_dot(x, w[:, j]) + b[j] for j in range(w.shape[1])])
        if i < len(layers) - 1:
            x = np.array([max(c, 0.0) for c in x])
    return x


def _softmax(z):
    top = max(z)
    e = [math.exp(c - top) for c in z]
    s = sum(e)
    return [c / s for c in e]


def _mean(rows):
    return np.array([sum(r[d] for r in rows) / len(rows) for d in range(len(rows[0]))])


def dp(t, v):
    g = _unit(t.tokens[int(np.argmax(t.mask))])
    return _dot(g, _unit(_mean(_rows(v))))


def hi(t, v, level_weights):
    total = 0.0
    s_count = len(level_weights)
    rt, rv = _rows(t), _rows(v)
    for s, w in enumerate(level_weights):
        parts = []
        for rows in (rt, rv):
            chunk = _chunk(len(rows), s_count, s)
            parts.append(_mean([rows[i] for i in chunk]) if chunk else _mean(rows))
        total += w * _dot(_unit(parts[0]), _unit(parts[1]))
    return total


def _chunk(n, parts, s):
    # same boundaries as np.array_split: the first n % parts chunks get one extra
    base, extra = divmod(n, parts)
    start = s * base + min(s, extra)
    size = base + (1 if s < extra else 0)
    return list(range(start, start + size))


def mlp(t, v, layers):
    g = _unit(t.tokens[int(np.argmax(t.mask))])
    vm = _unit(_mean(_rows(v)))
    return float(_mlp(layers, np.concatenate([g, vm]))[0])


def xti(t, v, p):
    x = _rows(t) + _rows(v)
    n = len(x)
    d = len(x[0])
    dh = d // p.heads
    for blk in p.blocks:
        q = [r @ blk["wq"] for r in x]
        k = [r @ blk["wk"] for r in x]
        val = [r @ blk["wv"] for r in x]
        out = []
        for i in range(n):
            concat = np.zeros(d)
            for h in range(p.heads):
                sl = slice(h * dh, (h + 1) * dh)
                att = _softmax([_dot(q[i][sl], k[j][sl]) / math.sqrt(dh) for j in range(n)])
                for j in range(n):
                    concat[sl] += att[j] * val[j][sl]
            out.append(concat @ blk["wo"])
        x = out
    pooled = _mean(x)
    return _dot(pooled, p.score_w) + p.score_b


def token_weights(m, head):
    rows = _rows(m)
    return _softmax([float(_mlp(head.layers, r)[0]) for r in rows])


def wti_parts(t, v, wt=None, wv=None):
    """(t2v, v2t) terms; uniform weights when ``wt``/``wv`` are None."""
    rt, rv = _rows(t), _rows(v)
    wt = wt if wt is not None else [1.0 / len(rt)] * len(rt)
    wv = wv if wv is not None else [1.0 / len(rv)] * len(rv)
    t2v = sum(w * max(_dot(a, b) for b in rv) for w, a in zip(wt, rt))
    v2t = sum(w * max(_dot(a, b) for a in rt) for w, b in zip(wv, rv))
    return t2v, v2t


def ti(t, v, form="mean"):
    if form == "sum":
        rt, rv = _rows(t), _rows(v)
        t2v, v2t = wti_parts(t, v, [1.0] * len(rt), [1.0] * len(rv))
    else:
        t2v, v2t = wti_parts(t, v)
    return 0.5 * (t2v + v2t)


def wti(t, v, tw, vw, path="both"):
    t2v, v2t = wti_parts(t, v, token_weights(t, tw), token_weights(v, vw))
    return {"t2v": t2v, "v2t": v2t, "both": 0.5 * (t2v + v2t)}[path]


def score_matrix(fn, T, V, *args):
    return np.array([[fn(t, v, *args) for v in V] for t in T])


def info_nce(scores, scale):
    b = len(scores)
    rows = cols = 0.0
    for i in range(b):
        rows -= math.log(math.exp(scale * scores[i][i]) / sum(math.exp(scale * scores[i][j]) for j in range(b)))
        cols -= math.log(math.exp(scale * scores[i][i]) / sum(math.exp(scale * scores[j][i]) for j in range(b)))
    return rows / b + cols / b


def correlation(et, ev):
    """Cross-correlation with population statistics, as a double loop."""
    b, d = len(et), len(et[0])
    c = np.zeros((d, d))
    stats = []
    for x in (et, ev):
        mu = [sum(x[r][i] for r in range(b)) / b for i in range(d)]
        sd = [math.sqrt(sum((x[r][i] - mu[i]) ** 2 for r in range(b)) / b) for i in range(d)]
        stats.append((mu, sd))
    (mt, st), (mv, sv) = stats
    for i in range(d):
        for j in range(d):
            c[i, j] = sum((et[r][i] - mt[i]) / st[i] * (ev[r][j] - mv[j]) / sv[j] for r in range(b)) / b
    return c


def cdcr_penalty(c, alpha):
    d = len(c)
    on = sum((1 - c[i][i]) ** 2 for i in range(d))
    off = sum(c[i][j] ** 2 for i in range(d) for j in range(d) if i != j)
    return on + alpha * off


def cdcr_sequential(T, V, t2v_idx, v2t_idx, alpha):
    """Explicit gather of (token, matched token) feature pairs, then correlate."""
    text_rows, text_match, video_rows, video_match = [], [], [], []
    for b, (t, v) in enumerate(zip(T, V)):
        for i in range(t.n):
            if t.mask[i]:
                text_rows.append(t.tokens[i])
                text_match.append(v.tokens[t2v_idx[b][i]])
        for j in range(v.n):
            if v.mask[j]:
                video_rows.append(v.tokens[j])
                video_match.append(t.tokens[v2t_idx[b][j]])
    c1 = correlation(text_rows, text_match)
    c2 = correlation(video_match, video_rows)
    return cdcr_penalty((c1 + c2) / 2, alpha)

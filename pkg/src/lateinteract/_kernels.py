"""Masked max-similarity reductions: numba kernels plus a pure-numpy path.

The similarity contraction itself is a BLAS matmul either way; what the
kernels replace is the masked max/argmax/weighted-sum pass that numpy does
with several full-size temporaries.

Set ``LATEINTERACT_DISABLE_NUMBA=1`` to force the numpy path.  Both paths
break max ties toward the lowest index and mark rows without a valid
partner with index -1.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("LATEINTERACT_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def backend() -> str:
    return _backend


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch backend (benchmarks and equivalence tests)."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    try:
        yield
    finally:
        _backend = prev


# ---------------------------------------------------------------- numpy path


def _maxsim_numpy(sims, tmask, vmask):
    # sims: (Bt, Bv, Nt, Nv); tmask: (Bt, Nt); vmask: (Bv, Nv)
    valid_v = vmask[None, :, None, :]
    valid_t = tmask[:, None, :, None]
    over_v = np.where(valid_v, sims, -np.inf)
    t2v_idx = over_v.argmax(axis=3)
    t2v_max = np.take_along_axis(over_v, t2v_idx[..., None], axis=3)[..., 0]
    over_t = np.where(valid_t, sims, -np.inf)
    v2t_idx = over_t.argmax(axis=2)
    v2t_max = np.take_along_axis(over_t, v2t_idx[:, :, None, :], axis=2)[:, :, 0, :]

    t_ok = np.broadcast_to(tmask[:, None, :], t2v_max.shape)
    v_ok = np.broadcast_to(vmask[None, :, :], v2t_max.shape)
    t2v_max = np.where(t_ok, t2v_max, 0.0)
    v2t_max = np.where(v_ok, v2t_max, 0.0)
    t2v_idx = np.where(t_ok, t2v_idx, -1)
    v2t_idx = np.where(v_ok, v2t_idx, -1)
    return t2v_max, t2v_idx.astype(np.int64), v2t_max, v2t_idx.astype(np.int64)


def _scan_numpy(sims, qmask, qw, dmask, dw):
    # sims: (Nd, Nv, Nt) for one query against Nd documents
    t2v = np.where(dmask[:, :, None], sims, -np.inf).max(axis=1)
    t2v = np.where(qmask[None, :], t2v, 0.0)
    v2t = np.where(qmask[None, None, :], sims, -np.inf).max(axis=2)
    v2t = np.where(dmask, v2t, 0.0)
    return 0.5 * (t2v @ qw + np.einsum("nv,nv->n", v2t, dw))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _maxsim_numba(sims, tmask, vmask):
        bt, bv, nt, nv = sims.shape
        t2v_max = np.zeros((bt, bv, nt))
        t2v_idx = np.full((bt, bv, nt), -1, dtype=np.int64)
        v2t_max = np.zeros((bt, bv, nv))
        v2t_idx = np.full((bt, bv, nv), -1, dtype=np.int64)
        for a in range(bt):
            for b in range(bv):
                for t in range(nt):
                    if not tmask[a, t]:
                        continue
                    for v in range(nv):
                        if not vmask[b, v]:
                            continue
                        s = sims[a, b, t, v]
                        if t2v_idx[a, b, t] < 0 or s > t2v_max[a, b, t]:
                            t2v_max[a, b, t] = s
                            t2v_idx[a, b, t] = v
                        if v2t_idx[a, b, v] < 0 or s > v2t_max[a, b, v]:
                            v2t_max[a, b, v] = s
                            v2t_idx[a, b, v] = t
        return t2v_max, t2v_idx, v2t_max, v2t_idx

    @njit(cache=True, nogil=True)
    def _scan_numba(sims, qmask, qw, dmask, dw):
        nd, nv, nt = sims.shape
        out = np.empty(nd)
        row = np.empty(nt)
        for n in range(nd):
            for t in range(nt):
                row[t] = -np.inf
            v2t = 0.0
            for v in range(nv):
                if not dmask[n, v]:
                    continue
                best = -np.inf
                for t in range(nt):
                    if qmask[t]:
                        s = sims[n, v, t]
                        if s > best:
                            best = s
                        if s > row[t]:
                            row[t] = s
                v2t += dw[n, v] * best
            t2v = 0.0
            for t in range(nt):
                if qmask[t]:
                    t2v += qw[t] * row[t]
            out[n] = 0.5 * (t2v + v2t)
        return out


def maxsim(sims, tmask, vmask):
    """Masked max over both token axes of a (Bt, Bv, Nt, Nv) similarity tensor.

    Returns ``(t2v_max, t2v_idx, v2t_max, v2t_idx)``; maxima at masked
    positions are 0 and their indices -1.
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    tmask = np.ascontiguousarray(tmask, dtype=np.bool_)
    vmask = np.ascontiguousarray(vmask, dtype=np.bool_)
    if _backend == "numba":
        return _maxsim_numba(sims, tmask, vmask)
    return _maxsim_numpy(sims, tmask, vmask)


def scan(sims, qmask, qw, dmask, dw):
    """Weighted dual-path token-wise score of one query against many documents.

    ``sims`` is (Nd, Nv, Nt), the layout of ``docs_flat @ query.T``.
    ``qw``/``dw`` are per-token fusion weights (uniform for mean-form TI).
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    args = (
        sims,
        np.ascontiguousarray(qmask, dtype=np.bool_),
        np.ascontiguousarray(qw, dtype=np.float64),
        np.ascontiguousarray(dmask, dtype=np.bool_),
        np.ascontiguousarray(dw, dtype=np.float64),
    )
    if _backend == "numba":
        return _scan_numba(*args)
    return _scan_numpy(*args)


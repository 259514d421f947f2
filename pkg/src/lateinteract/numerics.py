"""Small deterministic kernels shared by the scorers and the losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllMasked, DegenerateColumn, ShapeMismatch, ZeroNormRow

NORM_EPS = 1e-12
MODALITIES = ("text", "video")


@dataclass(frozen=True, eq=False)
class TokenMatrix:
    """Token sequence of one text or video item.

    ``tokens`` is N x D, ``mask`` marks valid rows.  Padding rows carry
    ``mask == False`` and are ignored by every scorer.
    """

    id: int
    tokens: np.ndarray
    mask: np.ndarray = field(default=None)
    modality: str = "video"

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise ShapeMismatch(f"tokens must be N x D with N, D >= 1, got {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.floating):
            tokens = tokens.astype(np.float64)
        mask = self.mask
        if mask is None:
            mask = np.ones(tokens.shape[0], dtype=bool)
        mask = np.asarray(mask).astype(bool)
        if mask.shape != (tokens.shape[0],):
            raise ShapeMismatch(f"mask length {mask.shape} does not match N={tokens.shape[0]}")
        if not mask.any():
            raise AllMasked(f"item {self.id} has no valid token")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid(self) -> np.ndarray:
        """Valid rows only, in order."""
        return self.tokens[self.mask]

    def global_row(self) -> np.ndarray:
        """First valid row; stands in for the [CLS] vector of a text item."""
        return self.tokens[int(np.argmax(self.mask))]

    def truncated(self) -> TokenMatrix:
        return TokenMatrix(self.id, self.valid().copy(), None, self.modality)


def l2_normalize_rows(m: TokenMatrix) -> TokenMatrix:
    """Unit-normalize valid rows and zero the masked ones."""
    tokens = np.asarray(m.tokens, dtype=np.float64)
    norms = np.sqrt(np.einsum("nd,nd->n", tokens, tokens))
    bad = m.mask & (norms <= NORM_EPS)
    if bad.any():
        raise ZeroNormRow(f"item {m.id}: valid row {int(np.argmax(bad))} has zero norm")
    safe = np.where(m.mask, norms, 1.0)
    out = np.where(m.mask[:, None], tokens / safe[:, None], 0.0)
    return TokenMatrix(m.id, out, m.mask.copy(), m.modality)


def normalize_array(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-normalize an (..., N, D) array; rows outside ``mask`` become zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    if np.any(mask & (norms[..., 0] <= NORM_EPS)):
        raise ZeroNormRow("valid row with zero norm")
    return np.where(mask[..., None], x / np.where(norms > NORM_EPS, norms, 1.0), 0.0)


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs mask {mask.shape}")
    if not mask.any(axis=-1).all():
        raise AllMasked("softmax over an all-masked row")
    filled = np.where(mask, logits, -np.inf)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def batch_standardize_columns(m) -> np.ndarray:
    """Zero-mean, unit population-std columns (std divides by B, not B - 1)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ShapeMismatch(f"need a B x D matrix with B >= 2, got {m.shape}")
    centered = m - m.mean(axis=0)
    std = np.sqrt((centered**2).mean(axis=0))
    if np.any(std <= NORM_EPS):
        raise DegenerateColumn(f"constant column(s) {np.flatnonzero(std <= NORM_EPS).tolist()}")
    return centered / std


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def stack_batch(items, n: int | None = None, dtype=np.float64):
    """Pad a list of TokenMatrix into (B, N, D) tokens and (B, N) masks."""
    if not items:
        raise ShapeMismatch("empty batch")
    dim = items[0].dim
    if any(it.dim != dim for it in items):
        raise ShapeMismatch("token widths differ within batch")
    n = n or max(it.n for it in items)
    tokens = np.zeros((len(items), n, dim), dtype=dtype)
    mask = np.zeros((len(items), n), dtype=bool)
    for b, it in enumerate(items):
        tokens[b, : it.n] = it.tokens
        mask[b, : it.n] = it.mask
    return tokens, mask

"""Token importance scoring and token selection.

Importance comes from post-softmax attention captured at the prune layer:
a patch token matters if it receives attention mass across all query rows.
Three scoring modes are provided (normalized column sums for selection, a
per-head-softmaxed head-averaged variant used as the student distribution in
distillation, and a CLS-query-row mode for comparison), plus two selectors:
keep a fixed top-K (``value``) or the minimal top set reaching a probability
mass threshold (``mass``), which adapts the kept count per image.

All masks cover the N+1 token positions with CLS pinned at index 0 and never
pruned. Token density is defined as kept tokens (including CLS) / (N+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, softmax
from .errors import ContractError, DistributionError

STRATEGIES = ("none", "value", "mass")
EXEC_MODES = ("masked", "compacted")
SCORE_KINDS = ("column_sum", "cls_row")


@dataclass(frozen=True)
class TokenScore:
    """Normalized importance distribution over the N patch tokens."""

    scores: np.ndarray
    kind: str  # column_sum | head_softmax | cls_row


@dataclass(frozen=True)
class TokenMask:
    """Keep/prune bits over the N+1 token positions; bits[0] is CLS."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", bits)
        if bits.ndim != 1:
            raise ContractError(f"mask must be a vector, got shape {bits.shape}")
        if bits[0] != 1:
            raise ContractError("CLS position (index 0) must be kept")
        if bits.sum() < 1:
            raise ContractError("mask keeps no tokens")

    @property
    def kept_count(self) -> int:
        return int(self.bits.sum())

    @property
    def density(self) -> float:
        return self.kept_count / self.bits.size


@dataclass(frozen=True)
class PruneConfig:
    """Sparsification policy: how to score, how to select, where, and how to run."""

    strategy: str = "none"
    density: float | None = None          # value strategy: target kept fraction
    mass_threshold: float | None = None   # mass strategy: cumulative score target
    prune_layer: int = 1
    exec_mode: str = "masked"
    score_kind: str = "column_sum"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.exec_mode not in EXEC_MODES:
            raise ContractError(f"unknown exec_mode {self.exec_mode!r}")
        if self.score_kind not in SCORE_KINDS:
            raise ContractError(f"unknown score_kind {self.score_kind!r}")
        if self.strategy == "value":
            if self.density is None or not 0.0 <= self.density <= 1.0:
                raise ContractError("value strategy requires density in [0, 1]")
        if self.strategy == "mass":
            if self.mass_threshold is None or not 0.0 < self.mass_threshold <= 1.0:
                raise ContractError("mass strategy requires mass_threshold in (0, 1]")
        if self.prune_layer < 0:
            raise ContractError("prune_layer must be non-negative")


# -- scoring -----------------------------------------------------------


def _check_attn_shape(probs: np.ndarray) -> None:
    if probs.ndim not in (3, 4):
        raise ContractError(f"attention probs must be [H,T,T] or [B,H,T,T], got {probs.shape}")
    if probs.shape[-1] != probs.shape[-2]:
        raise ContractError(f"attention probs must be square over tokens, got {probs.shape}")


def column_sum_scores(probs: np.ndarray | Tensor) -> TokenScore:
    """Primary importance score: attention column sums, normalized over patches.

    Rows m run over all T tokens (CLS included); columns n cover patch tokens
    only, so CLS is never a pruning candidate. Head contributions are summed,
    not averaged, and no extra softmax is applied.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    _check_attn_shape(p)
    col = p[..., :, 1:].sum(axis=-2)     # [..., H, N]
    w = col.sum(axis=-2)                 # [..., N]
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DistributionError("attention column sums vanish; probs are not a valid softmax output")
    return TokenScore(scores=w / total, kind="column_sum")


def head_softmax_scores(probs: Tensor | np.ndarray) -> Tensor:
    """Distillation-side score: per-head softmax of column sums, head-averaged.

    Differentiable; gradients flow back into the attention probabilities.
    Output rows sum to 1 by construction.
    """
    t = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    _check_attn_shape(t.data)
    col = t[..., :, 1:].sum(axis=-2)     # [..., H, N]
    per_head = softmax(col, axis=-1)
    return per_head.mean(axis=-2)        # [..., N]


def cls_row_scores(probs: np.ndarray | Tensor) -> TokenScore:
    """CLS-query attention over patch columns, head-averaged and renormalized."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    _check_attn_shape(p)
    row = p[..., :, 0, 1:]               # [..., H, N]
    avg = row.mean(axis=-2)
    total = avg.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DistributionError("CLS row carries no patch attention mass")
    return TokenScore(scores=avg / total, kind="cls_row")


def score(probs: np.ndarray | Tensor, kind: str) -> TokenScore:
    if kind == "column_sum":
        return column_sum_scores(probs)
    if kind == "cls_row":
        return cls_row_scores(probs)
    raise ContractError(f"unknown score kind {kind!r}")


# -- selection ---------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def select_value(scores: np.ndarray, density: float) -> np.ndarray:
    """Keep a fixed count K = round(density * (N+1)), clamped to [1, N].

    Returns the sorted indices of the K highest-scoring patches; ties broken
    by lower index (stable descending sort).
    """
    scores = np.asarray(scores)
    n = scores.shape[-1]
    k = min(max(round_half_up(density * (n + 1)), 1), n)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def select_mass(scores: np.ndarray, mass_threshold: float) -> np.ndarray:
    """Keep the minimal set of top-scoring patches whose mass reaches the threshold.

    Sorted descending (ties by lower index), the shortest prefix whose
    cumulative score is >= mass_threshold is kept. A threshold of 1.0 keeps
    every patch outright: the whole distribution is the minimal set reaching
    full mass, and float round-off must not prune zero-score stragglers.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if mass_threshold >= 1.0:
        return np.arange(scores.shape[-1])
    order = np.argsort(-scores, kind="stable")
    csum = np.cumsum(scores[order])
    k = int(np.searchsorted(csum, mass_threshold, side="left")) + 1
    k = min(k, scores.shape[-1])
    return np.sort(order[:k])


def build_mask(selected: np.ndarray, num_patches: int) -> TokenMask:
    """Binary keep mask over N+1 positions from selected patch indices; CLS pinned."""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        raise ContractError("empty patch selection is degenerate; keep at least one patch")
    if selected.min() < 0 or selected.max() >= num_patches:
        raise IndexError(f"patch indices must lie in [0, {num_patches}), got [{selected.min()}, {selected.max()}]")
    bits = np.zeros(num_patches + 1, dtype=np.uint8)
    bits[0] = 1
    bits[1 + selected] = 1
    return TokenMask(bits=bits)


def compact(x: Tensor, mask: TokenMask | np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Gather kept token rows of x [B,T,d] in order; returns (x', index map).

    The index map holds the original positions of the kept rows so results can
    be scattered back for visualization.
    """
    bits = mask.bits if isinstance(mask, TokenMask) else np.asarray(mask)
    indices = np.flatnonzero(bits)
    out = x[:, indices] if isinstance(x, Tensor) else np.asarray(x)[:, indices]
    return out, indices


def scatter_back(compacted: np.ndarray, index_map: np.ndarray, num_tokens: int) -> np.ndarray:
    """Inverse of compact for arrays: kept rows restored, pruned rows zero."""
    compacted = np.asarray(compacted)
    out = np.zeros((compacted.shape[0], num_tokens) + compacted.shape[2:], dtype=compacted.dtype)
    out[:, index_map] = compacted
    return out


def plan(probs: np.ndarray | Tensor, config: PruneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample masks and densities from attention captured at the prune layer.

    probs: [B,H,T,T] (or [H,T,T] for a single sample). Returns
    (masks [B, N+1] uint8, densities [B] float64). Strategy ``none`` keeps
    everything.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    single = p.ndim == 3
    if single:
        p = p[None]
    batch, _, t, _ = p.shape
    n = t - 1
    if config.strategy == "none":
        masks = np.ones((batch, t), dtype=np.uint8)
    else:
        s = score(p, config.score_kind).scores
        masks = np.zeros((batch, t), dtype=np.uint8)
        for b in range(batch):
            if config.strategy == "value":
                sel = select_value(s[b], config.density)
            else:
                sel = select_mass(s[b], config.mass_threshold)
            masks[b] = build_mask(sel, n).bits
    densities = masks.sum(axis=1) / t
    if single:
        return masks[0], densities[0]
    return masks, densities

"""Online temporal mask reuse: drift statistics, per-head reuse decisions, layer gating.

Each head keeps an anchor: the step at which its mask was last freshly
predicted, together with the mean-pooled query/key features and the mask from
that step.  At a later step the head reuses the anchor mask when the pooled
query-key drift against the anchor stays within the reuse threshold, and
refreshes (predicts a new mask, resetting the anchor) otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .blocksparse import BlockMask, changed_block_ratio, realized_sparsity, top_p_select
from .errors import ConfigError, DomainError, ShapeMismatch, StateError

COLD_START = "cold_start"
REFRESH = "refresh"
REUSE = "reuse"

DEFAULT_GATE = (0.1, 0.9)
DEFAULT_BLOCK_ALIGN = 128


def full_token_drift(q_a: np.ndarray, q_b: np.ndarray,
                     k_a: np.ndarray, k_b: np.ndarray) -> float:
    """Token-averaged L1 drift of queries plus keys between two steps."""
    if not (q_a.shape == q_b.shape == k_a.shape == k_b.shape) or q_a.ndim != 2:
        raise ShapeMismatch("drift inputs must share one (tokens, dim) shape")
    dq = np.abs(q_a - q_b).sum(axis=1).mean()
    dk = np.abs(k_a - k_b).sum(axis=1).mean()
    return float(dq + dk)


def mean_pool_drift(qbar_a: np.ndarray, qbar_b: np.ndarray,
                    kbar_a: np.ndarray, kbar_b: np.ndarray) -> float:
    """L1 drift of the token-averaged query and key features."""
    if not (qbar_a.shape == qbar_b.shape == kbar_a.shape == kbar_b.shape) or qbar_a.ndim != 1:
        raise ShapeMismatch("pooled drift inputs must share one (dim,) shape")
    return float(np.abs(qbar_a - qbar_b).sum() + np.abs(kbar_a - kbar_b).sum())


@dataclass
class CacheEntry:
    anchor_step: int
    q_mean: np.ndarray
    k_mean: np.ndarray
    mask: BlockMask

    def copy(self) -> "CacheEntry":
        return CacheEntry(
            anchor_step=self.anchor_step,
            q_mean=self.q_mean.copy(),
            k_mean=self.k_mean.copy(),
            mask=BlockMask(self.mask.retained.copy(), self.mask.origin_step, self.mask.origin_tau),
        )


class DriftCache:
    """Per-head anchor store; one independent entry per head key."""

    def __init__(self):
        self._entries: dict = {}

    def get(self, head) -> CacheEntry | None:
        entry = self._entries.get(head)
        if entry is not None and entry.mask is None:
            raise StateError(f"corrupt cache for head {head}: anchor without mask")
        return entry

    def store(self, head, entry: CacheEntry) -> None:
        self._entries[head] = entry

    def heads(self):
        return list(self._entries)

    def snapshot(self, head) -> CacheEntry | None:
        entry = self._entries.get(head)
        return entry.copy() if entry is not None else None


@dataclass(frozen=True)
class ReuseConfig:
    """Reuse threshold plus the layer-gate band (fraction-of-refreshing-heads bounds)."""

    delta: float = 0.0
    gate_lo: float = DEFAULT_GATE[0]
    gate_hi: float = DEFAULT_GATE[1]

    def __post_init__(self):
        if self.delta < 0 or math.isnan(self.delta):
            raise ConfigError(f"reuse threshold must be >= 0, got {self.delta}")
        if not (0.0 <= self.gate_lo <= self.gate_hi <= 1.0):
            raise ConfigError(
                f"gate bounds must satisfy 0 <= lo <= hi <= 1, got ({self.gate_lo}, {self.gate_hi})"
            )


@dataclass
class TmrOutcome:
    mask: BlockMask
    decision: str
    drift: float | None


def tmr_step(head, step: int, q: np.ndarray, k: np.ndarray, cache: DriftCache,
             delta: float, predict_mask: Callable[[object, int], BlockMask]) -> TmrOutcome:
    """One reuse-or-refresh decision for a head at a step.

    Cold start (no anchor) and drift > delta both predict a fresh mask and set
    the anchor to the current step; drift <= delta returns the cached anchor
    mask and leaves the cache untouched.
    """
    if q.ndim != 2 or q.shape != k.shape:
        raise ShapeMismatch("tmr_step expects Q and K of one (tokens, dim) shape")
    q_mean = q.mean(axis=0)
    k_mean = k.mean(axis=0)
    entry = cache.get(head)
    if entry is None:
        mask = predict_mask(head, step)
        cache.store(head, CacheEntry(step, q_mean, k_mean, mask))
        return TmrOutcome(mask=mask, decision=COLD_START, drift=None)
    drift = mean_pool_drift(entry.q_mean, q_mean, entry.k_mean, k_mean)
    if drift > delta:
        mask = predict_mask(head, step)
        cache.store(head, CacheEntry(step, q_mean, k_mean, mask))
        return TmrOutcome(mask=mask, decision=REFRESH, drift=drift)
    return TmrOutcome(mask=entry.mask, decision=REUSE, drift=drift)


def layer_gate(refresh_flags: Sequence[bool], gate_lo: float, gate_hi: float) -> list[bool]:
    """Force whole-layer reuse/refresh when the refreshing fraction leaves [lo, hi]."""
    if gate_lo > gate_hi:
        raise DomainError(f"gate_lo ({gate_lo}) must not exceed gate_hi ({gate_hi})")
    flags = list(bool(f) for f in refresh_flags)
    if not flags:
        raise DomainError("layer gate needs at least one head flag")
    fraction = sum(flags) / len(flags)
    if fraction < gate_lo:
        return [False] * len(flags)
    if fraction > gate_hi:
        return [True] * len(flags)
    return flags


def fit_stability_constant(samples: Iterable[tuple[float, float]]) -> float:
    """Max ratio changed-block-ratio / drift over samples; the fitted bound constant.

    Zero-drift samples must be excluded by the caller (they are required to
    have a zero changed ratio and are asserted separately).
    """
    best = None
    for drift, ratio in samples:
        if drift <= 0:
            raise DomainError("stability fit requires strictly positive drifts")
        value = ratio / drift
        best = value if best is None else max(best, value)
    if best is None:
        raise DomainError("stability fit requires a nonempty sample set")
    return float(best)


def cache_footprint(layers: int, heads: int, tokens: int, head_dim: int,
                    bytes_per_scalar: int, branches: int, mode: str,
                    block_align: int = DEFAULT_BLOCK_ALIGN) -> int:
    """Bytes needed to cache query/key reuse state for every head and branch.

    ``full_token`` keeps the full (tokens x head_dim) Q and K per head, with the
    token count padded up to ``block_align`` (cached features are laid out in
    kernel-block multiples); ``mean_pooled`` keeps one pooled Q and K vector per
    head and is independent of the token count.
    """
    values = {"layers": layers, "heads": heads, "tokens": tokens, "head_dim": head_dim,
              "bytes_per_scalar": bytes_per_scalar, "block_align": block_align}
    for name, value in values.items():
        if value <= 0:
            raise DomainError(f"{name} must be positive, got {value}")
    if branches < 1:
        raise DomainError(f"branches must be >= 1, got {branches}")
    per_entry = layers * heads * head_dim * 2 * bytes_per_scalar * branches
    if mode == "mean_pooled":
        return per_entry
    if mode == "full_token":
        padded = ((tokens + block_align - 1) // block_align) * block_align
        return per_entry * padded
    raise DomainError(f"mode must be 'full_token' or 'mean_pooled', got {mode!r}")


@dataclass
class StepRecord:
    step: int
    layer: int
    head: int
    decision: str
    drift: float | None
    sparsity: float
    changed_ratio: float | None


@dataclass
class RunResult:
    records: list[StepRecord]
    predictions: int
    reuse_rate: float
    mean_sparsity: float
    mean_velocity_rel_l2: float
    cache: DriftCache
    taus: np.ndarray


def simulate(pipeline, taus: np.ndarray, delta: float,
             gate: tuple[float, float] | None = DEFAULT_GATE,
             normalized_delta: bool = False,
             velocity_error: bool = True) -> RunResult:
    """Full-trajectory reuse simulation with per-head thresholds.

    The layer gate acts as a barrier: all head drift flags in a (layer, step)
    are collected before any mask prediction runs, then the gate may force the
    whole layer to reuse or refresh.  ``normalized_delta`` compares the
    threshold against drift averaged per feature dimension (drift / (2 * D)),
    a non-default variant for cross-config comparability.
    """
    cfg = pipeline.trace.config
    taus = np.asarray(taus, dtype=np.float64)
    if taus.shape != (cfg.layers, cfg.heads):
        raise ShapeMismatch(
            f"per-head thresholds must have shape ({cfg.layers}, {cfg.heads}), got {taus.shape}"
        )
    if delta < 0:
        raise DomainError(f"reuse threshold must be >= 0, got {delta}")
    if gate is not None and not (0.0 <= gate[0] <= gate[1] <= 1.0):
        raise DomainError(f"gate bounds must satisfy 0 <= lo <= hi <= 1, got {gate}")
    scale = 1.0 / (2.0 * cfg.head_dim) if normalized_delta else 1.0
    cache = DriftCache()
    last_used: dict[tuple[int, int], BlockMask] = {}
    records: list[StepRecord] = []
    predictions = 0
    reuse_count = 0
    velocity_errors: list[float] = []
    for step in range(cfg.steps):
        step_masks: dict[tuple[int, int], BlockMask] = {}
        for layer in range(cfg.layers):
            pooled = {}
            proposals = []
            for head in range(cfg.heads):
                q_mean, k_mean = pipeline.pooled(step, layer, head)
                pooled[head] = (q_mean, k_mean)
                entry = cache.get((layer, head))
                if entry is None:
                    proposals.append((True, None))
                else:
                    drift = mean_pool_drift(entry.q_mean, q_mean, entry.k_mean, k_mean)
                    proposals.append((drift * scale > delta, drift))
            flags = [want for want, _ in proposals]
            if gate is not None:
                flags = layer_gate(flags, gate[0], gate[1])
            for head in range(cfg.heads):
                refresh, drift = flags[head], proposals[head][1]
                entry = cache.get((layer, head))
                if entry is None and not refresh:
                    raise StateError(f"gate forced reuse on cold head ({layer}, {head})")
                if refresh:
                    mask = top_p_select(
                        pipeline.scores(step, layer, head), float(taus[layer, head]), step=step
                    )
                    q_mean, k_mean = pooled[head]
                    cache.store((layer, head), CacheEntry(step, q_mean, k_mean, mask))
                    predictions += 1
                    decision = COLD_START if entry is None else REFRESH
                else:
                    mask = entry.mask
                    reuse_count += 1
                    decision = REUSE
                previous = last_used.get((layer, head))
                changed = (
                    changed_block_ratio(previous.retained, mask.retained)
                    if previous is not None else None
                )
                last_used[(layer, head)] = mask
                step_masks[(layer, head)] = mask
                records.append(StepRecord(
                    step=step, layer=layer, head=head, decision=decision,
                    drift=drift, sparsity=realized_sparsity(mask), changed_ratio=changed,
                ))
        if velocity_error:
            dense = pipeline.dense_forward(step)
            sparse = pipeline.sparse_forward(step, step_masks)
            denom = float(np.linalg.norm(dense))
            err = float(np.linalg.norm(sparse - dense))
            velocity_errors.append(err / denom if denom > 0 else err)
    total = cfg.steps * cfg.layers * cfg.heads
    return RunResult(
        records=records,
        predictions=predictions,
        reuse_rate=reuse_count / total,
        mean_sparsity=float(np.mean([r.sparsity for r in records])),
        mean_velocity_rel_l2=float(np.mean(velocity_errors)) if velocity_errors else math.nan,
        cache=cache,
        taus=taus,
    )

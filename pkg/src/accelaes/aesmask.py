"""Aesthetic focus mask construction from captured cross-attention.

The affinity map sums, per image token, the cross-attention mass landing
on the selected aesthetic prompt tokens, averaged over the chosen layers.
Binarizing that map at a percentile splits tokens into a focus set (kept
at full compute) and a background set (eligible for reuse). The mask is
built once, at a configured denoising step, and reused unchanged for the
rest of the run.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    EmptySelectionError,
    LifecycleError,
    ShapeError,
)


@dataclass(frozen=True)
class CrossAttnRecord:
    """Cross-attention weights of one layer: image tokens x text tokens.

    Rows are expected to be stochastic (each image token's attention over
    text tokens sums to 1).
    """

    layer_id: int
    weights: np.ndarray  # (N, M), nonnegative rows summing to 1


@dataclass(frozen=True)
class AffinityMap:
    """Per-image-token aesthetic attention mass."""

    values: np.ndarray  # (N,)
    n_layers_used: int
    aes_token_count: int


@dataclass(frozen=True)
class AesMask:
    """Binary focus mask over image tokens."""

    bits: np.ndarray             # (N,) uint8, read-only
    focus_indices: tuple[int, ...]
    percentile_p: float          # in (0, 100)
    built_at_step: int = -1

    @property
    def n_tokens(self) -> int:
        return int(self.bits.size)

    @property
    def focus_count(self) -> int:
        return len(self.focus_indices)

    def to_json_dict(self) -> dict:
        return {
            "N": self.n_tokens,
            "p": self.percentile_p,
            "built_at_step": self.built_at_step,
            "focus_indices": list(self.focus_indices),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def _select_records(
    records: list[CrossAttnRecord], layer_set
) -> list[CrossAttnRecord]:
    if not records:
        raise EmptySelectionError("no cross-attention records provided")
    if layer_set is None:
        chosen = list(records)
    else:
        wanted = set(layer_set)
        chosen = [r for r in records if r.layer_id in wanted]
    if not chosen:
        raise EmptySelectionError(f"layer selection {layer_set!r} matched no records")
    n = chosen[0].weights.shape[0]
    for r in chosen:
        if r.weights.ndim != 2 or r.weights.shape[0] != n:
            raise ShapeError(
                f"record for layer {r.layer_id} has {r.weights.shape[0]} image "
                f"tokens, expected {n}"
            )
    return chosen


def aggregate_affinity(
    records: list[CrossAttnRecord],
    selected_tokens,
    layer_set=None,
) -> AffinityMap:
    """Mean over layers of the attention mass on the selected text tokens.

    `layer_set` is None for all layers, otherwise an iterable of layer ids.
    """
    selected = sorted(set(int(j) for j in selected_tokens))
    if not selected:
        raise EmptySelectionError("selected token set is empty; use fallback_affinity")
    chosen = _select_records(records, layer_set)
    m_cols = chosen[0].weights.shape[1]
    if selected[0] < 0 or selected[-1] >= m_cols:
        raise ShapeError(f"selected token index out of range for {m_cols} text tokens")
    acc = np.zeros(chosen[0].weights.shape[0])
    for r in chosen:
        acc += r.weights[:, selected].sum(axis=1)
    return AffinityMap(
        values=acc / len(chosen),
        n_layers_used=len(chosen),
        aes_token_count=len(selected),
    )


def fallback_affinity(
    records: list[CrossAttnRecord],
    layer_set=None,
) -> AffinityMap:
    """Uniform token weighting: mean attention mass per text token.

    Used when no prompt token cleared the anchor threshold. Equals the
    all-token aggregate divided by the text token count, so the result is
    the per-token mean attention and stays on the same scale across
    prompts of different lengths.
    """
    chosen = _select_records(records, layer_set)
    m_cols = chosen[0].weights.shape[1]
    full = aggregate_affinity(chosen, range(m_cols), layer_set=None)
    return AffinityMap(
        values=full.values / m_cols,
        n_layers_used=full.n_layers_used,
        aes_token_count=m_cols,
    )


def binarize(affinity: AffinityMap, skip_ratio: float, *, built_at_step: int = -1) -> AesMask:
    """Percentile-threshold the affinity map into a focus mask.

    The threshold is the value at sorted index floor(N * skip_ratio), so
    with distinct values the lowest floor(N * skip_ratio) tokens become
    background and the rest focus; ties at the threshold are all kept.
    An all-equal map selects every token and emits a warning.
    """
    values = np.asarray(affinity.values, dtype=np.float64)
    n = values.size
    if values.ndim != 1 or n < 2:
        raise ShapeError(f"affinity map must be 1-D with N >= 2, got shape {values.shape}")
    if not (0.0 < skip_ratio < 1.0):
        raise ConfigError(f"skip_ratio must lie in (0, 1), got {skip_ratio}")
    if np.ptp(values) == 0.0:
        warnings.warn("affinity map is constant; selecting every token as focus")
        bits = np.ones(n, dtype=np.uint8)
    else:
        threshold = np.sort(values)[int(n * skip_ratio)]
        bits = (values >= threshold).astype(np.uint8)
        if not bits.any():  # unreachable with the sort-based threshold; kept as a guard
            bits[int(np.argmax(values))] = 1
    bits.setflags(write=False)
    return AesMask(
        bits=bits,
        focus_indices=tuple(int(i) for i in np.flatnonzero(bits)),
        percentile_p=100.0 * skip_ratio,
        built_at_step=built_at_step,
    )


@dataclass
class MaskLifecycle:
    """One-shot mask: build at `mask_step`, reuse unchanged afterwards.

    Before `mask_step` every step returns None and the caller computes
    densely. At `mask_step` the caller must supply cross-attention
    records captured from a dense forward; the mask is built and frozen.
    Later steps return the stored mask object.
    """

    mask_step: int = 5
    skip_ratio: float = 0.5
    layer_set: tuple[int, ...] | None = None
    _mask: AesMask | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mask_step < 0:
            raise ConfigError(f"mask_step must be >= 0, got {self.mask_step}")

    @property
    def current(self) -> AesMask | None:
        return self._mask

    def step(
        self,
        step_index: int,
        records: list[CrossAttnRecord] | None = None,
        selected_tokens=None,
    ) -> AesMask | None:
        """Advance the lifecycle; returns the active mask or None.

        `selected_tokens` is the aesthetic prompt-token index set, or None
        to use the uniform-weighting fallback.
        """
        if step_index < self.mask_step:
            return None
        if self._mask is None:
            if step_index > self.mask_step:
                raise LifecycleError(
                    f"step {step_index} reached without a mask; construction "
                    f"was due at step {self.mask_step}"
                )
            if not records:
                raise LifecycleError(
                    "mask construction step requires cross-attention records "
                    "captured from a dense forward"
                )
            if selected_tokens:
                amap = aggregate_affinity(records, selected_tokens, self.layer_set)
            else:
                amap = fallback_affinity(records, self.layer_set)
            self._mask = binarize(amap, self.skip_ratio, built_at_step=step_index)
        return self._mask

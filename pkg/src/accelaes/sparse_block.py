"""Transformer block with a focus-query sparse path.

The sparse path recomputes attention and FFN only for mask-selected
focus tokens while keys/values stay global, so every focus query still
reads the whole token grid. Background tokens ride through the block on
the residual stream; their FFN contribution is replayed bit-exactly from
the most recent full update. Outputs are scattered back to the original
token order, so dense and sparse modes agree on shape and layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aesmask import AesMask
from .errors import CacheMissError, ConfigError, ShapeError
from .nnops import gelu, layer_norm, softmax_last_axis

DENSE = "dense"
SPARSE = "sparse"


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray  # (d, d)
    w_k: np.ndarray  # (d_kv_in, d)
    w_v: np.ndarray  # (d_kv_in, d)
    w_o: np.ndarray  # (d, d)


@dataclass(frozen=True)
class BlockWeights:
    """All parameters of one block: two attention sublayers plus FFN."""

    heads: int
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    self_attn: AttentionWeights
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    cross_attn: AttentionWeights
    ln3_gain: np.ndarray
    ln3_bias: np.ndarray
    w_ff1: np.ndarray  # (d, d_ff)
    b_ff1: np.ndarray
    w_ff2: np.ndarray  # (d_ff, d)
    b_ff2: np.ndarray

    def __post_init__(self):
        d = self.self_attn.w_q.shape[0]
        if d % self.heads != 0:
            raise ConfigError(f"width {d} not divisible by heads {self.heads}")

    @property
    def width(self) -> int:
        return self.self_attn.w_q.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class TokenPartition:
    """Focus/background index split with exact scatter-back."""

    focus: np.ndarray       # sorted indices
    background: np.ndarray  # sorted complement
    n_tokens: int

    @classmethod
    def from_mask(cls, mask: AesMask) -> "TokenPartition":
        bits = np.asarray(mask.bits, dtype=bool)
        return cls(
            focus=np.flatnonzero(bits),
            background=np.flatnonzero(~bits),
            n_tokens=int(bits.size),
        )

    @classmethod
    def full(cls, n_tokens: int) -> "TokenPartition":
        return cls(
            focus=np.arange(n_tokens),
            background=np.arange(0),
            n_tokens=n_tokens,
        )

    def scatter(self, focus_rows: np.ndarray, background_rows: np.ndarray) -> np.ndarray:
        out = np.empty((self.n_tokens, focus_rows.shape[1]), dtype=np.float64)
        out[self.focus] = focus_rows
        out[self.background] = background_rows
        return out


@dataclass
class FfnCache:
    """Post-FFN sublayer outputs from the most recent full update.

    The full N-row output is kept so the cache stays valid for any
    partition; sparse steps slice out the background rows bit-exactly.
    """

    activations: np.ndarray | None = field(default=None, repr=False)
    last_full_step: int = -1
    valid: bool = False

    def refresh(self, activations: np.ndarray, step: int) -> None:
        self.activations = activations
        self.last_full_step = step
        self.valid = True

    def background_rows(self, partition: TokenPartition) -> np.ndarray:
        if not self.valid:
            raise CacheMissError("FFN cache read before any full update")
        if self.activations.shape[0] != partition.n_tokens:
            raise ShapeError(
                f"cache holds {self.activations.shape[0]} rows, partition expects "
                f"{partition.n_tokens}"
            )
        return self.activations[partition.background]


def multi_head_attention(
    query_rows: np.ndarray,
    kv_rows: np.ndarray,
    weights: AttentionWeights,
    heads: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Attention for the given query rows against global keys/values.

    Returns (output rows, head-averaged attention probabilities). Each
    query row is independent of the others, so computing a subset of
    query rows reproduces exactly those rows of the full computation.
    """
    d = weights.w_q.shape[1]
    d_h = d // heads
    q = query_rows @ weights.w_q
    k = kv_rows @ weights.w_k
    v = kv_rows @ weights.w_v
    r, s = q.shape[0], k.shape[0]
    qh = q.reshape(r, heads, d_h).transpose(1, 0, 2)
    kh = k.reshape(s, heads, d_h).transpose(1, 0, 2)
    vh = v.reshape(s, heads, d_h).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) / math.sqrt(d_h)
    probs = softmax_last_axis(scores)           # (heads, r, s)
    out = (probs @ vh).transpose(1, 0, 2).reshape(r, d) @ weights.w_o
    return out, probs.mean(axis=0)


def sparse_attention(
    hidden: np.ndarray,
    partition: TokenPartition,
    weights: BlockWeights,
) -> np.ndarray:
    """Self-attention with queries restricted to focus tokens.

    Keys and values come from all N tokens; only the focus rows of the
    attention output are produced.
    """
    if partition.focus.size == 0:
        raise ValueError("focus set must be nonempty for sparse attention")
    out, _ = multi_head_attention(
        hidden[partition.focus], hidden, weights.self_attn, weights.heads
    )
    return out


def dense_attention(hidden: np.ndarray, weights: BlockWeights) -> np.ndarray:
    """Self-attention over all tokens."""
    out, _ = multi_head_attention(hidden, hidden, weights.self_attn, weights.heads)
    return out


def ffn(x: np.ndarray, weights: BlockWeights) -> np.ndarray:
    return gelu(x @ weights.w_ff1 + weights.b_ff1) @ weights.w_ff2 + weights.b_ff2


def sparse_ffn(
    hidden: np.ndarray,
    cache: FfnCache,
    weights: BlockWeights,
    partition: TokenPartition,
    *,
    full_update: bool = False,
    step: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """FFN with cached background reuse.

    With `full_update` the input holds all N rows: the FFN runs densely,
    the cache is refreshed, and the (focus, background) split of the
    fresh output is returned. Otherwise the input holds only the focus
    rows; background rows are copied from the cache unchanged.
    """
    if full_update:
        if hidden.shape[0] != partition.n_tokens:
            raise ShapeError(
                f"full update expects all {partition.n_tokens} rows, got {hidden.shape[0]}"
            )
        y = ffn(hidden, weights)
        cache.refresh(y, step)
        return y[partition.focus], y[partition.background]
    if not cache.valid:
        raise CacheMissError("sparse FFN requires a prior full update")
    if hidden.shape[0] != partition.focus.size:
        raise ShapeError(
            f"sparse update expects {partition.focus.size} focus rows, got {hidden.shape[0]}"
        )
    return ffn(hidden, weights), cache.background_rows(partition)


def run_block(
    hidden: np.ndarray,
    text: np.ndarray,
    weights: BlockWeights,
    mode: str = DENSE,
    mask: AesMask | None = None,
    cache: FfnCache | None = None,
    capture_attention: bool = False,
    step: int = 0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """One block forward; returns (hidden out, cross-attention probs or None).

    Dense mode updates every token and refreshes the FFN cache when one
    is supplied. Sparse mode applies attention and FFN deltas to focus
    tokens only; background tokens keep their residual state and receive
    the cached FFN contribution. Output shape and token order match the
    input in both modes.
    """
    if mode == DENSE:
        h = hidden
        a_in = layer_norm(h, weights.ln1_gain, weights.ln1_bias)
        attn_out, _ = multi_head_attention(a_in, a_in, weights.self_attn, weights.heads)
        h = h + attn_out
        c_in = layer_norm(h, weights.ln2_gain, weights.ln2_bias)
        cross_out, cross_probs = multi_head_attention(
            c_in, text, weights.cross_attn, weights.heads
        )
        h = h + cross_out
        f_in = layer_norm(h, weights.ln3_gain, weights.ln3_bias)
        y = ffn(f_in, weights)
        if cache is not None:
            cache.refresh(y, step)
        h = h + y
        return h, (cross_probs if capture_attention else None)

    if mode != SPARSE:
        raise ConfigError(f"unknown block mode {mode!r}")
    if mask is None or cache is None:
        raise ConfigError("sparse mode requires a mask and an FFN cache")
    if capture_attention:
        raise ConfigError("attention capture requires a dense forward")

    part = TokenPartition.from_mask(mask)
    focus = part.focus
    h = hidden.copy()

    a_in = layer_norm(h, weights.ln1_gain, weights.ln1_bias)  # all rows: K/V are global
    attn_focus, _ = multi_head_attention(
        a_in[focus], a_in, weights.self_attn, weights.heads
    )
    h[focus] += attn_focus

    c_in = layer_norm(h, weights.ln2_gain, weights.ln2_bias)
    cross_focus, _ = multi_head_attention(
        c_in[focus], text, weights.cross_attn, weights.heads
    )
    h[focus] += cross_focus

    f_in = layer_norm(h, weights.ln3_gain, weights.ln3_bias)
    focus_y, bg_y = sparse_ffn(f_in[focus], cache, weights, part)
    h[focus] += focus_y
    h[part.background] += bg_y
    return h, None


# Analytic FLOP model. Matrix multiplies dominate at every scale of
# interest, so only they are counted (one multiply-add = 2 FLOPs);
# norms, softmax and activations are excluded consistently from both
# dense and sparse counts.

ATTENTION_TERMS = frozenset({
    "self_q_proj", "self_kv_proj", "self_scores", "self_values", "self_out_proj",
    "cross_q_proj", "cross_kv_proj", "cross_scores", "cross_values", "cross_out_proj",
})
FFN_TERMS = frozenset({"ffn_in", "ffn_out"})


def block_flop_terms(
    n_tokens: int,
    n_focus: int,
    d: int,
    d_h: int,
    mode: str,
    *,
    d_ff: int | None = None,
    d_c: int | None = None,
    m_text: int = 0,
) -> dict[str, int]:
    """Per-term FLOP counts for one block forward.

    Query-side terms scale with the focus count in sparse mode; key/value
    projections always scale with the full token count (keys and values
    stay global).
    """
    if n_focus > n_tokens:
        raise ConfigError(f"focus {n_focus} exceeds token count {n_tokens}")
    if d % d_h != 0:
        raise ConfigError(f"width {d} not divisible by head width {d_h}")
    if mode not in (DENSE, SPARSE):
        raise ConfigError(f"unknown mode {mode!r}")
    d_ff = 4 * d if d_ff is None else d_ff
    d_c = d if d_c is None else d_c
    f = n_focus if mode == SPARSE else n_tokens
    terms = {
        "self_q_proj": 2 * f * d * d,
        "self_kv_proj": 2 * 2 * n_tokens * d * d,
        "self_scores": 2 * f * n_tokens * d,
        "self_values": 2 * f * n_tokens * d,
        "self_out_proj": 2 * f * d * d,
        "ffn_in": 2 * f * d * d_ff,
        "ffn_out": 2 * f * d_ff * d,
    }
    if m_text > 0:
        terms.update({
            "cross_q_proj": 2 * f * d * d,
            "cross_kv_proj": 2 * 2 * m_text * d_c * d,
            "cross_scores": 2 * f * m_text * d,
            "cross_values": 2 * f * m_text * d,
            "cross_out_proj": 2 * f * d * d,
        })
    return terms


def block_flops(
    n_tokens: int,
    n_focus: int,
    d: int,
    d_h: int,
    mode: str,
    *,
    d_ff: int | None = None,
    d_c: int | None = None,
    m_text: int = 0,
) -> int:
    return sum(
        block_flop_terms(
            n_tokens, n_focus, d, d_h, mode, d_ff=d_ff, d_c=d_c, m_text=m_text
        ).values()
    )

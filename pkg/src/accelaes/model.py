"""Deterministic desk-scale diffusion transformer.

A small stack of self-attention + cross-attention + FFN blocks over a
token grid, with seeded synthetic weights. It exists to exercise the
acceleration stack under exact oracles: every output bit is a pure
function of (spec, inputs), there is no training and no checkpoint
loading. The forward pass can optionally capture head-averaged
cross-attention weights for mask construction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .aesmask import AesMask, CrossAttnRecord
from .affinity import PromptTokens
from .errors import ConfigError, ShapeError
from .nnops import layer_norm
from .sparse_block import (
    DENSE,
    AttentionWeights,
    BlockWeights,
    FfnCache,
    run_block,
)

LATENT_MAGIC = b"ALAT"


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 4
    d: int = 64
    d_c: int = 32
    heads: int = 4
    grid_h: int = 8
    grid_w: int = 8
    seed: int = 0
    d_ff: int | None = None  # defaults to 4 * d

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by heads {self.heads}")
        if min(self.depth, self.d, self.d_c, self.heads, self.grid_h, self.grid_w) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d)

    @property
    def d_h(self) -> int:
        return self.d // self.heads

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def to_json_dict(self) -> dict:
        return {
            "depth": self.depth, "d": self.d, "d_c": self.d_c, "heads": self.heads,
            "grid_h": self.grid_h, "grid_w": self.grid_w, "seed": self.seed,
            "d_ff": self.d_ff,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelSpec":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_json_dict(json.loads(text))


@dataclass
class LatentTokens:
    """Spatial token matrix, one token per row, laid out on an h x w grid."""

    values: np.ndarray  # (N, d)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"latent values {self.values.shape} do not match grid "
                f"{self.grid_h}x{self.grid_w}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent tokens must be finite")

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid_h, self.grid_w, self.width)


@dataclass
class TextCondition:
    """Conditioning token embeddings, plus the source tokens when known."""

    embeddings: np.ndarray  # (M, d_c)
    tokens: PromptTokens | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError("text condition needs at least one embedding row")

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]


def _init_attention(rng, d_q_in: int, d_kv_in: int, d: int) -> AttentionWeights:
    return AttentionWeights(
        w_q=rng.standard_normal((d_q_in, d)) / math.sqrt(d_q_in),
        w_k=rng.standard_normal((d_kv_in, d)) / math.sqrt(d_kv_in),
        w_v=rng.standard_normal((d_kv_in, d)) / math.sqrt(d_kv_in),
        w_o=rng.standard_normal((d, d)) / math.sqrt(d),
    )


def _init_block(rng, spec: ModelSpec) -> BlockWeights:
    d, d_c, d_ff = spec.d, spec.d_c, spec.d_ff

    def ln_pair():
        return 1.0 + 0.02 * rng.standard_normal(d), 0.02 * rng.standard_normal(d)

    ln1_g, ln1_b = ln_pair()
    self_attn = _init_attention(rng, d, d, d)
    ln2_g, ln2_b = ln_pair()
    cross_attn = _init_attention(rng, d, d_c, d)
    ln3_g, ln3_b = ln_pair()
    return BlockWeights(
        heads=spec.heads,
        ln1_gain=ln1_g, ln1_bias=ln1_b, self_attn=self_attn,
        ln2_gain=ln2_g, ln2_bias=ln2_b, cross_attn=cross_attn,
        ln3_gain=ln3_g, ln3_bias=ln3_b,
        w_ff1=rng.standard_normal((d, d_ff)) / math.sqrt(d),
        b_ff1=0.01 * rng.standard_normal(d_ff),
        w_ff2=rng.standard_normal((d_ff, d)) / math.sqrt(d_ff),
        b_ff2=0.01 * rng.standard_normal(d),
    )


class ToyDit:
    """Denoiser with seeded weights and optional attention capture."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        self.blocks = [_init_block(rng, spec) for _ in range(spec.depth)]
        d = spec.d
        self.head_ln_gain = 1.0 + 0.02 * rng.standard_normal(d)
        self.head_ln_bias = 0.02 * rng.standard_normal(d)
        self.w_head = rng.standard_normal((d, d)) / math.sqrt(d)
        self.b_head = 0.01 * rng.standard_normal(d)
        null = rng.standard_normal((1, spec.d_c))
        self._null_cond = null / np.linalg.norm(null)

    def null_condition(self) -> TextCondition:
        return TextCondition(embeddings=self._null_cond.copy(), tokens=None)

    def time_embedding(self, t: float) -> np.ndarray:
        """Sinusoidal features of the (continuous) sampling time."""
        d = self.spec.d
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = 1000.0 * t * freqs
        emb = np.concatenate([np.sin(ang), np.cos(ang)])
        if emb.size < d:  # odd width: pad with a zero
            emb = np.concatenate([emb, np.zeros(d - emb.size)])
        return emb

    def forward(
        self,
        latent: LatentTokens,
        cond: TextCondition,
        t: float,
        mode: str = DENSE,
        mask: AesMask | None = None,
        caches: list[FfnCache] | None = None,
        capture_attention: bool = False,
        step: int = 0,
    ) -> tuple[np.ndarray, list[CrossAttnRecord] | None]:
        """Predict per-token velocity; optionally capture cross-attention.

        Sparse mode requires a mask and per-block FFN caches. Captured
        records are head-averaged, one per block, rows summing to 1.
        """
        spec = self.spec
        if latent.width != spec.d or latent.n_tokens != spec.n_tokens:
            raise ShapeError(
                f"latent {latent.values.shape} does not match model "
                f"(N={spec.n_tokens}, d={spec.d})"
            )
        if cond.embeddings.shape[1] != spec.d_c:
            raise ShapeError(
                f"condition width {cond.embeddings.shape[1]} != model d_c {spec.d_c}"
            )
        if mode != DENSE and (mask is None or caches is None):
            raise ConfigError("sparse forward requires a mask and FFN caches")
        if caches is not None and len(caches) != spec.depth:
            raise ConfigError(f"expected {spec.depth} FFN caches, got {len(caches)}")

        h = latent.values + self.time_embedding(t)
        records: list[CrossAttnRecord] | None = [] if capture_attention else None
        for i, weights in enumerate(self.blocks):
            cache = caches[i] if caches is not None else None
            h, probs = run_block(
                h, cond.embeddings, weights,
                mode=mode, mask=mask, cache=cache,
                capture_attention=capture_attention, step=step,
            )
            if capture_attention:
                records.append(CrossAttnRecord(layer_id=i, weights=probs))
        out = layer_norm(h, self.head_ln_gain, self.head_ln_bias) @ self.w_head + self.b_head
        return out, records


def build_model(spec: ModelSpec) -> ToyDit:
    return ToyDit(spec)


def edge_density(grid, threshold: float = 0.5) -> float:
    """Fraction of interior grid cells with gradient magnitude > threshold.

    Gradients are central differences over the two spatial axes; the
    per-channel magnitudes are averaged into one value per cell. Accepts
    a LatentTokens (reshaped onto its grid) or an (h, w[, c]) array.
    Patterns alternating with period 2 alias to zero under central
    differences since both 2-apart neighbors coincide.
    """
    if isinstance(grid, LatentTokens):
        arr = grid.as_grid()
    else:
        arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ShapeError(f"edge density needs an h x w grid with h, w >= 3, got {arr.shape}")
    gx = (arr[1:-1, 2:, :] - arr[1:-1, :-2, :]) / 2.0
    gy = (arr[2:, 1:-1, :] - arr[:-2, 1:-1, :]) / 2.0
    mag = np.sqrt(gx * gx + gy * gy).mean(axis=2)
    return float(np.mean(mag > threshold))


def save_latent(path, latent: LatentTokens) -> None:
    """Binary latent dump: 16-byte header then row-major float64 data.

    Header: magic "ALAT", then d, h, w as little-endian uint32. Data is
    the (N, d) token matrix, token-major, little-endian float64.
    """
    header = struct.pack(
        "<4sIII", LATENT_MAGIC, latent.width, latent.grid_h, latent.grid_w
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(latent.values.astype("<f8").tobytes())


def load_latent(path) -> LatentTokens:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ShapeError("latent file shorter than its 16-byte header")
        magic, d, h, w = struct.unpack("<4sIII", header)
        if magic != LATENT_MAGIC:
            raise ShapeError(f"bad latent magic {magic!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w * d:
        raise ShapeError(
            f"latent payload has {data.size} values, header implies {h * w * d}"
        )
    return LatentTokens(values=data.reshape(h * w, d).copy(), grid_h=h, grid_w=w)

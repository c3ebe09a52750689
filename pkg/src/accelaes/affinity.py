"""Prompt-token scoring against the aesthetic anchor vocabulary.

Each prompt token gets an affinity score: the maximum cosine similarity
between its embedding and any anchor descriptor. Tokens whose score
clears the similarity threshold form the selected index set that drives
cross-attention aggregation downstream. When nothing clears the
threshold the run is "not triggered" and mask construction falls back
to uniform token weighting.

Multi-word anchors ("highly detailed", "depth of field") are stored as
single table entries keyed by the full phrase. Prompt text is tokenized
by whitespace splitting, lowercasing and punctuation stripping, and
phrases are matched by sliding windows of 2 or 3 consecutive prompt
words whose space-joined form is present in the table; a window match
raises the score of every token inside the window.
"""

from __future__ import annotations

import hashlib
import string
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, TableFormatError

# Fixed 34-entry anchor vocabulary, grouped by what the descriptor conveys.
ANCHOR_CATEGORIES: dict[str, tuple[str, ...]] = {
    "style_rendering_quality": (
        "photorealistic", "realistic", "cinematic", "highly detailed",
        "artistic", "masterpiece", "professional photography", "soft bokeh",
        "bokeh", "dramatic lighting", "fantasy art", "studio lighting",
    ),
    "detail_sharpness": ("detailed", "intricate", "sharp focus", "sharp"),
    "aesthetic_judgment": ("stunning", "beautiful", "elegant", "vivid", "vibrant"),
    "photography_composition": (
        "depth of field", "volumetric lighting", "close up", "portrait", "full body",
    ),
    "subject_emphasis": ("main subject", "foreground", "focused"),
    "content_fallback": ("subject", "character", "object", "figure", "person"),
}

ANCHOR_WORDS: tuple[str, ...] = tuple(
    a for group in ANCHOR_CATEGORIES.values() for a in group
)
assert len(ANCHOR_WORDS) == 34

DEFAULT_SIM_THRESHOLD = 0.60

_WINDOW_SIZES = (2, 3)


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchor descriptor list."""

    anchors: tuple[str, ...] = ANCHOR_WORDS

    def __post_init__(self):
        if not self.anchors:
            raise ConfigError("anchor set must be nonempty")

    @property
    def size(self) -> int:
        return len(self.anchors)


@dataclass(frozen=True)
class PromptTokens:
    """Tokenized prompt; at least one token."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ConfigError("prompt produced no tokens")

    @property
    def count(self) -> int:
        return len(self.tokens)


@dataclass
class EmbeddingTable:
    """Token string to fixed-width float64 vector."""

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def lookup(self, token: str) -> np.ndarray:
        return self.entries[token]


@dataclass(frozen=True)
class TokenAffinity:
    """Per-token anchor affinity and the resulting selection."""

    scores: np.ndarray          # shape (M,), values in [-1, 1]
    selected: tuple[int, ...]   # sorted token indices with score >= threshold
    triggered: bool             # True iff selection is nonempty
    missing_tokens: tuple[str, ...] = ()
    missing_anchors: tuple[str, ...] = ()


def tokenize_prompt(text: str) -> PromptTokens:
    """Whitespace split, lowercase, strip surrounding punctuation."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            tokens.append(tok)
    return PromptTokens(tuple(tokens))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DegenerateInputError(f"vector shapes differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def synthetic_embedding(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm vector derived from a hash of the token.

    The same (token, dim, seed) always yields the same vector, on any
    platform; the construction never produces a zero vector.
    """
    if dim < 2:
        raise ConfigError(f"embedding dim must be >= 2, got {dim}")
    digest = hashlib.sha256(f"{seed}|{dim}|{token}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def window_phrases(tokens: tuple[str, ...] | list[str]) -> list[str]:
    """All 2- and 3-word space-joined windows of the token list."""
    phrases = []
    for n in _WINDOW_SIZES:
        for j in range(len(tokens) - n + 1):
            phrases.append(" ".join(tokens[j:j + n]))
    return phrases


def build_synthetic_table(texts, dim: int, seed: int) -> EmbeddingTable:
    """Embedding table over the given strings using synthetic vectors."""
    table = EmbeddingTable(dim=dim)
    for t in texts:
        if t not in table.entries:
            table.entries[t] = synthetic_embedding(t, dim, seed)
    return table


def load_embedding_table(path) -> EmbeddingTable:
    """Load a text embedding table: one `token<TAB>v1 v2 ... vD` per line.

    Lines starting with `#` are comments. The first data line fixes the
    vector width; duplicated tokens keep the last entry and emit a warning.
    """
    dim = None
    entries: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "\t" not in stripped:
                raise TableFormatError("missing tab separator", line_no)
            token, _, rest = stripped.partition("\t")
            token = token.strip()
            if not token:
                raise TableFormatError("empty token field", line_no)
            try:
                vec = np.array([float(x) for x in rest.split()], dtype=np.float64)
            except ValueError as exc:
                raise TableFormatError(f"bad vector component: {exc}", line_no) from None
            if vec.size == 0:
                raise TableFormatError("empty vector", line_no)
            if dim is None:
                dim = int(vec.size)
            elif vec.size != dim:
                raise TableFormatError(
                    f"vector length {vec.size} differs from table dim {dim}", line_no
                )
            if token in entries:
                warnings.warn(f"duplicate token {token!r}; keeping the last entry")
            entries[token] = vec
    if dim is None:
        raise TableFormatError("table contains no data lines")
    return EmbeddingTable(dim=dim, entries=entries)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm embedding vector in table")
    return vectors / norms[:, None]


def token_anchor_scores(
    prompt: PromptTokens,
    anchors: AnchorSet,
    table: EmbeddingTable,
) -> tuple[np.ndarray, tuple[str, ...], tuple[str, ...]]:
    """Full token-by-anchor cosine score matrix, window matches folded in.

    Returns (scores M x K, missing prompt tokens, missing anchors).
    A missing token scores -1 against every anchor; a missing anchor
    scores -1 against every token. Window matches update the rows of
    every token inside the matched window via elementwise max.
    """
    m, k = prompt.count, anchors.size
    scores = np.full((m, k), -1.0)

    missing_anchors = tuple(a for a in anchors.anchors if a not in table)
    anchor_idx = [i for i, a in enumerate(anchors.anchors) if a in table]
    if anchor_idx:
        anchor_mat = _unit_rows(
            np.stack([table.lookup(anchors.anchors[i]) for i in anchor_idx])
        )
    else:
        anchor_mat = None

    missing = []
    for j, tok in enumerate(prompt.tokens):
        if tok not in table:
            missing.append(tok)
            continue
        if anchor_mat is None:
            continue
        v = table.lookup(tok)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise DegenerateInputError(f"zero-norm embedding for token {tok!r}")
        scores[j, anchor_idx] = anchor_mat @ (v / nv)

    # Phrase windows: a table hit for the joined window lifts the scores
    # of every member token.
    if anchor_mat is not None:
        for n in _WINDOW_SIZES:
            for j in range(m - n + 1):
                phrase = " ".join(prompt.tokens[j:j + n])
                if phrase not in table:
                    continue
                v = table.lookup(phrase)
                nv = np.linalg.norm(v)
                if nv == 0.0:
                    raise DegenerateInputError(f"zero-norm embedding for phrase {phrase!r}")
                sims = anchor_mat @ (v / nv)
                for jj in range(j, j + n):
                    np.maximum(scores[jj, anchor_idx], sims, out=scores[jj, anchor_idx])

    np.clip(scores, -1.0, 1.0, out=scores)
    return scores, tuple(missing), missing_anchors


def score_tokens(
    prompt: PromptTokens,
    anchors: AnchorSet,
    table: EmbeddingTable,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    top_r: int | None = None,
) -> TokenAffinity:
    """Score each prompt token by its best anchor similarity and select.

    The candidate set is every token scoring at least `sim_threshold`;
    when `top_r` is given only the r best candidates are kept, ties
    resolved toward the lower token index. `triggered` is True iff the
    final selection is nonempty.
    """
    if top_r is not None and top_r < 1:
        raise ConfigError(f"top_r must be >= 1 when given, got {top_r}")
    matrix, missing_tokens, missing_anchors = token_anchor_scores(prompt, anchors, table)
    alpha = matrix.max(axis=1)
    candidates = [j for j in range(prompt.count) if alpha[j] >= sim_threshold]
    if top_r is not None and len(candidates) > top_r:
        candidates.sort(key=lambda j: (-alpha[j], j))
        candidates = sorted(candidates[:top_r])
    return TokenAffinity(
        scores=alpha,
        selected=tuple(candidates),
        triggered=bool(candidates),
        missing_tokens=missing_tokens,
        missing_anchors=missing_anchors,
    )


def matched_anchors(
    prompt: PromptTokens,
    anchors: AnchorSet,
    table: EmbeddingTable,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> tuple[str, ...]:
    """Anchors whose best similarity over all tokens clears the threshold."""
    matrix, _, _ = token_anchor_scores(prompt, anchors, table)
    best_per_anchor = matrix.max(axis=0)
    return tuple(
        a for i, a in enumerate(anchors.anchors) if best_per_anchor[i] >= sim_threshold
    )

"""Asymmetric tokenization of local grids, global grids, and index series.

Each input source is cut into tokens at its own granularity, projected to a
shared embedding dimension by a source-specific linear map, and concatenated
behind a classification token. Token enumeration is row-major over the token
grid everywhere, so attention indices are reproducible.

A spatial token spans all channels of one patch: its vector is the patch
contents flattened channel-major, then row, then column. The leading extent
of a patch size triple is a reserved temporal extent and must be 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, matmul, reshape

Array = np.ndarray

SOURCES = ("local", "indices", "global")

# Active sources per model variant, in the fixed sequence order after cls.
VARIANT_SOURCES: dict[str, tuple[str, ...]] = {
    "local_only": ("local",),
    "with_indices": ("local", "indices"),
    "with_global": ("local", "global"),
    "with_indices_and_global": ("local", "indices", "global"),
}


@dataclass(frozen=True)
class TokenizationSpec:
    """Token sizes for the three sources plus the shared embedding width.

    ``local_patch`` and ``global_patch`` are (t, h, w) triples; the leading
    temporal extent is reserved and must be 1. ``index_token`` is the scalar
    token size for index series (one value per token).
    """

    local_patch: tuple[int, int, int] = (1, 16, 16)
    global_patch: tuple[int, int, int] = (1, 30, 30)
    index_token: int = 1
    embed_dim: int = 768

    def __post_init__(self):
        for name, patch in (("local_patch", self.local_patch), ("global_patch", self.global_patch)):
            if len(patch) != 3 or any(p < 1 for p in patch):
                raise ConfigError(f"{name} must be three positive integers, got {patch}")
            if patch[0] != 1:
                raise ConfigError(f"{name} temporal extent must be 1, got {patch[0]}")
        if self.index_token != 1:
            raise ConfigError(f"index_token must be 1, got {self.index_token}")
        if self.embed_dim <= 0:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")


@dataclass
class TokenSet:
    """Tokens from one source, with their grid layout.

    ``tokens`` has shape (n_tokens, token_dim); ``grid_shape`` is the
    (rows, cols) layout the tokens were enumerated over (for index series:
    (n_indices, n_timesteps)). Enumeration is row-major.
    """

    source: str
    tokens: Array
    grid_shape: tuple[int, int]
    patch_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown token source {self.source!r}")
        rows, cols = self.grid_shape
        if self.tokens.shape[0] != rows * cols:
            raise ShapeError(
                f"{self.source}: {self.tokens.shape[0]} tokens do not tile grid {self.grid_shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class EmbeddedSequence:
    """The embedded token sequence fed to the encoder.

    Position 0 is always the classification token; the remaining positions
    are the active sources in the fixed order local, indices, global.
    ``segment_map`` tags every position; ``spans`` gives [start, end) per
    segment; ``table_id`` names the positional table that was added.
    """

    embeddings: Tensor
    segment_map: list[str]
    spans: dict[str, tuple[int, int]]
    table_id: str

    def __post_init__(self):
        if len(self.segment_map) != self.embeddings.shape[0]:
            raise ShapeError("segment_map length does not match sequence length")
        if self.segment_map[0] != "cls":
            raise ShapeError("sequence position 0 must be the cls token")

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def _tokenize_grid(x: Array, patch: tuple[int, int, int], source: str) -> TokenSet:
    if x.ndim != 3:
        raise ShapeError(f"{source} input must be (channels, height, width), got {x.shape}")
    c, h, w = x.shape
    _, ph, pw = patch
    if h % ph != 0:
        raise ShapeError(f"{source}: height {h} not divisible by patch height {ph}")
    if w % pw != 0:
        raise ShapeError(f"{source}: width {w} not divisible by patch width {pw}")
    rows, cols = h // ph, w // pw
    tokens = (
        x.reshape(c, rows, ph, cols, pw)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c * ph * pw)
    )
    return TokenSet(source=source, tokens=tokens, grid_shape=(rows, cols), patch_shape=(c, ph, pw))


def tokenize_local(x_l: Array, spec: TokenizationSpec) -> TokenSet:
    """Cut a (C, H, W) local input into non-overlapping spatial tokens."""
    return _tokenize_grid(np.asarray(x_l), spec.local_patch, "local")


def tokenize_global(x_g: Array, spec: TokenizationSpec) -> TokenSet:
    """Cut a (C, H, W) coarse global input into spatial tokens."""
    return _tokenize_grid(np.asarray(x_g), spec.global_patch, "global")


def tokenize_indices(x_i: Array) -> TokenSet:
    """One scalar token per (index, timestep) element, index-major."""
    x_i = np.asarray(x_i)
    if x_i.ndim != 2 or x_i.size == 0:
        raise ShapeError(f"index input must be a non-empty (n_indices, n_timesteps) array, got {x_i.shape}")
    n_idx, n_t = x_i.shape
    return TokenSet(
        source="indices",
        tokens=x_i.reshape(n_idx * n_t, 1),
        grid_shape=(n_idx, n_t),
        patch_shape=(1,),
    )


def detokenize(token_set: TokenSet) -> Array:
    """Invert tokenization, reproducing the original input bit for bit."""
    rows, cols = token_set.grid_shape
    if token_set.source == "indices":
        return token_set.tokens.reshape(rows, cols)
    c, ph, pw = token_set.patch_shape
    return (
        token_set.tokens.reshape(rows, cols, c, ph, pw)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, rows * ph, cols * pw)
    )


def sequence_layout(token_counts: dict[str, int], variant: str) -> tuple[list[str], dict[str, tuple[int, int]]]:
    """Segment map and spans for a variant, given token counts per source."""
    if variant not in VARIANT_SOURCES:
        raise ConfigError(f"unknown variant {variant!r}")
    segment_map = ["cls"]
    spans = {"cls": (0, 1)}
    pos = 1
    for source in VARIANT_SOURCES[variant]:
        n = token_counts[source]
        segment_map.extend([source] * n)
        spans[source] = (pos, pos + n)
        pos += n
    return segment_map, spans


def embed_sequence(
    token_sets: Sequence[TokenSet],
    params,
    variant: Optional[str] = None,
) -> EmbeddedSequence:
    """Project token sets to the embedding dimension and assemble the sequence.

    ``params`` supplies, per source, a (token_dim, D) weight and (D,) bias,
    plus the cls vector and the positional table covering the full sequence
    (cls included). The sequence order is fixed: cls, local, indices, global.
    """
    variant = variant or params.config.variant
    sources = VARIANT_SOURCES.get(variant)
    if sources is None:
        raise ConfigError(f"unknown variant {variant!r}")
    by_source = {ts.source: ts for ts in token_sets}
    missing = [s for s in sources if s not in by_source]
    if missing:
        raise ConfigError(f"variant {variant!r} requires token sets for {missing}")

    d = params.config.embed_dim
    pieces = [reshape(params.cls_token, (1, d))]
    counts: dict[str, int] = {}
    for source in sources:
        ts = by_source[source]
        weight, bias = params.projections[source]
        if weight.shape[0] != ts.token_dim:
            raise ConfigError(
                f"{source} token_dim {ts.token_dim} does not match projection input {weight.shape[0]}"
            )
        pieces.append(matmul(Tensor(ts.tokens), weight) + bias)
        counts[source] = ts.n_tokens

    embeddings = concat(pieces, axis=0)
    if params.pos_table.shape != embeddings.shape:
        raise ConfigError(
            f"positional table shape {params.pos_table.shape} does not match "
            f"sequence shape {embeddings.shape}"
        )
    embeddings = embeddings + params.pos_table
    segment_map, spans = sequence_layout(counts, variant)
    return EmbeddedSequence(
        embeddings=embeddings,
        segment_map=segment_map,
        spans=spans,
        table_id=variant,
    )

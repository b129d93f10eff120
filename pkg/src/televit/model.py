"""Encoder-decoder over the embedded multi-source token sequence.

The encoder is a stack of pre-norm transformer blocks (layer norm, then
multi-head self-attention, then residual; layer norm, then a GELU MLP, then
residual). A single affine decoder maps the encoded classification token to
two logits per output pixel; class 1 is "burned".

Four variants share the architecture and differ only in which sources feed
the sequence: local patches always, index series and/or the coarse global
grid depending on the variant.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    softmax,
    tile_leading,
    transpose,
)
from .tokenization import (
    VARIANT_SOURCES,
    EmbeddedSequence,
    TokenizationSpec,
    embed_sequence,
    sequence_layout,
    tokenize_global,
    tokenize_indices,
    tokenize_local,
)

Array = np.ndarray

CHECKPOINT_FORMAT = "televit-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to instantiate the model deterministically.

    ``depth`` is the number of encoder blocks, ``n_heads`` the attention
    heads per block; the embedding width lives on the tokenization spec.
    Input shapes are fixed per config so positional tables and projection
    widths are known at construction time.
    """

    variant: str = "with_indices_and_global"
    spec: TokenizationSpec = field(default_factory=TokenizationSpec)
    depth: int = 8
    n_heads: int = 12
    mlp_ratio: float = 4.0
    local_shape: tuple[int, int, int] = (14, 80, 80)
    global_shape: tuple[int, int, int] = (14, 180, 360)
    index_shape: tuple[int, int] = (10, 10)
    out_h: int = 80
    out_w: int = 80
    n_classes: int = 2
    layer_norm_eps: float = 1e-5
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANT_SOURCES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.depth < 1 or self.n_heads < 1:
            raise ConfigError("depth and n_heads must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for source in self.sources:
            self.token_grid(source)  # raises on non-divisible shapes

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def sources(self) -> tuple[str, ...]:
        return VARIANT_SOURCES[self.variant]

    def token_grid(self, source: str) -> tuple[int, int]:
        if source == "local":
            c, h, w = self.local_shape
            _, ph, pw = self.spec.local_patch
        elif source == "global":
            c, h, w = self.global_shape
            _, ph, pw = self.spec.global_patch
        elif source == "indices":
            return self.index_shape
        else:
            raise ConfigError(f"unknown source {source!r}")
        if h % ph != 0 or w % pw != 0:
            raise ConfigError(
                f"{source} input {h}x{w} not divisible by patch {ph}x{pw}"
            )
        return (h // ph, w // pw)

    def token_count(self, source: str) -> int:
        rows, cols = self.token_grid(source)
        return rows * cols

    def token_dim(self, source: str) -> int:
        if source == "local":
            c = self.local_shape[0]
            _, ph, pw = self.spec.local_patch
            return c * ph * pw
        if source == "global":
            c = self.global_shape[0]
            _, ph, pw = self.spec.global_patch
            return c * ph * pw
        if source == "indices":
            return 1
        raise ConfigError(f"unknown source {source!r}")

    @property
    def sequence_length(self) -> int:
        return 1 + sum(self.token_count(s) for s in self.sources)

    @classmethod
    def paper_scale(cls, variant: str = "with_indices_and_global", **overrides) -> "ModelConfig":
        """Full-size preset: D=768, 8 blocks, 12 heads, world-sized inputs."""
        base = dict(
            variant=variant,
            spec=TokenizationSpec(local_patch=(1, 16, 16), global_patch=(1, 30, 30), embed_dim=768),
            depth=8,
            n_heads=12,
            local_shape=(14, 80, 80),
            global_shape=(14, 180, 360),
            index_shape=(10, 10),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_scale(cls, variant: str = "with_indices_and_global", **overrides) -> "ModelConfig":
        """Small preset for laptop-speed experiments: D=64, 2 blocks, 4 heads."""
        base = dict(
            variant=variant,
            spec=TokenizationSpec(local_patch=(1, 16, 16), global_patch=(1, 10, 10), embed_dim=64),
            depth=2,
            n_heads=4,
            local_shape=(14, 80, 80),
            global_shape=(14, 20, 40),
            index_shape=(10, 10),
        )
        base.update(overrides)
        return cls(**base)


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> ModelConfig:
    payload = dict(payload)
    spec = payload.pop("spec")
    spec = TokenizationSpec(
        local_patch=tuple(spec["local_patch"]),
        global_patch=tuple(spec["global_patch"]),
        index_token=spec["index_token"],
        embed_dim=spec["embed_dim"],
    )
    for key in ("local_shape", "global_shape", "index_shape"):
        payload[key] = tuple(payload[key])
    return ModelConfig(spec=spec, **payload)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; asserted against instantiated models."""
    d = config.embed_dim
    hidden = int(config.mlp_ratio * d)
    total = 0
    for source in config.sources:
        total += config.token_dim(source) * d + d  # projection weight + bias
    total += d  # cls token
    total += config.sequence_length * d  # positional table
    per_block = (
        2 * d  # ln1 gamma/beta
        + d * 3 * d + 3 * d  # qkv
        + d * d + d  # attention output
        + 2 * d  # ln2
        + d * hidden + hidden  # mlp in
        + hidden * d + d  # mlp out
    )
    total += config.depth * per_block
    out_dim = config.n_classes * config.out_h * config.out_w
    total += d * out_dim + out_dim  # decoder
    return total


@dataclass
class EncoderBlock:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp1_weight: Tensor
    mlp1_bias: Tensor
    mlp2_weight: Tensor
    mlp2_bias: Tensor


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Array:
    """Normal(0, std) truncated to two standard deviations, by resampling."""
    x = rng.standard_normal(shape)
    mask = np.abs(x) > 2.0
    while mask.any():
        x[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(x) > 2.0
    return x * std


class TeleViTModel:
    """Parameter container plus forward passes for one variant.

    Parameters are float64 leaf tensors; ``named_parameters`` fixes the
    canonical ordering used by checkpoints: per-source projections, cls,
    positional table, encoder blocks in order, then the decoder.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        d = config.embed_dim

        def param(shape, std=0.02):
            return Tensor(_trunc_normal(rng, shape, std), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        # Fan-in scaled init for the source projections: a flat std would let
        # wide local tokens (thousands of values) dwarf scalar index tokens
        # in embedding norm, starving the index pathway of gradient.
        self.projections: dict[str, tuple[Tensor, Tensor]] = {}
        for source in config.sources:
            fan_in = config.token_dim(source)
            self.projections[source] = (
                param((fan_in, d), std=1.0 / np.sqrt(fan_in)),
                zeros((d,)),
            )
        self.cls_token = param((d,))
        self.pos_table = param((config.sequence_length, d))

        hidden = int(config.mlp_ratio * d)
        self.blocks: list[EncoderBlock] = []
        for _ in range(config.depth):
            self.blocks.append(
                EncoderBlock(
                    ln1_gamma=ones((d,)),
                    ln1_beta=zeros((d,)),
                    qkv_weight=param((d, 3 * d)),
                    qkv_bias=zeros((3 * d,)),
                    out_weight=param((d, d)),
                    out_bias=zeros((d,)),
                    ln2_gamma=ones((d,)),
                    ln2_beta=zeros((d,)),
                    mlp1_weight=param((d, hidden)),
                    mlp1_bias=zeros((hidden,)),
                    mlp2_weight=param((hidden, d)),
                    mlp2_bias=zeros((d,)),
                )
            )
        out_dim = config.n_classes * config.out_h * config.out_w
        self.decoder_weight = param((d, out_dim))
        self.decoder_bias = zeros((out_dim,))

    # ------------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for source in self.config.sources:
            weight, bias = self.projections[source]
            named.append((f"proj.{source}.weight", weight))
            named.append((f"proj.{source}.bias", bias))
        named.append(("cls_token", self.cls_token))
        named.append(("pos_table", self.pos_table))
        for i, blk in enumerate(self.blocks):
            prefix = f"block{i}"
            named.extend(
                [
                    (f"{prefix}.ln1.gamma", blk.ln1_gamma),
                    (f"{prefix}.ln1.beta", blk.ln1_beta),
                    (f"{prefix}.qkv.weight", blk.qkv_weight),
                    (f"{prefix}.qkv.bias", blk.qkv_bias),
                    (f"{prefix}.attn_out.weight", blk.out_weight),
                    (f"{prefix}.attn_out.bias", blk.out_bias),
                    (f"{prefix}.ln2.gamma", blk.ln2_gamma),
                    (f"{prefix}.ln2.beta", blk.ln2_beta),
                    (f"{prefix}.mlp1.weight", blk.mlp1_weight),
                    (f"{prefix}.mlp1.bias", blk.mlp1_bias),
                    (f"{prefix}.mlp2.weight", blk.mlp2_weight),
                    (f"{prefix}.mlp2.bias", blk.mlp2_bias),
                ]
            )
        named.append(("decoder.weight", self.decoder_weight))
        named.append(("decoder.bias", self.decoder_bias))
        return named

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    @property
    def sequence_length(self) -> int:
        return self.config.sequence_length

    # ------------------------------------------------------------------
    def _sample_tokens(self, sample) -> dict[str, Array]:
        """Tokenize one sample's arrays for the active sources."""
        cfg = self.config
        tokens: dict[str, Array] = {}
        for source in cfg.sources:
            if source == "local":
                if sample.x_l is None:
                    raise DataError(f"variant {cfg.variant!r} requires x_l")
                tokens["local"] = tokenize_local(sample.x_l, cfg.spec).tokens
            elif source == "indices":
                if sample.x_i is None:
                    raise DataError(f"variant {cfg.variant!r} requires x_i")
                tokens["indices"] = tokenize_indices(sample.x_i).tokens
            else:
                if sample.x_g is None:
                    raise DataError(f"variant {cfg.variant!r} requires x_g")
                tokens["global"] = tokenize_global(sample.x_g, cfg.spec).tokens
        return tokens

    def _embed_batch(self, tokens_by_source: dict[str, Array]) -> Tensor:
        cfg = self.config
        first = next(iter(tokens_by_source.values()))
        batch = first.shape[0]
        d = cfg.embed_dim
        pieces = [tile_leading(reshape(self.cls_token, (1, d)), batch)]
        for source in cfg.sources:
            weight, bias = self.projections[source]
            toks = tokens_by_source[source]
            if toks.shape[-1] != weight.shape[0]:
                raise ConfigError(
                    f"{source} token_dim {toks.shape[-1]} does not match "
                    f"projection input {weight.shape[0]}"
                )
            pieces.append(matmul(Tensor(toks), weight) + bias)
        x = concat(pieces, axis=1)
        if x.shape[1] != cfg.sequence_length:
            raise ConfigError(
                f"sequence length {x.shape[1]} does not match positional table "
                f"{cfg.sequence_length}"
            )
        return x + self.pos_table

    def _encode_batch(
        self, x: Tensor, capture_attention: bool = False, dropout_rng: Optional[np.random.Generator] = None
    ) -> tuple[Tensor, Optional[list[Array]]]:
        """Run the pre-norm block stack on a (batch, length, dim) tensor."""
        cfg = self.config
        b, length, d = x.shape
        heads, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(hd)
        captured: list[Array] = []

        def drop(t: Tensor) -> Tensor:
            if cfg.dropout <= 0.0 or dropout_rng is None:
                return t
            keep = 1.0 - cfg.dropout
            mask = (dropout_rng.random(t.shape) < keep) / keep
            return t * Tensor(mask)

        for blk in self.blocks:
            h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta, cfg.layer_norm_eps)
            qkv = matmul(h, blk.qkv_weight) + blk.qkv_bias  # (b, L, 3d)
            q = transpose(reshape(qkv[..., 0:d], (b, length, heads, hd)), (0, 2, 1, 3))
            k = transpose(reshape(qkv[..., d : 2 * d], (b, length, heads, hd)), (0, 2, 1, 3))
            v = transpose(reshape(qkv[..., 2 * d : 3 * d], (b, length, heads, hd)), (0, 2, 1, 3))
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
            attn = softmax(scores, axis=-1)  # (b, heads, L, L)
            if capture_attention:
                captured.append(attn.data.copy())
            ctx = matmul(attn, v)  # (b, heads, L, hd)
            ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, length, d))
            x = x + drop(matmul(ctx, blk.out_weight) + blk.out_bias)

            h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta, cfg.layer_norm_eps)
            mid = gelu(matmul(h2, blk.mlp1_weight) + blk.mlp1_bias)
            x = x + drop(matmul(mid, blk.mlp2_weight) + blk.mlp2_bias)
        return x, (captured if capture_attention else None)

    def _decode_batch(self, encoded: Tensor) -> Tensor:
        cfg = self.config
        cls_out = encoded[:, 0, :]  # (b, d)
        flat = matmul(cls_out, self.decoder_weight) + self.decoder_bias
        return reshape(flat, (flat.shape[0], cfg.n_classes, cfg.out_h, cfg.out_w))

    def forward_tokens(
        self,
        tokens_by_source: dict[str, Array],
        capture_attention: bool = False,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Optional[list[Array]]]:
        x = self._embed_batch(tokens_by_source)
        encoded, attn = self._encode_batch(x, capture_attention, dropout_rng)
        return self._decode_batch(encoded), attn

    def batch_tokens(self, samples) -> dict[str, Array]:
        """Stack per-sample token matrices into (batch, n_tokens, dim) arrays."""
        per_sample = [self._sample_tokens(s) for s in samples]
        return {
            source: np.stack([toks[source] for toks in per_sample])
            for source in self.config.sources
        }

    def forward_samples(
        self,
        samples,
        capture_attention: bool = False,
        dropout_rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Optional[list[Array]]]:
        """Batched forward over a list of samples; logits (B, 2, H, W)."""
        return self.forward_tokens(self.batch_tokens(samples), capture_attention, dropout_rng)

    def forward(self, sample, capture_attention: bool = False):
        """Single-sample forward; logits (2, H, W), plus attention if asked."""
        tokens = {s: t[None] for s, t in self._sample_tokens(sample).items()}
        logits, attn = self.forward_tokens(tokens, capture_attention)
        logits = logits[0]
        if capture_attention:
            return logits, [a[0] for a in attn]
        return logits

    def scores(self, sample) -> Array:
        """Positive-class probability plane for one sample (no graph)."""
        with no_grad():
            logits = self.forward(sample)
        return predict_proba(logits)

    def scores_batch(self, samples, batch_size: int = 16) -> list[Array]:
        out: list[Array] = []
        with no_grad():
            for i in range(0, len(samples), batch_size):
                logits, _ = self.forward_samples(samples[i : i + batch_size])
                probs = np.exp(_log_softmax_np(logits.data, axis=1))[:, 1]
                out.extend(list(probs))
        return out


# ----------------------------------------------------------------------
# Spec-level functional surface
# ----------------------------------------------------------------------

def encoder_forward(
    seq: EmbeddedSequence, model: TeleViTModel, capture_attention: bool = False
) -> tuple[Tensor, Optional[list[Array]]]:
    """Encode one embedded sequence; returns (L, D) plus per-layer attention."""
    length, d = seq.embeddings.shape
    if length != model.sequence_length:
        raise ConfigError(
            f"sequence length {length} does not match model positional table "
            f"{model.sequence_length}"
        )
    x = reshape(seq.embeddings, (1, length, d))
    encoded, attn = model._encode_batch(x, capture_attention)
    out = reshape(encoded, (length, d))
    if capture_attention:
        return out, [a[0] for a in attn]
    return out, None


def decode_cls(cls_out: Tensor, model: TeleViTModel) -> Tensor:
    """Affine map from the encoded cls vector to (n_classes, H, W) logits."""
    cfg = model.config
    flat = matmul(reshape(cls_out, (1, cfg.embed_dim)), model.decoder_weight) + model.decoder_bias
    return reshape(flat, (cfg.n_classes, cfg.out_h, cfg.out_w))


def forward(sample, model: TeleViTModel) -> Tensor:
    """Tokenize, embed, encode, decode: logits (n_classes, H, W)."""
    return model.forward(sample)


def _log_softmax_np(x: Array, axis: int) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def predict_proba(logits) -> Array:
    """Positive-class probability plane from (2, H, W) logits."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 3 or data.shape[0] != 2:
        raise ShapeError(f"predict_proba expects (2, H, W) logits, got {data.shape}")
    return np.exp(_log_softmax_np(data, axis=0))[1]


# ----------------------------------------------------------------------
# Checkpoints: one JSON header line + raw little-endian float64 blob
# ----------------------------------------------------------------------

def save_checkpoint(
    model: TeleViTModel,
    path,
    epoch: int = 0,
    metrics: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    named = model.named_parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": config_to_dict(model.config),
        "seed": model.seed,
        "epoch": int(epoch),
        "metrics": metrics or {},
        "param_order": [name for name, _ in named],
        "param_shapes": {name: list(p.shape) for name, p in named},
        "n_values": int(sum(p.size for _, p in named)),
    }
    if extra:
        header.update(extra)
    blob = np.concatenate([p.data.ravel() for _, p in named]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path) -> tuple[TeleViTModel, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a recognized checkpoint: {path}")
    config = config_from_dict(header["config"])
    model = TeleViTModel(config, seed=header.get("seed", 0))
    values = np.frombuffer(blob, dtype="<f8")
    if values.size != header["n_values"]:
        raise DataError(
            f"checkpoint blob holds {values.size} values, header says {header['n_values']}"
        )
    offset = 0
    named = dict(model.named_parameters())
    for name in header["param_order"]:
        param = named[name]
        n = param.size
        param.data = values[offset : offset + n].reshape(param.shape).astype(np.float64)
        offset += n
    return model, header

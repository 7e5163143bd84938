"""Transformer encoder over region patch-feature sequences.

Layout of one forward pass: a learnable class token is prepended at sequence
index 0, each grid cell's feature row has already been summed with its
concatenated x/y positional encoding, and every attention logit pointing at a
background key column gets a -1e5 additive bias.  After row-max subtraction
that bias underflows to an exactly-zero attention weight, so background
content is inert for every foreground or class output while the row stays
normalized over the live keys.

Blocks are pre-norm: attention sublayer, MLP sublayer, residual connections,
one final layer norm.  Dropout (when a training rng is supplied) acts on the
two sublayer outputs, never on the attention weights, so the returned
attention matrices are always row-stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .featstore.types import RegionTensor

__all__ = [
    "BACKGROUND_LOGIT_BIAS",
    "EncoderConfig",
    "EncoderOutput",
    "background_key_bias",
    "encode",
    "init_encoder_params",
    "positional_encode",
    "positional_matrix",
    "truncated_normal",
]

BACKGROUND_LOGIT_BIAS = -1.0e5


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs; full scale is L=12/H=8/d=512/n=20, desk is L=2/H=4/d=64/n=8."""

    layers: int = 12
    heads: int = 8
    model_dim: int = 512
    region_side: int = 20
    mlp_ratio: float = 4.0
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.model_dim % 2 != 0:
            raise ValueError("model_dim must be even (x/y positional halves)")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by the head count")
        if self.region_side < 1:
            raise ValueError("region_side must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if int(self.mlp_ratio * self.model_dim) < 1:
            raise ValueError("mlp hidden width must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.model_dim)

    @property
    def seq_len(self) -> int:
        return 1 + self.region_side * self.region_side

    @staticmethod
    def desk_scale() -> "EncoderConfig":
        return EncoderConfig(layers=2, heads=4, model_dim=64, region_side=8)


@dataclass
class EncoderOutput:
    """Final-layer tokens (class token first) plus per-layer attention maps."""

    tokens: nc.Tensor
    attentions: list[np.ndarray]

    def class_tokens(self) -> nc.Tensor:
        b, s, d = self.tokens.shape
        return nc.take(self.tokens, np.array([0]), axis=1).reshape(b, d)


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02
) -> np.ndarray:
    """Normal draw with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_encoder_params(
    config: EncoderConfig, rng: np.random.Generator
) -> dict[str, nc.Tensor]:
    d = config.model_dim
    half = d // 2
    n = config.region_side
    params: dict[str, nc.Tensor] = {
        "pos.x": nc.parameter(truncated_normal(rng, (n, half))),
        "pos.y": nc.parameter(truncated_normal(rng, (n, half))),
        "tokens.class": nc.parameter(truncated_normal(rng, (d,))),
        "tokens.mask": nc.parameter(truncated_normal(rng, (d,))),
    }
    for i in range(config.layers):
        prefix = f"layers.{i}"
        params[f"{prefix}.attn.norm.gain"] = nc.parameter(np.ones(d))
        params[f"{prefix}.attn.norm.bias"] = nc.parameter(np.zeros(d))
        for role in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{role}"] = nc.parameter(truncated_normal(rng, (d, d)))
        for role in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{role}"] = nc.parameter(np.zeros(d))
        params[f"{prefix}.mlp.norm.gain"] = nc.parameter(np.ones(d))
        params[f"{prefix}.mlp.norm.bias"] = nc.parameter(np.zeros(d))
        params[f"{prefix}.mlp.w1"] = nc.parameter(truncated_normal(rng, (d, config.mlp_dim)))
        params[f"{prefix}.mlp.b1"] = nc.parameter(np.zeros(config.mlp_dim))
        params[f"{prefix}.mlp.w2"] = nc.parameter(truncated_normal(rng, (config.mlp_dim, d)))
        params[f"{prefix}.mlp.b2"] = nc.parameter(np.zeros(d))
    params["final_norm.gain"] = nc.parameter(np.ones(d))
    params["final_norm.bias"] = nc.parameter(np.zeros(d))
    return params


def positional_matrix(params: dict[str, nc.Tensor], positions: np.ndarray) -> nc.Tensor:
    """concat(P_x[x_j], P_y[y_j]) for each cell j, as an (n^2, d) tensor."""
    table_x = params["pos.x"]
    table_y = params["pos.y"]
    xs = positions[:, 0]
    ys = positions[:, 1]
    if xs.max() >= table_x.shape[0] or ys.max() >= table_y.shape[0]:
        raise nc.ShapeError("cell position outside the positional tables")
    return nc.concat([nc.take(table_x, xs), nc.take(table_y, ys)], axis=1)


def positional_encode(region: RegionTensor, params: dict[str, nc.Tensor]) -> nc.Tensor:
    """Feature rows plus their positional vectors, background cells included."""
    return nc.constant(region.features) + positional_matrix(params, region.positions)


def background_key_bias(background: np.ndarray) -> np.ndarray:
    """(B, 1, 1, S) additive logit bias: 0 for class/foreground keys, -1e5 for background."""
    background = np.atleast_2d(background)
    b, cells = background.shape
    bias = np.zeros((b, 1 + cells), dtype=np.float64)
    bias[:, 1:][background] = BACKGROUND_LOGIT_BIAS
    return bias[:, None, None, :]


def encode(
    features: nc.Tensor,
    background: np.ndarray,
    config: EncoderConfig,
    params: dict[str, nc.Tensor],
    train_rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the encoder over one batch of positionally encoded region sequences.

    ``features`` is (B, n^2, d) or (n^2, d); the class token is prepended
    here and receives no positional vector.  Returns all per-layer attention
    matrices as plain arrays of shape (B, H, S, S).
    """
    if features.ndim == 2:
        features = features.reshape(1, *features.shape)
    batch, cells, d = features.shape
    if d != config.model_dim:
        raise nc.ShapeError(f"feature dim {d} != model dim {config.model_dim}")
    if cells != config.region_side**2:
        raise nc.ShapeError(f"{cells} cells != region side {config.region_side}^2")
    background = np.atleast_2d(background)
    if background.shape != (batch, cells):
        raise nc.ShapeError(f"background mask shape {background.shape} != ({batch}, {cells})")

    cls = nc.tile_leading(params["tokens.class"].reshape(1, d), batch)
    x = nc.concat([cls, features], axis=1)
    key_bias = background_key_bias(background)
    scale = nc.constant(1.0 / np.sqrt(config.head_dim))
    seq = 1 + cells
    heads = config.heads
    head_dim = config.head_dim

    def split_heads(t: nc.Tensor) -> nc.Tensor:
        return t.reshape(batch, seq, heads, head_dim).transpose((0, 2, 1, 3))

    attentions: list[np.ndarray] = []
    for i in range(config.layers):
        prefix = f"layers.{i}"
        h = nc.layer_norm(x, params[f"{prefix}.attn.norm.gain"], params[f"{prefix}.attn.norm.bias"])
        q = split_heads(h @ params[f"{prefix}.attn.wq"] + params[f"{prefix}.attn.bq"])
        k = split_heads(h @ params[f"{prefix}.attn.wk"] + params[f"{prefix}.attn.bk"])
        v = split_heads(h @ params[f"{prefix}.attn.wv"] + params[f"{prefix}.attn.bv"])
        logits = (q @ k.transpose((0, 1, 3, 2))) * scale
        attn = nc.masked_softmax(logits, key_bias)
        attentions.append(attn.data)
        ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(batch, seq, d)
        proj = ctx @ params[f"{prefix}.attn.wo"] + params[f"{prefix}.attn.bo"]
        if train_rng is not None and config.dropout > 0.0:
            proj = nc.dropout(proj, config.dropout, train_rng)
        x = x + proj
        h2 = nc.layer_norm(x, params[f"{prefix}.mlp.norm.gain"], params[f"{prefix}.mlp.norm.bias"])
        mid = nc.gelu(h2 @ params[f"{prefix}.mlp.w1"] + params[f"{prefix}.mlp.b1"])
        out = mid @ params[f"{prefix}.mlp.w2"] + params[f"{prefix}.mlp.b2"]
        if train_rng is not None and config.dropout > 0.0:
            out = nc.dropout(out, config.dropout, train_rng)
        x = x + out
    x = nc.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    return EncoderOutput(tokens=x, attentions=attentions)

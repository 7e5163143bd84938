"""Slide-level prediction models sharing one sampling pipeline.

All three consume the same per-slide region samples: the transformer model
encodes each region and averages class tokens, while the MIL baselines pool
the foreground patch features of those regions directly (average pooling or
gated attention pooling).  Every model maps its slide representation through
a linear head to a risk score (survival) or class logits.
"""

from __future__ import annotations

import numpy as np

from .. import numcore as nc
from ..encoder import BACKGROUND_LOGIT_BIAS, EncoderConfig, init_encoder_params, truncated_normal
from ..featstore import RegionTensor
from .common import RegionBatch, encode_regions, stack_regions

__all__ = ["MilModel", "TransformerSlideModel", "build_model"]


def _head_params(rng: np.random.Generator, d: int, out_dim: int) -> dict[str, nc.Tensor]:
    return {
        "head.w": nc.parameter(truncated_normal(rng, (d, out_dim))),
        "head.b": nc.parameter(np.zeros(out_dim)),
    }


class TransformerSlideModel:
    """Pretrained (or scratch) encoder, class-token averaging, linear head."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        out_dim: int,
        rng: np.random.Generator,
        init_arrays: dict[str, np.ndarray] | None = None,
    ) -> None:
        self.encoder_config = encoder_config
        self.out_dim = out_dim
        self.params = init_encoder_params(encoder_config, rng)
        if init_arrays is not None:
            nc.load_params_into(self.params, init_arrays)
        self.params.update(_head_params(rng, encoder_config.model_dim, out_dim))

    def head_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head.")]

    def backend_param_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def forward(
        self,
        slide_regions: list[list[RegionTensor]],
        train_rng: np.random.Generator | None = None,
    ) -> nc.Tensor:
        """(B,) risks or (B, C) logits from per-slide region lists."""
        counts = [len(regions) for regions in slide_regions]
        flat = [r for regions in slide_regions for r in regions]
        batch = stack_regions(flat)
        out = encode_regions(batch, self.encoder_config, self.params, train_rng=train_rng)
        cls = out.class_tokens()  # (sum(counts), d)
        d = self.encoder_config.model_dim
        if len(set(counts)) == 1:
            stacked = cls.reshape(len(counts), counts[0], d).mean(axis=1)
        else:
            reps = []
            offset = 0
            for count in counts:
                idx = np.arange(offset, offset + count)
                reps.append(nc.take(cls, idx).mean(axis=0, keepdims=True))
                offset += count
            stacked = nc.concat(reps, axis=0)
        logits = stacked @ self.params["head.w"] + self.params["head.b"]
        return logits.reshape(len(counts)) if self.out_dim == 1 else logits

    def encode_batch(self, batch: RegionBatch, train_rng=None):
        return encode_regions(batch, self.encoder_config, self.params, train_rng=train_rng)


class MilModel:
    """Bag-of-patches baselines: average pooling ("ap") or gated attention ("attn")."""

    def __init__(
        self,
        feature_dim: int,
        out_dim: int,
        variant: str,
        rng: np.random.Generator,
        attn_dim: int = 64,
    ) -> None:
        if variant not in ("ap", "attn"):
            raise ValueError(f"unknown MIL variant '{variant}'")
        self.feature_dim = feature_dim
        self.out_dim = out_dim
        self.variant = variant
        self.params = _head_params(rng, feature_dim, out_dim)
        if variant == "attn":
            self.params["attn.v"] = nc.parameter(truncated_normal(rng, (feature_dim, attn_dim)))
            self.params["attn.u"] = nc.parameter(truncated_normal(rng, (feature_dim, attn_dim)))
            self.params["attn.w"] = nc.parameter(truncated_normal(rng, (attn_dim, 1)))

    def head_param_names(self) -> list[str]:
        return list(self.params)

    def backend_param_names(self) -> list[str]:
        return []

    def forward(
        self,
        slide_regions: list[list[RegionTensor]],
        train_rng: np.random.Generator | None = None,
    ) -> nc.Tensor:
        bags = []
        for regions in slide_regions:
            rows = [r.features[~r.background] for r in regions]
            bags.append(np.concatenate(rows) if rows else np.zeros((0, self.feature_dim)))
        max_len = max(len(bag) for bag in bags)
        if max_len == 0:
            raise ValueError("every bag is empty")
        feats = np.zeros((len(bags), max_len, self.feature_dim))
        valid = np.zeros((len(bags), max_len), dtype=bool)
        for i, bag in enumerate(bags):
            feats[i, : len(bag)] = bag
            valid[i, : len(bag)] = True
        h = nc.constant(feats)
        if self.variant == "ap":
            weights = valid / valid.sum(axis=1, keepdims=True)
            pooled = (h * nc.constant(weights[:, :, None])).sum(axis=1)
        else:
            gate = nc.tanh(h @ self.params["attn.v"]) * nc.sigmoid(h @ self.params["attn.u"])
            scores = (gate @ self.params["attn.w"]).reshape(len(bags), max_len)
            bias = np.where(valid, 0.0, BACKGROUND_LOGIT_BIAS)
            attn = nc.masked_softmax(scores, bias)
            pooled = (h * attn.reshape(len(bags), max_len, 1)).sum(axis=1)
        logits = pooled @ self.params["head.w"] + self.params["head.b"]
        return logits.reshape(len(bags)) if self.out_dim == 1 else logits


def build_model(
    kind: str,
    encoder_config: EncoderConfig,
    out_dim: int,
    rng: np.random.Generator,
    init_arrays: dict[str, np.ndarray] | None = None,
):
    if kind == "transformer":
        return TransformerSlideModel(encoder_config, out_dim, rng, init_arrays)
    if kind == "mil-ap":
        return MilModel(encoder_config.model_dim, out_dim, "ap", rng)
    if kind == "mil-attn":
        return MilModel(encoder_config.model_dim, out_dim, "attn", rng)
    raise ValueError(f"unknown model kind '{kind}'")

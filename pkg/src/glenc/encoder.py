"""Encoder stack: embeddings, layers, parameter container.

There is intentionally no absolute position embedding table; order
information enters only through relative position labels inside attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import torch
from torch import Tensor

from .attention import (
    AttentionParams,
    PieceLabels,
    PieceMasks,
    ProjectionSet,
    build_local_band_mask,
    dense_reference_attention,
    global_local_attention,
)
from .config import ModelConfig
from .core import feed_forward, layer_norm, truncated_normal
from .relative import RelativeVocab

INIT_STD = 0.02


class SentenceSpan(NamedTuple):
    """A sentence's summary row in the global input and its token span."""

    global_row: int
    start: int
    end: int


@dataclass
class EncoderInput:
    """One encoder instance: two token sequences plus masks and labels."""

    global_ids: Tensor
    long_ids: Tensor
    masks: PieceMasks
    labels: PieceLabels
    global_type_ids: Tensor | None = None
    long_type_ids: Tensor | None = None
    word_starts: Tensor | None = None
    sentence_spans: list[SentenceSpan] = field(default_factory=list)
    global_roles: list[str] = field(default_factory=list)

    @property
    def n_global(self) -> int:
        return int(self.global_ids.shape[0])

    @property
    def n_long(self) -> int:
        return int(self.long_ids.shape[0])

    def validate(self, config: ModelConfig) -> None:
        if self.n_global > config.max_global:
            raise ValueError(
                f"global length {self.n_global} exceeds limit {config.max_global}"
            )
        if self.n_long > config.max_long:
            raise ValueError(
                f"long length {self.n_long} exceeds limit {config.max_long}"
            )
        self.masks.validate(self.n_global, self.n_long)

    def with_long_ids(self, long_ids: Tensor) -> "EncoderInput":
        return replace(self, long_ids=long_ids)


@dataclass
class LayerParams:
    attention: AttentionParams
    attn_ln_gain: Tensor
    attn_ln_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ffn_ln_gain: Tensor
    ffn_ln_bias: Tensor


@dataclass
class ParameterSet:
    """All learnable tensors of the model.

    The relative label vector table is shared across layers and across the
    four attention pieces. The MLM output embedding is tied to the token
    embedding table.
    """

    config: ModelConfig
    token_embedding: Tensor
    type_embedding: Tensor
    relative_vectors: Tensor
    layers: list[LayerParams]
    mlm_transform_w: Tensor
    mlm_transform_b: Tensor
    mlm_ln_gain: Tensor
    mlm_ln_bias: Tensor
    mlm_output_bias: Tensor
    cpc_projection: Tensor

    def vocab(self) -> RelativeVocab:
        return RelativeVocab.for_config(self.config, self.relative_vectors)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) pairs; shared projections appear once."""
        out: list[tuple[str, Tensor]] = [
            ("embeddings/word_embeddings", self.token_embedding),
            ("embeddings/token_type_embeddings", self.type_embedding),
            ("relative/vectors", self.relative_vectors),
        ]
        for i, layer in enumerate(self.layers):
            attn = layer.attention
            if attn.shared:
                prefixes = [("", attn.global_proj)]
            else:
                prefixes = [("global/", attn.global_proj), ("long/", attn.long_proj)]
            for prefix, proj in prefixes:
                for suffix, tensor in proj.named():
                    out.append((f"layer_{i}/attention/{prefix}{suffix}", tensor))
            out.extend(
                [
                    (f"layer_{i}/attention/output/layer_norm/gain", layer.attn_ln_gain),
                    (f"layer_{i}/attention/output/layer_norm/bias", layer.attn_ln_bias),
                    (f"layer_{i}/ffn/intermediate/kernel", layer.ffn_w1),
                    (f"layer_{i}/ffn/intermediate/bias", layer.ffn_b1),
                    (f"layer_{i}/ffn/output/kernel", layer.ffn_w2),
                    (f"layer_{i}/ffn/output/bias", layer.ffn_b2),
                    (f"layer_{i}/ffn/output/layer_norm/gain", layer.ffn_ln_gain),
                    (f"layer_{i}/ffn/output/layer_norm/bias", layer.ffn_ln_bias),
                ]
            )
        out.extend(
            [
                ("mlm/transform/kernel", self.mlm_transform_w),
                ("mlm/transform/bias", self.mlm_transform_b),
                ("mlm/layer_norm/gain", self.mlm_ln_gain),
                ("mlm/layer_norm/bias", self.mlm_ln_bias),
                ("mlm/output_bias", self.mlm_output_bias),
                ("cpc/projection", self.cpc_projection),
            ]
        )
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embedding.dtype

    def to_dtype(self, dtype: torch.dtype) -> "ParameterSet":
        """Cast every tensor, preserving projection aliasing in shared mode."""

        def cast(t: Tensor) -> Tensor:
            return t.detach().to(dtype).requires_grad_(t.requires_grad)

        layers = []
        for layer in self.layers:
            gp = ProjectionSet(*(cast(t) for _, t in layer.attention.global_proj.named()))
            lp = gp if layer.attention.shared else ProjectionSet(
                *(cast(t) for _, t in layer.attention.long_proj.named())
            )
            layers.append(
                LayerParams(
                    attention=AttentionParams(gp, lp, layer.attention.heads),
                    attn_ln_gain=cast(layer.attn_ln_gain),
                    attn_ln_bias=cast(layer.attn_ln_bias),
                    ffn_w1=cast(layer.ffn_w1),
                    ffn_b1=cast(layer.ffn_b1),
                    ffn_w2=cast(layer.ffn_w2),
                    ffn_b2=cast(layer.ffn_b2),
                    ffn_ln_gain=cast(layer.ffn_ln_gain),
                    ffn_ln_bias=cast(layer.ffn_ln_bias),
                )
            )
        return ParameterSet(
            config=self.config,
            token_embedding=cast(self.token_embedding),
            type_embedding=cast(self.type_embedding),
            relative_vectors=cast(self.relative_vectors),
            layers=layers,
            mlm_transform_w=cast(self.mlm_transform_w),
            mlm_transform_b=cast(self.mlm_transform_b),
            mlm_ln_gain=cast(self.mlm_ln_gain),
            mlm_ln_bias=cast(self.mlm_ln_bias),
            mlm_output_bias=cast(self.mlm_output_bias),
            cpc_projection=cast(self.cpc_projection),
        )


def _init_projection(
    d: int, gen: torch.Generator, dtype: torch.dtype
) -> ProjectionSet:
    def kernel() -> Tensor:
        return truncated_normal((d, d), INIT_STD, gen, dtype).requires_grad_()

    def bias() -> Tensor:
        return torch.zeros(d, dtype=dtype, requires_grad=True)

    return ProjectionSet(kernel(), bias(), kernel(), bias(), kernel(), bias(), kernel(), bias())


def init_parameters(
    config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> ParameterSet:
    """Fresh parameters: truncated-normal kernels (std 0.02), zero biases."""
    gen = torch.Generator().manual_seed(seed)
    d, d_ff = config.hidden, config.ffn_hidden

    def kernel(shape: tuple[int, ...]) -> Tensor:
        return truncated_normal(shape, INIT_STD, gen, dtype).requires_grad_()

    def zeros(*shape: int) -> Tensor:
        return torch.zeros(shape, dtype=dtype, requires_grad=True)

    def ones(*shape: int) -> Tensor:
        return torch.ones(shape, dtype=dtype, requires_grad=True)

    layers = []
    for _ in range(config.layers):
        gp = _init_projection(d, gen, dtype)
        lp = gp if config.sharing == "shared" else _init_projection(d, gen, dtype)
        layers.append(
            LayerParams(
                attention=AttentionParams(gp, lp, config.heads),
                attn_ln_gain=ones(d),
                attn_ln_bias=zeros(d),
                ffn_w1=kernel((d, d_ff)),
                ffn_b1=zeros(d_ff),
                ffn_w2=kernel((d_ff, d)),
                ffn_b2=zeros(d),
                ffn_ln_gain=ones(d),
                ffn_ln_bias=zeros(d),
            )
        )
    return ParameterSet(
        config=config,
        token_embedding=kernel((config.vocab_size, d)),
        type_embedding=kernel((config.type_vocab_size, d)),
        relative_vectors=kernel((config.heads, config.num_labels, config.head_dim)),
        layers=layers,
        mlm_transform_w=kernel((d, d)),
        mlm_transform_b=zeros(d),
        mlm_ln_gain=ones(d),
        mlm_ln_bias=zeros(d),
        mlm_output_bias=zeros(config.vocab_size),
        cpc_projection=kernel((d, d)),
    )


def _embed_rows(ids: Tensor, type_ids: Tensor | None, params: ParameterSet) -> Tensor:
    if ids.numel() and (ids.min() < 0 or ids.max() >= params.config.vocab_size):
        raise ValueError(
            f"token id out of range for vocabulary of size {params.config.vocab_size}"
        )
    rows = params.token_embedding[ids]
    if type_ids is None:
        type_ids = torch.zeros_like(ids)
    if type_ids.numel() and (
        type_ids.min() < 0 or type_ids.max() >= params.config.type_vocab_size
    ):
        raise ValueError("token type id out of range")
    return rows + params.type_embedding[type_ids]


def embed(inp: EncoderInput, params: ParameterSet) -> tuple[Tensor, Tensor]:
    """Token + token-type embedding rows; no positional term."""
    return (
        _embed_rows(inp.global_ids, inp.global_type_ids, params),
        _embed_rows(inp.long_ids, inp.long_type_ids, params),
    )


def encoder_layer(
    h_g: Tensor,
    h_l: Tensor,
    layer: LayerParams,
    inp: EncoderInput,
    vocab: RelativeVocab,
    r: int,
    eps: float,
    use_blocked: bool = True,
) -> tuple[Tensor, Tensor]:
    """Post-layer-norm residual block applied to both sequences."""
    if use_blocked:
        a_g, a_l = global_local_attention(
            h_g, h_l, layer.attention, inp.masks, inp.labels, vocab, r
        )
    else:
        masks = PieceMasks(
            inp.masks.g2g,
            inp.masks.g2l,
            inp.masks.l2g,
            inp.masks.l2l & build_local_band_mask(h_l.shape[0], r),
        )
        a_g, a_l = dense_reference_attention(
            h_g, h_l, layer.attention, masks, inp.labels, vocab
        )

    def sublayers(h: Tensor, a: Tensor) -> Tensor:
        if h.shape[0] == 0:
            return h
        h = layer_norm(h + a, layer.attn_ln_gain, layer.attn_ln_bias, eps)
        f = feed_forward(h, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2)
        return layer_norm(h + f, layer.ffn_ln_gain, layer.ffn_ln_bias, eps)

    return sublayers(h_g, a_g), sublayers(h_l, a_l)


def run_layers(
    h_g: Tensor,
    h_l: Tensor,
    inp: EncoderInput,
    params: ParameterSet,
    use_blocked: bool = True,
) -> tuple[Tensor, Tensor]:
    """Run the layer stack on already-embedded rows."""
    config = params.config
    vocab = params.vocab()
    for layer in params.layers:
        h_g, h_l = encoder_layer(
            h_g,
            h_l,
            layer,
            inp,
            vocab,
            config.local_radius,
            config.layer_norm_eps,
            use_blocked=use_blocked,
        )
    return h_g, h_l


def encode(
    inp: EncoderInput, params: ParameterSet, use_blocked: bool = True
) -> tuple[Tensor, Tensor]:
    """Full forward pass: embeddings plus the encoder layer stack."""
    inp.validate(params.config)
    h_g, h_l = embed(inp, params)
    return run_layers(h_g, h_l, inp, params, use_blocked=use_blocked)

"""Bit-exact named-tensor persistence and BERT-format weight lifting.

A checkpoint is a pair of files: ``<path>.manifest.json`` (a UTF-8 JSON
array of name/dtype/shape/offset entries) and ``<path>.blob`` (raw
little-endian IEEE-754 32-bit values, row-major, concatenated in manifest
order). The format is deliberately trivial to diff and to parse from any
language.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .config import ModelConfig
from .encoder import ParameterSet, init_parameters

DTYPE_TAG = "f32"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    """Loaded named tensors plus the manifest they came from."""

    manifest: list[dict]
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return [entry["name"] for entry in self.manifest]

    def tensor(self, name: str) -> Tensor:
        if name not in self.tensors:
            raise CheckpointError(f"missing tensor: {name}")
        return self.tensors[name]

    def get(self, name: str) -> Tensor | None:
        return self.tensors.get(name)


def _files(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    return base.with_name(base.name + ".manifest.json"), base.with_name(base.name + ".blob")


def save_checkpoint(
    params: ParameterSet | list[tuple[str, Tensor]], path: str | Path
) -> None:
    """Write manifest + blob; byte-identical output for identical tensors."""
    named = params.named_tensors() if isinstance(params, ParameterSet) else list(params)
    if not named:
        raise CheckpointError("no tensors")
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in named:
        data = tensor.detach().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = data.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": DTYPE_TAG,
                "shape": list(tensor.shape),
                "offset": offset,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest_path, blob_path = _files(path)
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    blob_path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Materialize every tensor, validating the manifest against the blob."""
    manifest_path, blob_path = _files(path)
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    if not blob_path.exists():
        raise CheckpointError(f"missing blob: {blob_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    blob = blob_path.read_bytes()

    tensors: dict[str, Tensor] = {}
    expected_offset = 0
    for entry in manifest:
        if entry["dtype"] != DTYPE_TAG:
            raise CheckpointError(f"unsupported dtype: {entry['dtype']!r}")
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"manifest offsets overlap or leave gaps at {entry['name']}"
            )
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if entry["offset"] + nbytes > len(blob):
            raise CheckpointError("truncated blob")
        data = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(data.copy())
        expected_offset += nbytes
    if expected_offset != len(blob):
        raise CheckpointError(
            f"blob has {len(blob)} bytes but manifest accounts for {expected_offset}"
        )
    return Checkpoint(manifest, tensors)


def parameters_from_checkpoint(ckpt: Checkpoint, config: ModelConfig) -> ParameterSet:
    """Rebuild a ParameterSet, validating every shape against the config."""
    params = init_parameters(config, seed=0)
    with torch.no_grad():
        for name, tensor in params.named_tensors():
            loaded = ckpt.tensor(name)
            if tuple(loaded.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(loaded.shape)}, "
                    f"model {tuple(tensor.shape)}"
                )
            tensor.copy_(loaded)
    return params


# ---------------------------------------------------------------------------
# Lifting from BERT-format checkpoints

_LAYER_RE = re.compile(r"^layer_(\d+)/")

# Tensors intentionally not carried over.
DISCARDED_PREFIXES = ("embeddings/position_embeddings", "nsp/")


def source_layer_count(src: Checkpoint) -> int:
    layers = {int(m.group(1)) for m in map(_LAYER_RE.match, src.names()) if m}
    return max(layers) + 1 if layers else 0


def _resolve(src: Checkpoint, *candidates: str) -> tuple[str, Tensor]:
    for name in candidates:
        tensor = src.get(name)
        if tensor is not None:
            return name, tensor
    raise CheckpointError(f"missing tensor: {candidates[0]}")


def _copy(dst: Tensor, src: Checkpoint, *candidates: str) -> None:
    name, tensor = _resolve(src, *candidates)
    if tuple(tensor.shape) != tuple(dst.shape):
        raise CheckpointError(
            f"dimension mismatch for {name}: source {tuple(tensor.shape)}, "
            f"target {tuple(dst.shape)}"
        )
    with torch.no_grad():
        dst.copy_(tensor.to(dst.dtype))


def lift_bert(
    src: Checkpoint,
    config: ModelConfig,
    sharing: str | None = None,
    seed: int = 0,
) -> ParameterSet:
    """Initialize encoder parameters from a BERT-format checkpoint.

    Per layer, the feed-forward weights, the query/key/value and output
    projections, and both layer norms are copied; in "separate" mode the
    global and long row groups receive identical copies. Token and
    token-type embeddings are copied. Absolute position embeddings and
    next-sentence-prediction weights are ignored; relative label vectors,
    the MLM head, and the CPC projection stay freshly initialized.

    Also accepts checkpoints saved by this library (their attention tensors
    may carry a ``global/`` prefix), which makes lifting idempotent.
    """
    if sharing is not None:
        config = dataclasses.replace(config, sharing=sharing)

    word = src.tensor("embeddings/word_embeddings")
    if word.shape[1] != config.hidden:
        raise CheckpointError(
            f"dimension mismatch for embeddings/word_embeddings: source hidden "
            f"{word.shape[1]}, config hidden {config.hidden}"
        )
    if word.shape[0] != config.vocab_size:
        raise CheckpointError(
            f"dimension mismatch for embeddings/word_embeddings: source vocab "
            f"{word.shape[0]}, config vocab {config.vocab_size}"
        )
    layers = source_layer_count(src)
    if layers != config.layers:
        raise CheckpointError(
            f"layer count mismatch: source {layers}, config {config.layers}"
        )
    _, ffn_w1 = _resolve(src, "layer_0/ffn/intermediate/kernel")
    if ffn_w1.shape[1] != config.ffn_hidden:
        raise CheckpointError(
            f"dimension mismatch for layer_0/ffn/intermediate/kernel: source "
            f"feed-forward width {ffn_w1.shape[1]}, config {config.ffn_hidden}"
        )

    params = init_parameters(config, seed=seed)
    _copy(params.token_embedding, src, "embeddings/word_embeddings")
    _copy(params.type_embedding, src, "embeddings/token_type_embeddings")

    for i, layer in enumerate(params.layers):
        attn = layer.attention
        projections = [attn.global_proj]
        if not attn.shared:
            projections.append(attn.long_proj)
        for proj in projections:
            for suffix, dst in proj.named():
                _copy(
                    dst,
                    src,
                    f"layer_{i}/attention/{suffix}",
                    f"layer_{i}/attention/global/{suffix}",
                )
        _copy(layer.attn_ln_gain, src, f"layer_{i}/attention/output/layer_norm/gain")
        _copy(layer.attn_ln_bias, src, f"layer_{i}/attention/output/layer_norm/bias")
        _copy(layer.ffn_w1, src, f"layer_{i}/ffn/intermediate/kernel")
        _copy(layer.ffn_b1, src, f"layer_{i}/ffn/intermediate/bias")
        _copy(layer.ffn_w2, src, f"layer_{i}/ffn/output/kernel")
        _copy(layer.ffn_b2, src, f"layer_{i}/ffn/output/bias")
        _copy(layer.ffn_ln_gain, src, f"layer_{i}/ffn/output/layer_norm/gain")
        _copy(layer.ffn_ln_bias, src, f"layer_{i}/ffn/output/layer_norm/bias")
    return params


def lifted_tensor_names(config: ModelConfig) -> set[str]:
    """Our parameter names whose values are copied (not random) by lifting."""
    names = {"embeddings/word_embeddings", "embeddings/token_type_embeddings"}
    prefixes = [""] if config.sharing == "shared" else ["global/", "long/"]
    for i in range(config.layers):
        for prefix in prefixes:
            for part in ("query", "key", "value", "output"):
                names.add(f"layer_{i}/attention/{prefix}{part}/kernel")
                names.add(f"layer_{i}/attention/{prefix}{part}/bias")
        names.update(
            {
                f"layer_{i}/attention/output/layer_norm/gain",
                f"layer_{i}/attention/output/layer_norm/bias",
                f"layer_{i}/ffn/intermediate/kernel",
                f"layer_{i}/ffn/intermediate/bias",
                f"layer_{i}/ffn/output/kernel",
                f"layer_{i}/ffn/output/bias",
                f"layer_{i}/ffn/output/layer_norm/gain",
                f"layer_{i}/ffn/output/layer_norm/bias",
            }
        )
    return names

"""Relative position labels and the memory-efficient attention bias.

A label id is either one of the 2k+1 clipped sequence offsets (ids 0..2k
standing for offsets -k..k) or a named structural relation appended after
them. Each label owns one learnable key-side vector per attention head;
the score bias is computed as a query-times-vocabulary product followed by
a gather, so per-pair label vectors are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .config import ModelConfig


@dataclass(frozen=True)
class RelativeVocab:
    """Label vocabulary: clipping distance, structural names, per-head vectors.

    ``vectors`` is ``[heads, num_labels, head_dim]`` and may be None when only
    label ids are needed (input building).
    """

    clip_distance: int
    structural_labels: tuple[str, ...]
    vectors: Tensor | None = None

    def __post_init__(self) -> None:
        if self.clip_distance < 0:
            raise ValueError("clip_distance must be >= 0")
        if self.vectors is not None and self.vectors.shape[1] != self.size:
            raise ValueError(
                f"vector table has {self.vectors.shape[1]} rows, expected {self.size}"
            )

    @property
    def num_sequence(self) -> int:
        return 2 * self.clip_distance + 1

    @property
    def size(self) -> int:
        return self.num_sequence + len(self.structural_labels)

    def sequence_id(self, delta: int) -> int:
        k = self.clip_distance
        return max(-k, min(k, delta)) + k

    def structural_id(self, name: str) -> int:
        try:
            return self.num_sequence + self.structural_labels.index(name)
        except ValueError:
            raise ValueError(f"unknown structural label: {name!r}") from None

    @classmethod
    def for_config(cls, config: ModelConfig, vectors: Tensor | None = None) -> "RelativeVocab":
        return cls(config.clip_distance, tuple(config.structural_labels), vectors)


def sequence_relative_labels(
    n_rows: int, n_cols: int, row_offset: int, k: int
) -> Tensor:
    """Clipped relative-offset label ids for a rows-by-cols attention piece.

    Entry (i, j) encodes ``clip(j - (i + row_offset), -k, k)`` mapped to
    0..2k. ``row_offset`` aligns pieces whose rows and columns index
    different sequences.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    rows = torch.arange(n_rows, dtype=torch.long).unsqueeze(1) + row_offset
    cols = torch.arange(n_cols, dtype=torch.long).unsqueeze(0)
    delta = (cols - rows).clamp_(-k, k)
    return delta + k


def relative_score_bias(
    queries: Tensor, labels: Tensor, vocab: RelativeVocab, head: int
) -> Tensor:
    """Per-pair score bias ``queries[i] . vector[label(i, j)]`` for one head.

    Computed as an [n, num_labels] dot-product matrix gathered at the label
    ids, never materializing per-pair vectors.
    """
    if vocab.vectors is None:
        raise ValueError("vocabulary carries no vectors")
    if labels.numel() and (labels.min() < 0 or labels.max() >= vocab.size):
        raise ValueError(
            f"label id out of range for vocabulary of size {vocab.size}"
        )
    per_label = queries @ vocab.vectors[head].T  # [n, num_labels]
    return per_label.gather(1, labels)


def relative_score_bias_all_heads(
    queries: Tensor, labels: Tensor, vocab: RelativeVocab
) -> Tensor:
    """Stacked-heads variant: ``queries`` is [heads, n, head_dim]."""
    if vocab.vectors is None:
        raise ValueError("vocabulary carries no vectors")
    if labels.numel() and (labels.min() < 0 or labels.max() >= vocab.size):
        raise ValueError(
            f"label id out of range for vocabulary of size {vocab.size}"
        )
    per_label = torch.einsum("hnd,hvd->hnv", queries, vocab.vectors)
    idx = labels.unsqueeze(0).expand(queries.shape[0], -1, -1)
    return per_label.gather(2, idx)

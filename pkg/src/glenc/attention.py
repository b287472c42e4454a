"""Global-local attention.

The input is split into a short global sequence and a long sequence; the
four attention pieces (g2g, g2l, l2g, l2l) are computed as two row groups,
each with a single joint softmax over the concatenated global+long key
axis. ``dense_reference_attention`` materializes full score matrices and
serves as the in-library oracle; ``global_local_attention`` produces the
same outputs but computes the l2l piece with the blocked sliding-window
kernel, so its cost is n_g*(n_g+n_l) + n_l*(n_g+2r+1) score pairs instead
of quadratic in the long length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .core import MASK_CONSTANT, masked_softmax
from .relative import RelativeVocab


@dataclass
class ProjectionSet:
    """Query/key/value and output projections for one row group."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("query/kernel", self.wq),
            ("query/bias", self.bq),
            ("key/kernel", self.wk),
            ("key/bias", self.bk),
            ("value/kernel", self.wv),
            ("value/bias", self.bv),
            ("output/kernel", self.wo),
            ("output/bias", self.bo),
        ]


@dataclass
class AttentionParams:
    """Projections for the two row groups.

    In "shared" mode ``global_proj`` and ``long_proj`` are the same object
    (the global rows and long rows use identical weights); in "separate"
    mode each row group owns a full set and projects both key sources with
    it.
    """

    global_proj: ProjectionSet
    long_proj: ProjectionSet
    heads: int

    @property
    def shared(self) -> bool:
        return self.global_proj is self.long_proj


@dataclass
class PieceMasks:
    """Boolean attention masks for the four pieces (True = may attend)."""

    g2g: Tensor
    g2l: Tensor
    l2g: Tensor
    l2l: Tensor

    def validate(self, n_g: int, n_l: int) -> None:
        expect = {
            "g2g": (n_g, n_g),
            "g2l": (n_g, n_l),
            "l2g": (n_l, n_g),
            "l2l": (n_l, n_l),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ValueError(f"mask {name} has shape {got}, expected {shape}")


@dataclass
class PieceLabels:
    """Relative label id matrices for the four pieces."""

    g2g: Tensor
    g2l: Tensor
    l2g: Tensor
    l2l: Tensor


def build_local_band_mask(n_l: int, r: int) -> Tensor:
    """Band mask: entry (i, j) is True iff |i - j| <= r."""
    if r < 0:
        raise ValueError("radius must be >= 0")
    idx = torch.arange(n_l, dtype=torch.long)
    return (idx.unsqueeze(1) - idx.unsqueeze(0)).abs() <= r


def count_attention_pairs(n_g: int, n_l: int, r: int, masks: PieceMasks | None = None) -> int:
    """Number of key positions scored, before per-instance masking.

    ``masks`` is accepted for shape validation only; the count does not
    depend on per-instance masking.
    """
    if masks is not None:
        masks.validate(n_g, n_l)
    return n_g * (n_g + n_l) + n_l * (n_g + min(2 * r + 1, n_l))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.view(n, heads, d // heads).permute(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d_z = x.shape
    return x.permute(1, 0, 2).reshape(n, h * d_z)


def _project(x: Tensor, w: Tensor, b: Tensor, heads: int) -> Tensor:
    return _split_heads(x @ w + b, heads)


def _mask_term(mask: Tensor, dtype: torch.dtype) -> Tensor:
    return (~mask).to(dtype) * MASK_CONSTANT


def _row_group(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    labels: Tensor,
    masks: Tensor,
    vocab: RelativeVocab,
) -> Tensor:
    """Dense attention for one row group over the concatenated key axis.

    Processed one head at a time to keep the peak working set at one score
    matrix instead of ``heads`` of them.
    """
    d_z = queries.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= vocab.size):
        raise ValueError(f"label id out of range for vocabulary of size {vocab.size}")
    mask_term = _mask_term(masks, queries.dtype)
    heads = []
    for head in range(queries.shape[0]):
        scores = queries[head] @ keys[head].T
        scores = scores + (queries[head] @ vocab.vectors[head].T).gather(1, labels)
        scores = scores / math.sqrt(d_z) - mask_term
        heads.append(masked_softmax(scores) @ values[head])
    return torch.stack(heads)


def dense_reference_attention(
    x_g: Tensor,
    x_l: Tensor,
    params: AttentionParams,
    masks: PieceMasks,
    labels: PieceLabels,
    vocab: RelativeVocab,
) -> tuple[Tensor, Tensor]:
    """Full-matrix reference: one joint softmax per row group.

    Expects ``masks.l2l`` to already include the local band restriction.
    """
    n_g, n_l = x_g.shape[0], x_l.shape[0]
    masks.validate(n_g, n_l)
    h = params.heads
    gp, lp = params.global_proj, params.long_proj

    if n_g:
        q_g = _project(x_g, gp.wq, gp.bq, h)
        keys = torch.cat(
            [_project(x_g, gp.wk, gp.bk, h), _project(x_l, gp.wk, gp.bk, h)], dim=1
        )
        vals = torch.cat(
            [_project(x_g, gp.wv, gp.bv, h), _project(x_l, gp.wv, gp.bv, h)], dim=1
        )
        lab = torch.cat([labels.g2g, labels.g2l], dim=1)
        msk = torch.cat([masks.g2g, masks.g2l], dim=1)
        z_g = _merge_heads(_row_group(q_g, keys, vals, lab, msk, vocab)) @ gp.wo + gp.bo
    else:
        z_g = x_g.new_zeros((0, gp.wo.shape[1]))

    if n_l:
        q_l = _project(x_l, lp.wq, lp.bq, h)
        keys = torch.cat(
            [_project(x_g, lp.wk, lp.bk, h), _project(x_l, lp.wk, lp.bk, h)], dim=1
        )
        vals = torch.cat(
            [_project(x_g, lp.wv, lp.bv, h), _project(x_l, lp.wv, lp.bv, h)], dim=1
        )
        lab = torch.cat([labels.l2g, labels.l2l], dim=1)
        msk = torch.cat([masks.l2g, masks.l2l], dim=1)
        z_l = _merge_heads(_row_group(q_l, keys, vals, lab, msk, vocab)) @ lp.wo + lp.bo
    else:
        z_l = x_l.new_zeros((0, lp.wo.shape[1]))
    return z_g, z_l


def _block_geometry(n_l: int, r: int) -> tuple[int, int, Tensor, Tensor, Tensor]:
    """Block layout for the sliding-window kernel.

    Returns (block_len, n_blocks, query_index, key_index, valid) where
    query_index is [n_blocks, block_len] and key_index [n_blocks, 3*block_len]
    map block slots to positions in the long sequence (out-of-range values
    mark padding), and valid flags exactly the in-range pairs with
    |i - j| <= r.
    """
    rb = r + 1
    nb = max(1, -(-n_l // rb))
    blocks = torch.arange(nb, dtype=torch.long)
    q_idx = blocks.unsqueeze(1) * rb + torch.arange(rb, dtype=torch.long)
    k_idx = (blocks.unsqueeze(1) - 1) * rb + torch.arange(3 * rb, dtype=torch.long)
    i = q_idx.unsqueeze(2)
    j = k_idx.unsqueeze(1)
    valid = (i < n_l) & (j >= 0) & (j < n_l) & ((i - j).abs() <= r)
    return rb, nb, q_idx, k_idx, valid


def _window_blocks(x: Tensor, rb: int, nb: int) -> Tensor:
    """Arrange [h, n_l, d] keys or values into [h, nb, 3*rb, d] windows.

    One zero block is prepended and appended so block b sees blocks
    b-1, b, b+1 of the padded sequence.
    """
    h, n_l, d = x.shape
    pad_tail = nb * rb - n_l + rb
    padded = torch.cat(
        [x.new_zeros((h, rb, d)), x, x.new_zeros((h, pad_tail, d))], dim=1
    )
    return padded.unfold(1, 3 * rb, rb).permute(0, 1, 3, 2)


def blocked_local_scores(
    queries: Tensor, keys: Tensor, r: int
) -> tuple[Tensor, Tensor]:
    """Raw sliding-window score blocks plus their validity mask.

    Queries are split into blocks of length r+1; each block is scored
    against the concatenation of the previous, same, and next key blocks
    (with zero padding blocks at both ends). The result has shape
    [n_blocks, r+1, 3*(r+1)] (a leading head dimension is preserved when
    present). Slots outside the |i-j| <= r band or beyond the sequence are
    still present but flagged False in the validity mask so the caller can
    mask them out.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    squeeze = queries.dim() == 2
    if squeeze:
        queries = queries.unsqueeze(0)
        keys = keys.unsqueeze(0)
    n_l = queries.shape[1]
    rb, nb, _, _, valid = _block_geometry(n_l, r)
    pad_tail = nb * rb - n_l
    q_blocks = torch.cat(
        [queries, queries.new_zeros((queries.shape[0], pad_tail, queries.shape[2]))],
        dim=1,
    ).reshape(queries.shape[0], nb, rb, queries.shape[2])
    k_windows = _window_blocks(keys, rb, nb)
    scores = torch.einsum("hbqd,hbkd->hbqk", q_blocks, k_windows)
    if squeeze:
        scores = scores.squeeze(0)
    return scores, valid


def global_local_attention(
    x_g: Tensor,
    x_l: Tensor,
    params: AttentionParams,
    masks: PieceMasks,
    labels: PieceLabels,
    vocab: RelativeVocab,
    r: int,
) -> tuple[Tensor, Tensor]:
    """Efficient forward pass; same outputs as the dense reference.

    The l2l piece is computed blockwise, so the band restriction never
    materializes an n_l x n_l score matrix. Per-instance l2l mask entries
    are gathered at the blocked positions and intersected with the band.
    """
    n_g, n_l = x_g.shape[0], x_l.shape[0]
    masks.validate(n_g, n_l)
    h = params.heads
    gp, lp = params.global_proj, params.long_proj
    dtype = x_l.dtype if n_l else x_g.dtype

    # Global rows see few keys; the dense row group is already linear in n_l.
    if n_g:
        q_g = _project(x_g, gp.wq, gp.bq, h)
        keys = torch.cat(
            [_project(x_g, gp.wk, gp.bk, h), _project(x_l, gp.wk, gp.bk, h)], dim=1
        )
        vals = torch.cat(
            [_project(x_g, gp.wv, gp.bv, h), _project(x_l, gp.wv, gp.bv, h)], dim=1
        )
        lab = torch.cat([labels.g2g, labels.g2l], dim=1)
        msk = torch.cat([masks.g2g, masks.g2l], dim=1)
        z_g = _merge_heads(_row_group(q_g, keys, vals, lab, msk, vocab)) @ gp.wo + gp.bo
    else:
        z_g = x_g.new_zeros((0, gp.wo.shape[1]))

    if not n_l:
        return z_g, x_l.new_zeros((0, lp.wo.shape[1]))

    d_z = params.long_proj.wq.shape[1] // h
    scale = math.sqrt(d_z)
    q_l = _project(x_l, lp.wq, lp.bq, h)
    k_long = _project(x_l, lp.wk, lp.bk, h)
    v_long = _project(x_l, lp.wv, lp.bv, h)

    rb, nb, q_idx, k_idx, valid = _block_geometry(n_l, r)
    pad_tail = nb * rb - n_l
    i_safe = q_idx.clamp(max=n_l - 1)
    j_safe = k_idx.clamp(min=0, max=n_l - 1)

    # Head-independent blocked layout: per-instance l2l mask entries and
    # label ids gathered at the block positions, intersected with the band.
    label_w = labels.l2l[i_safe.unsqueeze(2), j_safe.unsqueeze(1)]
    if label_w.numel() and (label_w.min() < 0 or label_w.max() >= vocab.size):
        raise ValueError(f"label id out of range for vocabulary of size {vocab.size}")
    mask_w = masks.l2l[i_safe.unsqueeze(2), j_safe.unsqueeze(1)] & valid
    mask_term_ll = _mask_term(mask_w, dtype)
    if n_g:
        k_glob = _project(x_g, lp.wk, lp.bk, h)
        v_glob = _project(x_g, lp.wv, lp.bv, h)
        if labels.l2g.numel() and (
            labels.l2g.min() < 0 or labels.l2g.max() >= vocab.size
        ):
            raise ValueError(
                f"label id out of range for vocabulary of size {vocab.size}"
            )
        mask_term_lg = _mask_term(masks.l2g, dtype)

    # One head at a time: the peak working set stays at one block-score
    # tensor regardless of the head count.
    head_outputs = []
    for head in range(h):
        per_label = q_l[head] @ vocab.vectors[head].T  # [n_l, num_labels]
        raw_ll, _ = blocked_local_scores(q_l[head], k_long[head], r)
        qa_blocks = torch.cat(
            [per_label, per_label.new_zeros((pad_tail, vocab.size))]
        ).reshape(nb, rb, vocab.size)
        e_ll = (raw_ll + qa_blocks.gather(2, label_w)) / scale - mask_term_ll
        if n_g:
            bias_lg = per_label.gather(1, labels.l2g)
            e_lg = (q_l[head] @ k_glob[head].T + bias_lg) / scale - mask_term_lg
            # Line the dense l2g rows up with the block layout; padded query
            # rows get fully-masked scores and are dropped after the softmax.
            e_lg = torch.cat(
                [e_lg, e_lg.new_full((pad_tail, n_g), -MASK_CONSTANT)]
            ).reshape(nb, rb, n_g)
        else:
            e_lg = e_ll.new_zeros((nb, rb, 0))
        alpha = masked_softmax(torch.cat([e_lg, e_ll], dim=2))
        v_windows = _window_blocks(v_long[head : head + 1], rb, nb)[0]
        z = torch.matmul(alpha[..., n_g:], v_windows)
        if n_g:
            z = z + torch.matmul(alpha[..., :n_g], v_glob[head])
        head_outputs.append(z.reshape(nb * rb, d_z)[:n_l])
    z_l = torch.cat(head_outputs, dim=1) @ lp.wo + lp.bo
    return z_g, z_l

"""Slow independent reference implementations.

Everything here exists only to cross-check the fast paths: scalar loops in
double precision, written directly from the defining formulas without
sharing code with the production implementations.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .attention import AttentionParams, PieceLabels, PieceMasks
from .core import MASK_CONSTANT
from .relative import RelativeVocab


def scalar_gelu(x: float) -> float:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + math.tanh(c * (x + 0.044715 * x**3)))


def scalar_layer_norm(
    x: list[float], gain: list[float], bias: list[float], eps: float
) -> list[float]:
    d = len(x)
    mean = sum(x) / d
    var = sum((v - mean) ** 2 for v in x) / d
    return [gain[i] * (x[i] - mean) / math.sqrt(var + eps) + bias[i] for i in range(d)]


def scalar_feed_forward(
    x: list[float],
    w1: list[list[float]],
    b1: list[float],
    w2: list[list[float]],
    b2: list[float],
) -> list[float]:
    hidden = [
        scalar_gelu(sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j])
        for j in range(len(b1))
    ]
    return [
        sum(hidden[j] * w2[j][i] for j in range(len(hidden))) + b2[i]
        for i in range(len(b2))
    ]


def scalar_softmax_guarded(scores: list[float]) -> list[float]:
    top = max(scores)
    if top <= -MASK_CONSTANT / 2.0:
        return [0.0] * len(scores)
    exps = [math.exp(s - top) for s in scores]
    z = sum(exps)
    return [e / z for e in exps]


def scalar_cross_entropy(logits: list[list[float]], targets: list[int]) -> float:
    total = 0.0
    for row, target in zip(logits, targets):
        top = max(row)
        log_z = top + math.log(sum(math.exp(v - top) for v in row))
        total += log_z - row[target]
    return total / len(logits)


def naive_relative_bias(
    queries: Tensor, labels: Tensor, vocab: RelativeVocab, head: int
) -> Tensor:
    """Materialize the per-pair label vector and take each dot product."""
    n, m = labels.shape
    out = torch.zeros(n, m, dtype=queries.dtype)
    for i in range(n):
        for j in range(m):
            out[i, j] = torch.dot(queries[i], vocab.vectors[head, labels[i, j]])
    return out


def _project_rows(x: list[list[float]], w: list[list[float]], b: list[float]) -> list[list[float]]:
    return [
        [sum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]
        for row in x
    ]


def loop_attention(
    x_g: Tensor,
    x_l: Tensor,
    params: AttentionParams,
    masks: PieceMasks,
    labels: PieceLabels,
    vocab: RelativeVocab,
) -> tuple[Tensor, Tensor]:
    """Per-pair four-loop oracle for global-local attention (double precision).

    Expects masks that already include the l2l band restriction, like the
    dense reference.
    """
    h = params.heads
    d_x = params.global_proj.wq.shape[0]
    d_z = d_x // h
    vectors = vocab.vectors.to(torch.float64).tolist()

    def run_rows(x_rows, proj, row_masks, row_labels, keys_x):
        w = {
            name: tensor.to(torch.float64).tolist()
            for name, tensor in (
                ("wq", proj.wq), ("bq", proj.bq), ("wk", proj.wk), ("bk", proj.bk),
                ("wv", proj.wv), ("bv", proj.bv), ("wo", proj.wo), ("bo", proj.bo),
            )
        }
        queries = _project_rows(x_rows, w["wq"], w["bq"])
        keys = _project_rows(keys_x, w["wk"], w["bk"])
        values = _project_rows(keys_x, w["wv"], w["bv"])
        out_rows = []
        for i, q in enumerate(queries):
            merged = []
            for head in range(h):
                lo = head * d_z
                scores = []
                for j, k in enumerate(keys):
                    a = vectors[head][row_labels[i][j]]
                    dot = sum(
                        q[lo + t] * (k[lo + t] + a[t]) for t in range(d_z)
                    )
                    e = dot / math.sqrt(d_z)
                    if not row_masks[i][j]:
                        e -= MASK_CONSTANT
                    scores.append(e)
                alpha = scalar_softmax_guarded(scores)
                merged.extend(
                    sum(alpha[j] * values[j][lo + t] for j in range(len(values)))
                    for t in range(d_z)
                )
            out_rows.append(
                [
                    sum(merged[s] * w["wo"][s][t] for s in range(d_x)) + w["bo"][t]
                    for t in range(d_x)
                ]
            )
        return out_rows

    g_rows = x_g.to(torch.float64).tolist()
    l_rows = x_l.to(torch.float64).tolist()
    all_rows = g_rows + l_rows

    z_g = run_rows(
        g_rows,
        params.global_proj,
        torch.cat([masks.g2g, masks.g2l], dim=1).tolist(),
        torch.cat([labels.g2g, labels.g2l], dim=1).tolist(),
        all_rows,
    )
    z_l = run_rows(
        l_rows,
        params.long_proj,
        torch.cat([masks.l2g, masks.l2l], dim=1).tolist(),
        torch.cat([labels.l2g, labels.l2l], dim=1).tolist(),
        all_rows,
    )
    return (
        torch.tensor(z_g, dtype=torch.float64).reshape(len(g_rows), d_x),
        torch.tensor(z_l, dtype=torch.float64).reshape(len(l_rows), d_x),
    )


def band_softmax_attention(queries: Tensor, keys: Tensor, r: int) -> Tensor:
    """Dense banded attention probabilities: softmax over |i-j| <= r only."""
    n = queries.shape[0]
    q = queries.to(torch.float64)
    k = keys.to(torch.float64)
    out = torch.zeros(n, n, dtype=torch.float64)
    for i in range(n):
        cols = [j for j in range(n) if abs(i - j) <= r]
        scores = [float(torch.dot(q[i], k[j])) for j in cols]
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        z = sum(exps)
        for j, e in zip(cols, exps):
            out[i, j] = e / z
    return out


def reference_transformer_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
    heads: int,
    labels: Tensor | None = None,
    vectors: Tensor | None = None,
) -> Tensor:
    """Standard dense multi-head self-attention, optionally with relative
    label bias; written head by head, independent of the production path."""
    n, d = x.shape
    d_z = d // heads
    q_all = x @ wq + bq
    k_all = x @ wk + bk
    v_all = x @ wv + bv
    merged = torch.zeros_like(x)
    for head in range(heads):
        lo = head * d_z
        q = q_all[:, lo : lo + d_z]
        k = k_all[:, lo : lo + d_z]
        v = v_all[:, lo : lo + d_z]
        scores = q @ k.T
        if labels is not None:
            scores = scores + (q @ vectors[head].T).gather(1, labels)
        scores = scores / math.sqrt(d_z)
        alpha = torch.softmax(scores, dim=1)
        merged[:, lo : lo + d_z] = alpha @ v
    return merged @ wo + bo


def _reference_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return gain * (x - mean) * (var + eps).rsqrt() + bias


def reference_bert_encoder(
    embeddings: Tensor,
    weights: dict[str, Tensor],
    layers: int,
    heads: int,
    eps: float = 1e-12,
) -> Tensor:
    """Plain post-layer-norm transformer encoder built from named tensors.

    Used to check that lifted weights reproduce the source model's forward
    pass in all-global mode. ``weights`` uses the BERT-format names.
    """
    c = math.sqrt(2.0 / math.pi)
    h = embeddings
    for i in range(layers):
        w = lambda suffix: weights[f"layer_{i}/{suffix}"]  # noqa: E731
        attn = reference_transformer_attention(
            h,
            w("attention/query/kernel"), w("attention/query/bias"),
            w("attention/key/kernel"), w("attention/key/bias"),
            w("attention/value/kernel"), w("attention/value/bias"),
            w("attention/output/kernel"), w("attention/output/bias"),
            heads,
        )
        h = _reference_layer_norm(
            h + attn,
            w("attention/output/layer_norm/gain"),
            w("attention/output/layer_norm/bias"),
            eps,
        )
        inner = h @ w("ffn/intermediate/kernel") + w("ffn/intermediate/bias")
        inner = 0.5 * inner * (1.0 + torch.tanh(c * (inner + 0.044715 * inner**3)))
        ffn = inner @ w("ffn/output/kernel") + w("ffn/output/bias")
        h = _reference_layer_norm(
            h + ffn,
            w("ffn/output/layer_norm/gain"),
            w("ffn/output/layer_norm/bias"),
            eps,
        )
    return h


def brute_force_nce(g1: Tensor, g2: Tensor, projection: Tensor) -> float:
    """Enumerate every pair score and average the positive log-losses."""
    b, d = g1.shape
    p1 = g1.detach().to(torch.float64) @ projection.detach().to(torch.float64)
    g2d = g2.detach().to(torch.float64)
    losses = []
    for s in range(b):
        scores = [
            float(torch.dot(p1[s], g2d[t])) / math.sqrt(d) for t in range(b)
        ]
        top = max(scores)
        log_z = top + math.log(sum(math.exp(v - top) for v in scores))
        losses.append(log_z - scores[s])
    return sum(losses) / b


def enumerate_scored_pairs(n_g: int, n_l: int, r: int) -> int:
    """Row-by-row enumeration of scored key slots.

    Every global row is scored against all n_g + n_l keys; every long row
    against the n_g global keys plus its 2r+1 window slots, capped at the
    sequence length.
    """
    total = n_g * (n_g + n_l)
    for _ in range(n_l):
        total += n_g + min(2 * r + 1, n_l)
    return total

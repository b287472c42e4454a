"""Pre-training: whole-word-masked MLM and the sentence-level CPC loss.

Per step, 10% of sentences are masked wholesale for CPC (their summary
tokens stay in the global input), then 15% of the remaining words are
masked for MLM with the usual 80/10/10 mask/random/keep split. The two
losses combine as 0.8 * MLM + 0.2 * CPC.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor

from .config import ModelConfig
from .core import gelu, layer_norm
from .encoder import EncoderInput, ParameterSet, SentenceSpan, encode
from .structure import BuildOptions, Sentence, build_flat_input

MLM_WEIGHT = 0.8
CPC_WEIGHT = 0.2
MLM_RATE = 0.15
CPC_RATE = 0.10


class TrainingDivergence(RuntimeError):
    """Raised when a step produces a non-finite loss."""


class MlmTargets(NamedTuple):
    positions: Tensor  # long [m]
    ids: Tensor  # long [m], original token ids


class MlmLoss(NamedTuple):
    loss: Tensor
    num_targets: int


@dataclass
class CpcSentence:
    """A masked sentence: where its summary row sits and its original tokens."""

    item: int
    global_row: int
    start: int
    end: int
    piece_ids: Tensor
    word_starts: Tensor


@dataclass
class MaskedBatch:
    inputs: list[EncoderInput]
    mlm: list[MlmTargets]
    cpc: list[CpcSentence]


def select_cpc_sentences(
    spans: Sequence[SentenceSpan], rate: float, rng: np.random.Generator
) -> set[int]:
    """Pick each sentence independently with the given probability."""
    if not spans:
        raise ValueError("no sentences")
    return {i for i in range(len(spans)) if rng.random() < rate}


def whole_word_mask(
    long_ids: Tensor,
    word_starts: Tensor,
    rate: float,
    rng: np.random.Generator,
    config: ModelConfig,
    exclude: Tensor | None = None,
) -> tuple[Tensor, MlmTargets]:
    """Sample whole words at ``rate`` and mask every piece of each one.

    Each piece of a sampled word independently receives the 80/10/10
    mask/random/keep treatment, but all pieces become prediction targets.
    Words overlapping ``exclude`` (already claimed by CPC) are skipped.
    """
    n = long_ids.shape[0]
    if word_starts.shape[0] != n:
        raise ValueError("word boundary markers do not partition the long input")
    masked = long_ids.clone()
    positions: list[int] = []
    originals: list[int] = []

    words: list[list[int]] = []
    for i in range(n):
        if bool(word_starts[i]) or not words:
            words.append([i])
        else:
            words[-1].append(i)

    for word in words:
        if exclude is not None and any(bool(exclude[i]) for i in word):
            continue
        if rng.random() >= rate:
            continue
        for i in word:
            positions.append(i)
            originals.append(int(long_ids[i]))
            u = rng.random()
            if u < 0.8:
                masked[i] = config.mask_id
            elif u < 0.9:
                masked[i] = int(
                    rng.integers(config.first_regular_id, config.vocab_size)
                )
            # else: keep the original piece
    return masked, MlmTargets(
        torch.tensor(positions, dtype=torch.long),
        torch.tensor(originals, dtype=torch.long),
    )


def prepare_masked_batch(
    inputs: list[EncoderInput],
    config: ModelConfig,
    rngs: Sequence[np.random.Generator],
    cpc_rate: float = CPC_RATE,
    mlm_rate: float = MLM_RATE,
) -> MaskedBatch:
    """Apply CPC sentence masking then whole-word MLM masking to a batch."""
    if len(rngs) != len(inputs):
        raise ValueError("need one rng stream per batch item")
    masked_inputs: list[EncoderInput] = []
    mlm: list[MlmTargets] = []
    cpc: list[CpcSentence] = []
    for item, (inp, rng) in enumerate(zip(inputs, rngs)):
        selected = select_cpc_sentences(inp.sentence_spans, cpc_rate, rng)
        exclude = torch.zeros(inp.n_long, dtype=torch.bool)
        for idx in sorted(selected):
            span = inp.sentence_spans[idx]
            exclude[span.start : span.end] = True
            cpc.append(
                CpcSentence(
                    item=item,
                    global_row=span.global_row,
                    start=span.start,
                    end=span.end,
                    piece_ids=inp.long_ids[span.start : span.end].clone(),
                    word_starts=inp.word_starts[span.start : span.end].clone(),
                )
            )
        ids, targets = whole_word_mask(
            inp.long_ids, inp.word_starts, mlm_rate, rng, config, exclude=exclude
        )
        ids = torch.where(exclude, torch.full_like(ids, config.mask_id), ids)
        masked_inputs.append(inp.with_long_ids(ids))
        mlm.append(targets)
    return MaskedBatch(masked_inputs, mlm, cpc)


def mlm_logits(rows: Tensor, params: ParameterSet) -> Tensor:
    """MLM head: transform + layer norm + tied output embedding."""
    t = gelu(rows @ params.mlm_transform_w + params.mlm_transform_b)
    t = layer_norm(t, params.mlm_ln_gain, params.mlm_ln_bias, params.config.layer_norm_eps)
    return t @ params.token_embedding.T + params.mlm_output_bias


def _cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    log_z = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, targets.unsqueeze(1)).squeeze(1)
    return (log_z - picked).mean()


def mlm_loss(h_l: Tensor, targets: MlmTargets, params: ParameterSet) -> MlmLoss:
    """Mean cross-entropy of the MLM head at the target positions.

    Empty targets yield a zero loss with ``num_targets == 0`` as the flag.
    """
    if targets.positions.numel() == 0:
        return MlmLoss(h_l.new_zeros(()), 0)
    logits = mlm_logits(h_l[targets.positions], params)
    return MlmLoss(_cross_entropy(logits, targets.ids), int(targets.positions.numel()))


def cpc_nce_loss(g1: Tensor, g2: Tensor, params: ParameterSet) -> Tensor:
    """Noise-contrastive loss over within-batch negatives.

    ``g1`` holds the summary rows of the masked sentences from the full
    encoder pass, ``g2`` the summary of each sentence encoded in isolation
    with the same weights. Row s is scored against every g2 row with the
    log-bilinear score (P g1_s) . g2_t / sqrt(d), and the positive pair sits
    on the diagonal.
    """
    b = g1.shape[0]
    if b != g2.shape[0]:
        raise ValueError("g1/g2 row counts differ")
    if b < 2:
        raise ValueError("need negatives")
    scores = (g1 @ params.cpc_projection) @ g2.T / math.sqrt(g1.shape[1])
    return _cross_entropy(scores, torch.arange(b))


def encode_cpc_candidates(
    batch: MaskedBatch,
    params: ParameterSet,
    encoded_global: list[Tensor],
    stop_gradient_targets: bool = False,
) -> tuple[Tensor, Tensor] | None:
    """Collect (g1, g2) rows for every masked sentence in the batch."""
    if not batch.cpc:
        return None
    config = params.config
    g1 = torch.stack([encoded_global[c.item][c.global_row] for c in batch.cpc])
    g2_rows = []
    for c in batch.cpc:
        sentence = Sentence(
            [int(t) for t in c.piece_ids], [bool(w) for w in c.word_starts]
        )
        isolated = build_flat_input([sentence], config, BuildOptions())
        h_g, _ = encode(isolated, params)
        g2_rows.append(h_g[0])
    g2 = torch.stack(g2_rows)
    if stop_gradient_targets:
        g2 = g2.detach()
    return g1, g2


def combine_losses(mlm: Tensor | float, cpc: Tensor | float) -> Tensor | float:
    return MLM_WEIGHT * mlm + CPC_WEIGHT * cpc


@dataclass
class StepMetrics:
    step: int
    mlm_loss: float
    cpc_loss: float
    total: float
    wall_ms: float
    num_mlm_targets: int
    num_cpc: int
    mlm_empty: bool = False
    cpc_skipped: bool = False

    @property
    def ln_b(self) -> float:
        return math.log(self.num_cpc) if self.num_cpc >= 2 else float("nan")


def batch_losses(
    batch: MaskedBatch,
    params: ParameterSet,
    stop_gradient_targets: bool = False,
) -> tuple[Tensor, Tensor | None, int, int]:
    """(mlm, cpc, num_mlm_targets, num_cpc) for one masked batch."""
    rows = []
    ids = []
    encoded_global: list[Tensor] = []
    for inp, targets in zip(batch.inputs, batch.mlm):
        h_g, h_l = encode(inp, params)
        encoded_global.append(h_g)
        if targets.positions.numel():
            rows.append(h_l[targets.positions])
            ids.append(targets.ids)
    if rows:
        pooled = torch.cat(rows)
        m = mlm_loss(pooled, MlmTargets(torch.arange(pooled.shape[0]), torch.cat(ids)), params)
        mlm_value, num_mlm = m.loss, m.num_targets
    else:
        mlm_value, num_mlm = params.token_embedding.new_zeros(()), 0

    pair = encode_cpc_candidates(batch, params, encoded_global, stop_gradient_targets)
    if pair is not None and pair[0].shape[0] >= 2:
        cpc_value: Tensor | None = cpc_nce_loss(pair[0], pair[1], params)
        num_cpc = pair[0].shape[0]
    else:
        cpc_value = None
        num_cpc = 0 if pair is None else pair[0].shape[0]
    return mlm_value, cpc_value, num_mlm, num_cpc


def pretrain_step(
    batch: MaskedBatch,
    params: ParameterSet,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
    stop_gradient_targets: bool = False,
) -> StepMetrics:
    """One combined-loss update. Aborts (no update) on a non-finite loss.

    A batch with fewer than two masked sentences carries no CPC term; the
    metrics flag it instead of failing the step.
    """
    started = time.perf_counter()
    mlm_value, cpc_value, num_mlm, num_cpc = batch_losses(
        batch, params, stop_gradient_targets
    )
    cpc_term = cpc_value if cpc_value is not None else mlm_value.new_zeros(())
    total = combine_losses(mlm_value, cpc_term)
    if not torch.isfinite(total):
        raise TrainingDivergence(
            f"non-finite loss at step {step}: mlm={float(mlm_value.detach())} "
            f"cpc={float(cpc_term.detach())}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepMetrics(
        step=step,
        mlm_loss=float(mlm_value.detach()),
        cpc_loss=float(cpc_term.detach()),
        total=float(total.detach()),
        wall_ms=(time.perf_counter() - started) * 1000.0,
        num_mlm_targets=num_mlm,
        num_cpc=num_cpc,
        mlm_empty=num_mlm == 0,
        cpc_skipped=cpc_value is None,
    )


@dataclass
class Trainer:
    """Deterministic desk-scale training loop over pre-built inputs."""

    params: ParameterSet
    inputs: list[EncoderInput]
    seed: int = 0
    batch_size: int = 4
    learning_rate: float = 1e-4
    cpc_rate: float = CPC_RATE
    mlm_rate: float = MLM_RATE
    stop_gradient_targets: bool = False
    optimizer: torch.optim.Optimizer = field(init=False)
    _cursor: int = field(init=False, default=0)
    _step: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if not self.inputs:
            raise ValueError("no training inputs")
        self.optimizer = torch.optim.Adam(
            [t for _, t in self.params.named_tensors()],
            lr=self.learning_rate,
            betas=(0.9, 0.999),
        )

    def next_batch(self) -> list[EncoderInput]:
        batch = []
        for _ in range(min(self.batch_size, len(self.inputs))):
            batch.append(self.inputs[self._cursor])
            self._cursor = (self._cursor + 1) % len(self.inputs)
        return batch

    def step(self) -> StepMetrics:
        raw = self.next_batch()
        rngs = [
            np.random.default_rng([self.seed, self._step, item])
            for item in range(len(raw))
        ]
        batch = prepare_masked_batch(
            raw, self.params.config, rngs, cpc_rate=self.cpc_rate, mlm_rate=self.mlm_rate
        )
        metrics = pretrain_step(
            batch,
            self.params,
            self.optimizer,
            step=self._step,
            stop_gradient_targets=self.stop_gradient_targets,
        )
        self._step += 1
        return metrics

    def run(self, steps: int) -> list[StepMetrics]:
        return [self.step() for _ in range(steps)]


def corpus_to_inputs(
    text: str,
    config: ModelConfig,
    min_sentences: int = 7,
    options: BuildOptions | None = None,
) -> list[EncoderInput]:
    """Tokenize a raw corpus, filter short documents, and pack the rest."""
    from .structure import document_from_text, pack_documents, split_documents

    docs = [document_from_text(block, config) for block in split_documents(text)]
    docs = [doc for doc in docs if len(doc) >= min_sentences]
    if not docs:
        raise ValueError(
            f"empty corpus after filtering documents with < {min_sentences} sentences"
        )
    return pack_documents(docs, config, options)


def load_toy_corpus() -> str:
    """The small bundled corpus used for smoke training."""
    from importlib import resources

    return (
        resources.files("glenc").joinpath("data/toy_corpus.txt").read_text("utf-8")
    )

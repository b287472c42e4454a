"""Compile documents into encoder inputs.

The long input holds the word piece tokens; the global input holds one
summary token per sentence (plus context and candidate tokens for
hierarchical documents). Membership between summaries and their tokens is
expressed through relative position labels, hierarchy through masks, and
multiple short documents can be packed into one input with masks keeping
them fully isolated.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .attention import PieceLabels, PieceMasks
from .config import ModelConfig
from .encoder import EncoderInput, SentenceSpan
from .relative import RelativeVocab, sequence_relative_labels


@dataclass
class Sentence:
    piece_ids: list[int]
    word_starts: list[bool]

    def __post_init__(self) -> None:
        if len(self.piece_ids) != len(self.word_starts):
            raise ValueError("piece_ids and word_starts lengths differ")

    def __len__(self) -> int:
        return len(self.piece_ids)

    @classmethod
    def of_words(cls, piece_ids: list[int]) -> "Sentence":
        """Every piece its own word; convenient for synthetic tests."""
        return cls(piece_ids, [True] * len(piece_ids))


@dataclass
class MentionLink:
    """Ties a candidate's global token to a token span in the long input."""

    candidate: int
    start: int
    end: int
    label: str = "mention-link"


@dataclass
class StructuredDocument:
    contexts: list[list[Sentence]]
    mention_links: list[MentionLink] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.contexts or any(not ctx for ctx in self.contexts):
            raise ValueError("document must have nonempty contexts")

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for ctx in self.contexts for s in ctx)

    @property
    def num_sentences(self) -> int:
        return sum(len(ctx) for ctx in self.contexts)


@dataclass
class BuildOptions:
    hard_g2l: bool = False
    flat_structure: bool = False
    order_between_contexts: bool = False


# ---------------------------------------------------------------------------
# Text ingestion


def split_documents(text: str) -> list[str]:
    """Blank-line separated blocks of UTF-8 text."""
    blocks = re.split(r"\n\s*\n", text.strip())
    return [b for b in blocks if b.strip()]


def split_sentences(block: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+", block.strip())
    return [p for p in parts if p and not re.fullmatch(r"[.!?\s]*", p)]


def word_pieces(word: str) -> list[str]:
    """Deterministic word piece split: 4-character chunks, '##' continuations."""
    if len(word) <= 4:
        return [word]
    pieces = [word[:4]]
    for i in range(4, len(word), 4):
        pieces.append("##" + word[i : i + 4])
    return pieces


def piece_to_id(piece: str, config: ModelConfig) -> int:
    """Stable hash-bucket id in the regular token range."""
    span = config.vocab_size - config.first_regular_id
    if span <= 0:
        raise ValueError("vocabulary leaves no room for regular tokens")
    return config.first_regular_id + zlib.crc32(piece.encode("utf-8")) % span


def tokenize_sentence(text: str, config: ModelConfig) -> Sentence:
    ids: list[int] = []
    starts: list[bool] = []
    for word in text.lower().split():
        for j, piece in enumerate(word_pieces(word)):
            ids.append(piece_to_id(piece, config))
            starts.append(j == 0)
    if not ids:
        raise ValueError(f"sentence has no tokens: {text!r}")
    return Sentence(ids, starts)


def document_from_text(block: str, config: ModelConfig) -> list[Sentence]:
    return [tokenize_sentence(s, config) for s in split_sentences(block)]


# ---------------------------------------------------------------------------
# Input builders


def _full_masks(n_g: int, n_l: int) -> PieceMasks:
    return PieceMasks(
        g2g=torch.ones(n_g, n_g, dtype=torch.bool),
        g2l=torch.ones(n_g, n_l, dtype=torch.bool),
        l2g=torch.ones(n_l, n_g, dtype=torch.bool),
        l2l=torch.ones(n_l, n_l, dtype=torch.bool),
    )


def _sentence_layout(sentences: list[Sentence]) -> list[tuple[int, int]]:
    spans = []
    pos = 0
    for s in sentences:
        spans.append((pos, pos + len(s)))
        pos += len(s)
    return spans


def build_flat_input(
    sentences: list[Sentence],
    config: ModelConfig,
    options: BuildOptions | None = None,
) -> EncoderInput:
    """Long input = concatenated tokens, one sentence summary token each.

    Summary/token membership is labeled "segment-member" on a summary row's
    own tokens and "segment-nonmember" elsewhere; with ``hard_g2l`` the g2l
    mask is additionally restricted to member positions (l2g is left
    untouched).
    """
    options = options or BuildOptions()
    if not sentences:
        raise ValueError("no sentences")
    vocab = RelativeVocab.for_config(config)
    n_g = len(sentences)
    n_l = sum(len(s) for s in sentences)
    if n_l > config.max_long or n_g > config.max_global:
        raise ValueError(
            f"input overflow: {n_l} tokens (limit {config.max_long}), "
            f"{n_g} sentences (limit {config.max_global})"
        )

    member = vocab.structural_id("segment-member")
    nonmember = vocab.structural_id("segment-nonmember")
    spans = _sentence_layout(sentences)

    g2l = torch.full((n_g, n_l), nonmember, dtype=torch.long)
    for row, (start, end) in enumerate(spans):
        g2l[row, start:end] = member

    k = config.clip_distance
    labels = PieceLabels(
        g2g=sequence_relative_labels(n_g, n_g, 0, k),
        g2l=g2l,
        l2g=g2l.T.contiguous(),
        l2l=sequence_relative_labels(n_l, n_l, 0, k),
    )
    masks = _full_masks(n_g, n_l)
    if options.hard_g2l:
        masks.g2l = labels.g2l == member

    word_starts = torch.tensor(
        [flag for s in sentences for flag in s.word_starts], dtype=torch.bool
    )
    return EncoderInput(
        global_ids=torch.full((n_g,), config.global_token_ids["sentence"], dtype=torch.long),
        long_ids=torch.tensor(
            [t for s in sentences for t in s.piece_ids], dtype=torch.long
        ),
        masks=masks,
        labels=labels,
        word_starts=word_starts,
        sentence_spans=[
            SentenceSpan(row, start, end) for row, (start, end) in enumerate(spans)
        ],
        global_roles=["sentence"] * n_g,
    )


def build_hierarchical_input(
    doc: StructuredDocument,
    options: BuildOptions,
    config: ModelConfig,
) -> EncoderInput:
    """Context/sentence/token hierarchy with unordered contexts.

    Global layout: candidate tokens first (when mention links exist), then
    for each context its context summary token followed by its sentence
    summary tokens. Sentence order within a context is carried by sequence
    labels; pairs across contexts get the "unordered" label unless
    ``order_between_contexts`` is set. With ``flat_structure`` the l2l mask
    is not broken at context boundaries and g2l labels keep only sentence
    membership (context and mention labels are dropped).
    """
    vocab = RelativeVocab.for_config(config)
    member = vocab.structural_id("segment-member")
    nonmember = vocab.structural_id("segment-nonmember")
    unordered = vocab.structural_id("unordered")
    k = config.clip_distance

    num_candidates = (
        max(link.candidate for link in doc.mention_links) + 1 if doc.mention_links else 0
    )
    for link in doc.mention_links:
        if link.candidate < 0:
            raise ValueError("candidate index must be >= 0")
        vocab.structural_id(link.label)  # unknown structural label -> error

    # Global layout bookkeeping: per row (role, context index or -1).
    roles: list[str] = ["candidate"] * num_candidates
    row_context: list[int] = [-1] * num_candidates
    sentence_rows: list[tuple[int, int, int]] = []  # (row, start, end)
    context_rows: list[tuple[int, int, int]] = []
    token_context: list[int] = []

    pos = 0
    for c, ctx in enumerate(doc.contexts):
        context_start = pos
        context_row = len(roles)
        roles.append("context")
        row_context.append(c)
        for s in ctx:
            sentence_rows.append((len(roles), pos, pos + len(s)))
            roles.append("sentence")
            row_context.append(c)
            token_context.extend([c] * len(s))
            pos += len(s)
        context_rows.append((context_row, context_start, pos))

    n_g = len(roles)
    n_l = pos
    if n_l > config.max_long or n_g > config.max_global:
        raise ValueError(
            f"input overflow: {n_l} tokens (limit {config.max_long}), "
            f"{n_g} global rows (limit {config.max_global})"
        )
    for link in doc.mention_links:
        if not (0 <= link.start <= link.end <= n_l):
            raise ValueError(f"mention span ({link.start}, {link.end}) out of range")

    # g2g labels: sequence offsets inside a context (or everywhere when
    # contexts are ordered), "unordered" across contexts and for candidates,
    # membership between a context token and its sentence tokens.
    row_ctx = torch.tensor(row_context, dtype=torch.long)
    summary = row_ctx.unsqueeze(1) >= 0
    same_ctx = (row_ctx.unsqueeze(1) == row_ctx.unsqueeze(0)) & summary
    if options.order_between_contexts:
        sequenced = summary & (row_ctx.unsqueeze(0) >= 0)
    else:
        sequenced = same_ctx
    seq = sequence_relative_labels(n_g, n_g, 0, k)
    g2g = torch.where(
        sequenced, seq, torch.full((n_g, n_g), unordered, dtype=torch.long)
    )
    for row, _, _ in context_rows:
        for s_row, _, _ in sentence_rows:
            if row_context[s_row] == row_context[row]:
                g2g[row, s_row] = member
                g2g[s_row, row] = member
    g2g.fill_diagonal_(vocab.sequence_id(0))

    # g2l / l2g labels.
    g2l = torch.full((n_g, n_l), nonmember, dtype=torch.long)
    for row, start, end in sentence_rows:
        g2l[row, start:end] = member
    if not options.flat_structure:
        for row, start, end in context_rows:
            g2l[row, start:end] = member
        for link in doc.mention_links:
            g2l[link.candidate, link.start : link.end] = vocab.structural_id(link.label)
    labels = PieceLabels(
        g2g=g2g,
        g2l=g2l,
        l2g=g2l.T.contiguous(),
        l2l=sequence_relative_labels(n_l, n_l, 0, k),
    )

    masks = _full_masks(n_g, n_l)
    if not options.flat_structure:
        tok_ctx = torch.tensor(token_context, dtype=torch.long)
        masks.l2l = tok_ctx.unsqueeze(1) == tok_ctx.unsqueeze(0)
    if options.hard_g2l:
        masks.g2l = labels.g2l != nonmember

    long_ids = torch.tensor(
        [t for ctx in doc.contexts for s in ctx for t in s.piece_ids], dtype=torch.long
    )
    word_starts = torch.tensor(
        [f for ctx in doc.contexts for s in ctx for f in s.word_starts], dtype=torch.bool
    )
    ids = config.global_token_ids
    global_ids = torch.tensor(
        [ids[role] for role in roles], dtype=torch.long
    )
    return EncoderInput(
        global_ids=global_ids,
        long_ids=long_ids,
        masks=masks,
        labels=labels,
        word_starts=word_starts,
        sentence_spans=[SentenceSpan(*row) for row in sentence_rows],
        global_roles=roles,
    )


def truncate_structured(doc: StructuredDocument, config: ModelConfig) -> StructuredDocument:
    """Drop trailing sentences of the largest context until the input fits."""
    num_candidates = (
        max(link.candidate for link in doc.mention_links) + 1 if doc.mention_links else 0
    )
    contexts = [list(ctx) for ctx in doc.contexts]

    def fits() -> bool:
        tokens = sum(len(s) for ctx in contexts for s in ctx)
        rows = num_candidates + sum(1 + len(ctx) for ctx in contexts if ctx)
        return tokens <= config.max_long and rows <= config.max_global

    while not fits():
        largest = max(
            (i for i, ctx in enumerate(contexts) if ctx),
            key=lambda i: (len(contexts[i]), i),
            default=None,
        )
        if largest is None:
            raise ValueError("document cannot be truncated to fit")
        contexts[largest].pop()
        if not any(contexts):
            raise ValueError("document cannot be truncated to fit")

    kept_tokens = sum(len(s) for ctx in contexts for s in ctx)
    links = [link for link in doc.mention_links if link.end <= kept_tokens]
    return StructuredDocument([ctx for ctx in contexts if ctx], links)


# ---------------------------------------------------------------------------
# Document packing


def _split_to_fit(doc: list[Sentence], config: ModelConfig) -> list[list[Sentence]]:
    chunks: list[list[Sentence]] = []
    current: list[Sentence] = []
    tokens = 0
    for s in doc:
        if len(s) > config.max_long:
            raise ValueError(
                f"sentence of {len(s)} tokens exceeds limit {config.max_long}"
            )
        if current and (
            tokens + len(s) > config.max_long or len(current) + 1 > config.max_global
        ):
            chunks.append(current)
            current, tokens = [], 0
        current.append(s)
        tokens += len(s)
    if current:
        chunks.append(current)
    return chunks


def pack_documents(
    docs: list[list[Sentence]],
    config: ModelConfig,
    options: BuildOptions | None = None,
) -> list[EncoderInput]:
    """Greedy first-fit packing of flat documents into encoder inputs.

    Documents that do not fit on their own are first split at sentence
    boundaries. All four masks are False across document boundaries and
    label matrices are block diagonal with the "neutral" label elsewhere,
    so packed documents cannot influence each other.
    """
    options = options or BuildOptions()
    pieces: list[list[Sentence]] = []
    for doc in docs:
        if not doc:
            raise ValueError("empty document")
        pieces.extend(_split_to_fit(doc, config))

    bins: list[list[list[Sentence]]] = []
    bin_tokens: list[int] = []
    bin_rows: list[int] = []
    for piece in pieces:
        tokens = sum(len(s) for s in piece)
        rows = len(piece)
        placed = False
        for i in range(len(bins)):
            if bin_tokens[i] + tokens <= config.max_long and bin_rows[i] + rows <= config.max_global:
                bins[i].append(piece)
                bin_tokens[i] += tokens
                bin_rows[i] += rows
                placed = True
                break
        if not placed:
            bins.append([piece])
            bin_tokens.append(tokens)
            bin_rows.append(rows)

    vocab = RelativeVocab.for_config(config)
    neutral = vocab.structural_id("neutral")
    packed: list[EncoderInput] = []
    for group in bins:
        parts = [build_flat_input(doc, config, options) for doc in group]
        n_g = sum(p.n_global for p in parts)
        n_l = sum(p.n_long for p in parts)
        masks = PieceMasks(
            g2g=torch.zeros(n_g, n_g, dtype=torch.bool),
            g2l=torch.zeros(n_g, n_l, dtype=torch.bool),
            l2g=torch.zeros(n_l, n_g, dtype=torch.bool),
            l2l=torch.zeros(n_l, n_l, dtype=torch.bool),
        )
        labels = PieceLabels(
            g2g=torch.full((n_g, n_g), neutral, dtype=torch.long),
            g2l=torch.full((n_g, n_l), neutral, dtype=torch.long),
            l2g=torch.full((n_l, n_g), neutral, dtype=torch.long),
            l2l=torch.full((n_l, n_l), neutral, dtype=torch.long),
        )
        spans: list[SentenceSpan] = []
        g_off = l_off = 0
        for p in parts:
            g_end, l_end = g_off + p.n_global, l_off + p.n_long
            masks.g2g[g_off:g_end, g_off:g_end] = p.masks.g2g
            masks.g2l[g_off:g_end, l_off:l_end] = p.masks.g2l
            masks.l2g[l_off:l_end, g_off:g_end] = p.masks.l2g
            masks.l2l[l_off:l_end, l_off:l_end] = p.masks.l2l
            labels.g2g[g_off:g_end, g_off:g_end] = p.labels.g2g
            labels.g2l[g_off:g_end, l_off:l_end] = p.labels.g2l
            labels.l2g[l_off:l_end, g_off:g_end] = p.labels.l2g
            labels.l2l[l_off:l_end, l_off:l_end] = p.labels.l2l
            spans.extend(
                SentenceSpan(s.global_row + g_off, s.start + l_off, s.end + l_off)
                for s in p.sentence_spans
            )
            g_off, l_off = g_end, l_end
        packed.append(
            EncoderInput(
                global_ids=torch.cat([p.global_ids for p in parts]),
                long_ids=torch.cat([p.long_ids for p in parts]),
                masks=masks,
                labels=labels,
                word_starts=torch.cat([p.word_starts for p in parts]),
                sentence_spans=spans,
                global_roles=[role for p in parts for role in p.global_roles],
            )
        )
    return packed


# ---------------------------------------------------------------------------
# Structured JSON input


def parse_structured_document(obj: dict, config: ModelConfig) -> StructuredDocument:
    """Build a document from a JSON object with contexts or flat sentences."""
    if "contexts" in obj:
        contexts = [
            [tokenize_sentence(s, config) for s in ctx] for ctx in obj["contexts"]
        ]
    elif "sentences" in obj:
        contexts = [[tokenize_sentence(s, config) for s in obj["sentences"]]]
    else:
        raise ValueError("document object needs 'contexts' or 'sentences'")
    links = [
        MentionLink(
            candidate=int(raw["candidate"]),
            start=int(raw["start"]),
            end=int(raw["end"]),
            label=raw.get("label", "mention-link"),
        )
        for raw in obj.get("mention_links", [])
    ]
    for link in links:
        if link.label not in config.structural_labels:
            raise ValueError(f"unknown structural label: {link.label!r}")
    return StructuredDocument(contexts, links)

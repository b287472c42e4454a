"""Global-local sparse attention encoder.

A desk-scale encoder with two input sequences (a short, fully attended
global sequence and a long sequence with banded self-attention), relative
position labels for sequence order and structural relations, MLM+CPC
pre-training, and weight lifting from BERT-format checkpoints.
"""

from .attention import (
    AttentionParams,
    PieceLabels,
    PieceMasks,
    ProjectionSet,
    blocked_local_scores,
    build_local_band_mask,
    count_attention_pairs,
    dense_reference_attention,
    global_local_attention,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    lift_bert,
    load_checkpoint,
    parameters_from_checkpoint,
    save_checkpoint,
)
from .config import ModelConfig, base_config, large_config, tiny_config, toy_config
from .core import MASK_CONSTANT, feed_forward, gelu, layer_norm, masked_softmax
from .encoder import (
    EncoderInput,
    ParameterSet,
    SentenceSpan,
    embed,
    encode,
    encoder_layer,
    init_parameters,
    run_layers,
)
from .pretraining import (
    MaskedBatch,
    MlmTargets,
    Trainer,
    TrainingDivergence,
    combine_losses,
    corpus_to_inputs,
    cpc_nce_loss,
    load_toy_corpus,
    mlm_loss,
    prepare_masked_batch,
    pretrain_step,
    select_cpc_sentences,
    whole_word_mask,
)
from .relative import (
    RelativeVocab,
    relative_score_bias,
    sequence_relative_labels,
)
from .structure import (
    BuildOptions,
    MentionLink,
    Sentence,
    StructuredDocument,
    build_flat_input,
    build_hierarchical_input,
    pack_documents,
    truncate_structured,
)

__version__ = "0.1.0"

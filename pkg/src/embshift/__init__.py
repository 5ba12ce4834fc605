"""Bias-direction injection in prompt-embedding space.

Pipeline: encode aligned neutral/biased prompt pairs, take the mean offset as
a direction, train a small attention module that rescales that direction per
input, then add the rescaled direction to user embeddings.
"""

from .adaptive import AdaptiveModule, AttentionMaps, adapt_direction, attention, init_module, module_backward
from .direction import DirectionStats, compute_direction, direction_stats
from .encoders import PROFILES, FileProvider, HttpProvider, emit_llm_instruction, encode, ingest_pairs
from .evalkit import EvalReport, evaluate, transfer_report
from .formats import (
    Checkpoint,
    DirectionFile,
    EmbeddingBatch,
    PairDataset,
    read_batch,
    read_checkpoint,
    read_dataset,
    read_direction,
    subsample,
    write_batch,
    write_checkpoint,
    write_dataset,
    write_direction,
)
from .injector import inject, inject_batch, inject_fixed
from .training import AdamState, TrainConfig, TrainReport, adam_step, loss, train

__version__ = "0.1.0"

"""Memory-budgeted text classifiers with hard word clusters learned by Gumbel-Softmax."""

from .data import PAD, UNK, Vocab, build_vocab, tokenize_regex, tokenize_simple
from .deployment import (CompactModel, SizeReport, deserialize, finalize, infer, infer_batch,
                         model_size_bits, serialize)
from .embedders import EmbedMode, Embedder, gumbel_softmax, param_counts
from .sequence import TextClassifier
from .trainer import TrainConfig, TrainResult, evaluate, sweep, train

__version__ = "0.1.0"

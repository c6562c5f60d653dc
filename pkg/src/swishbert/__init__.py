"""SwishRNN-augmented BERT encoder on a small numpy autodiff core."""

from .data import Batch, Corpus, Vocab, batch_iterator, build_vocab
from .model import EncoderModel, ModelConfig, count_params, encoder_forward, mlm_logits, solve_inner_dim
from .numerics import GradTape, Tensor, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "Corpus",
    "EncoderModel",
    "GradTape",
    "ModelConfig",
    "Tensor",
    "Vocab",
    "backward",
    "batch_iterator",
    "build_vocab",
    "count_params",
    "encoder_forward",
    "finite_diff_grad",
    "mlm_logits",
    "solve_inner_dim",
]

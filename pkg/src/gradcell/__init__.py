"""Memory-decoupled contrastive pre-training for single-cell expression profiles."""

from .autodiff import Adam, Parameter, RngStream, Tape, Tensor, no_grad, zero_grads
from .config import RunConfig, TrainConfig, load_config, parse_config
from .dac import (ChunkSchedule, dac_contrastive_backward, end_to_end_backward,
                  verify_gradient_equivalence)
from .encoder import EncoderConfig, EncoderParams, encode, init_params
from .memory import MemoryModel, max_len_for_budget, memory_estimator, reference_preset
from .objectives import cls_loss, info_nce_loss, mlm_loss
from .preprocess import BinSpec, CountMatrix, SparseProfile, normalize, sparsify
from .trainer import pretrain, train_step

__version__ = "0.1.0"

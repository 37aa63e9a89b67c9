"""Activation-memory model: bytes grow with mini-batch x sequence length x layers.

``activation_elements_per_token_layer`` is the exact number of array
elements the autodiff tape keeps per token per encoder layer for one FAVOR+
view; the desk-scale model multiplies it by the two contrastive views and the
element width.  The ``reference_preset`` instead calibrates the per-token cost
against a fixed operating point for the full-size encoder (13,000 tokens at
mini-batch 1 in 40 GiB), since a GPU framework keeps a different set of buffers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .encoder import EncoderConfig
from .errors import InfeasibleError, UsageError

GIB = 2 ** 30
VIEWS_PER_CELL = 2
REFERENCE_BUDGET_BYTES = 40 * GIB
REFERENCE_ANCHOR_TOKENS = 13_000


@dataclass(frozen=True)
class MemoryModel:
    bytes_per_token_activation: float
    fixed_overhead_bytes: float
    budget_bytes: float

    def __post_init__(self):
        if min(self.bytes_per_token_activation, self.fixed_overhead_bytes, self.budget_bytes) <= 0:
            raise UsageError("memory model constants must be positive")


def activation_elements_per_token_layer(config):
    """Elements recorded per token per layer by one FAVOR+ encoder pass.

    Derived from the layer definition: 42 d-wide buffers without dropout, 12
    more with dropout (outputs plus saved masks), and ten ``m``-wide feature
    buffers plus five scalars per head inside the attention kernel.
    """
    d, h, m = config.feature_size, config.n_heads, config.n_random_features
    widths = 54 if config.dropout_p > 0 else 42
    per_layer = widths * d + 10 * h * m + 5 * h
    # embedding gather/add (3d) and the final layernorm (2d) spread over the layers
    if config.n_layers:
        per_layer += 5 * d / config.n_layers
    return per_layer


def count_parameters(config):
    d, hid, g = config.feature_size, config.ffn_mult * config.feature_size, config.n_genes
    n_tok = config.bin_spec.n_tokens
    per_layer = 4 * (d * d + d) + 4 * d + (d * hid + hid) + (hid * d + d)
    total = n_tok * d + (g + 1) * d + config.n_layers * per_layer
    total += 2 * d if config.n_layers else 0
    total += (d + 1) * config.bin_spec.n_bins + (d + 1) + (d + 1) + (g + 1) * config.proj_dim
    return total


def engine_memory_model(config, budget_bytes=REFERENCE_BUDGET_BYTES):
    """Memory model of this engine: parameters, grads and Adam moments plus tape activations."""
    width = config.dtype.itemsize
    per_token = VIEWS_PER_CELL * width * activation_elements_per_token_layer(config)
    fixed = 4 * width * count_parameters(config)
    return MemoryModel(per_token, fixed, budget_bytes)


def full_size_config():
    """Full-size encoder settings (16,906 genes, d=512, 10 layers, 16 heads)."""
    return EncoderConfig(n_genes=16906, feature_size=512, n_layers=10, n_heads=16,
                         max_seq_len=6000, dropout_p=0.1, n_random_features=256,
                         attention_mode="favor_plus", proj_dim=512, precision="float32")


def calibrated_model(config, budget_bytes, anchor_tokens, fixed_overhead_bytes=None):
    """Fit the per-token cost so that ``anchor_tokens`` tokens exactly fill the budget."""
    if fixed_overhead_bytes is None:
        fixed_overhead_bytes = 4 * 4 * count_parameters(config)
    if budget_bytes <= fixed_overhead_bytes:
        raise InfeasibleError("budget does not cover the fixed overhead")
    per_token = (budget_bytes - fixed_overhead_bytes) / (anchor_tokens * config.n_layers)
    return MemoryModel(per_token, fixed_overhead_bytes, budget_bytes)


def reference_preset():
    """``(MemoryModel, EncoderConfig)`` for the full-size encoder on a 40 GiB device."""
    cfg = full_size_config()
    return calibrated_model(cfg, REFERENCE_BUDGET_BYTES, REFERENCE_ANCHOR_TOKENS), cfg


def memory_estimator(model, seq_len, mini_batch, config):
    """Peak bytes for one mini-batch of ``mini_batch`` cells at ``seq_len`` tokens."""
    if seq_len <= 0 or mini_batch <= 0:
        raise UsageError("seq_len and mini_batch must be positive")
    return (model.fixed_overhead_bytes
            + mini_batch * seq_len * model.bytes_per_token_activation * config.n_layers)


def max_len_for_budget(model, budget, mini_batch, config):
    """Longest sequence whose estimate fits in ``budget`` bytes."""
    if mini_batch <= 0:
        raise UsageError("mini_batch must be positive")
    if budget < model.fixed_overhead_bytes:
        raise InfeasibleError(f"budget {budget:.4g} B is below the fixed overhead "
                              f"{model.fixed_overhead_bytes:.4g} B")
    free = budget - model.fixed_overhead_bytes
    return math.floor(free / (mini_batch * model.bytes_per_token_activation * config.n_layers))


def max_mini_batch_for_budget(model, budget, seq_len, config):
    if seq_len <= 0:
        raise UsageError("seq_len must be positive")
    if budget < model.fixed_overhead_bytes:
        raise InfeasibleError("budget is below the fixed overhead")
    free = budget - model.fixed_overhead_bytes
    return math.floor(free / (seq_len * model.bytes_per_token_activation * config.n_layers))


_UNITS = {"": 1, "b": 1, "k": 2 ** 10, "kb": 2 ** 10, "m": 2 ** 20, "mb": 2 ** 20,
          "g": GIB, "gb": GIB, "gib": GIB, "t": 2 ** 40, "tb": 2 ** 40}


def parse_bytes(text):
    """``"40GB"`` -> 40 * 2**30.  Units are binary multiples."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:e[0-9]+)?)\s*([a-zA-Z]*)\s*", str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise UsageError(f"cannot parse byte size {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower()]

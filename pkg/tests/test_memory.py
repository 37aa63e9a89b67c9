import numpy as np
import pytest

from gradcell.autodiff import RngStream
from gradcell.dac import ChunkSchedule, dac_contrastive_backward, sample_streams
from gradcell.encoder import EncoderConfig, init_params
from gradcell.errors import InfeasibleError, UsageError
from gradcell.memory import (
    GIB, MemoryModel, count_parameters, engine_memory_model, max_len_for_budget,
    max_mini_batch_for_budget, memory_estimator, reference_preset, parse_bytes,
)
from gradcell.preprocess import SparseProfile

from helpers import small_config, small_params


def test_reference_preset_operating_points():
    model, cfg = reference_preset()
    budget = 40 * GIB
    lengths = {b: max_len_for_budget(model, budget, b, cfg) for b in (1, 16, 256)}
    assert 11_700 <= lengths[1] <= 14_300
    assert 45 <= lengths[256] <= 55
    products = [lengths[b] * b for b in lengths]
    assert (max(products) - min(products)) / max(products) < 0.10
    assert 256 * 0.9 <= lengths[1] / lengths[256] <= 256 * 1.1


def test_estimator_inverts_max_len():
    model, cfg = reference_preset()
    for b in (1, 7, 64):
        n = max_len_for_budget(model, model.budget_bytes, b, cfg)
        assert memory_estimator(model, n, b, cfg) <= model.budget_bytes
        assert memory_estimator(model, n + 1, b, cfg) > model.budget_bytes
        assert max_mini_batch_for_budget(model, model.budget_bytes, n, cfg) >= b


def test_doubling_free_memory_doubles_length():
    model, cfg = reference_preset()
    free = model.budget_bytes - model.fixed_overhead_bytes
    a = max_len_for_budget(model, model.fixed_overhead_bytes + free, 4, cfg)
    b = max_len_for_budget(model, model.fixed_overhead_bytes + 2 * free, 4, cfg)
    assert b / a == pytest.approx(2.0, rel=1e-3)


def test_budget_below_overhead_is_infeasible():
    model, cfg = reference_preset()
    with pytest.raises(InfeasibleError):
        max_len_for_budget(model, model.fixed_overhead_bytes / 2, 1, cfg)


def test_parameter_count_matches_initialised_model():
    for kw in ({}, {"n_layers": 0}, {"n_heads": 4, "proj_dim": 5}):
        params = small_params(**kw)
        assert count_parameters(params.config) == sum(p.data.size for p in params.parameters())


@pytest.mark.parametrize("length, mini", [(16, 1), (32, 2), (64, 4)])
def test_engine_estimate_matches_instrumented_tape(length, mini):
    cfg = EncoderConfig(n_genes=128, feature_size=16, n_layers=2, n_heads=2, max_seq_len=128,
                        dropout_p=0.1, n_random_features=16, proj_dim=16)
    params = init_params(cfg, RngStream(0))
    gen = np.random.default_rng(length)
    profiles = [SparseProfile(np.sort(gen.choice(128, length, replace=False)),
                              gen.uniform(0.5, 7.0, length)) for _ in range(mini)]
    streams = sample_streams(RngStream(0), mini, "mem")
    res = dac_contrastive_backward(profiles, params, ChunkSchedule(mini, mini), 0.1, streams)
    model = engine_memory_model(cfg)
    estimate = memory_estimator(model, length, mini, cfg) - model.fixed_overhead_bytes
    measured = res.peak_chunk_activations * cfg.dtype.itemsize
    assert measured == pytest.approx(estimate, rel=0.25)


def test_memory_model_validation():
    with pytest.raises(UsageError):
        MemoryModel(0.0, 1.0, 1.0)
    model = engine_memory_model(small_config())
    with pytest.raises(UsageError):
        memory_estimator(model, 0, 1, small_config())


def test_parse_bytes():
    assert parse_bytes("40GB") == 40 * GIB
    assert parse_bytes("1.5 kb") == 1536
    assert parse_bytes("123") == 123
    with pytest.raises(UsageError):
        parse_bytes("forty")

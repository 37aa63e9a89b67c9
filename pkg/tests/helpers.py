"""Shared test utilities: central-difference gradient oracle and small fixtures."""

import numpy as np

from gradcell.autodiff import Tape, zero_grads
from gradcell.encoder import EncoderConfig, init_params
from gradcell.autodiff import RngStream
from gradcell.preprocess import SparseProfile, profiles_from_counts, synthetic_counts


def numeric_grad(loss_fn, param, coords, step=1e-5):
    """Central differences of ``loss_fn()`` wrt ``param.data`` at flat ``coords``."""
    flat = param.data.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        out[k] = (up - down) / (2 * step)
    return out


def gradcheck(build_loss, params, n_coords=3, seed=0, step=1e-5):
    """Max over parameters of ``max|analytic - numeric| / max|analytic|`` on sampled coords.

    ``build_loss()`` returns a scalar Tensor; it is run under a tape for the
    analytic gradient and without one for the finite differences.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    def value():
        return float(build_loss().data)

    gen = np.random.default_rng(seed)
    worst, worst_name = 0.0, None
    for p in params:
        a = analytic[id(p)].reshape(-1)
        scale = np.max(np.abs(a))
        k = min(n_coords, a.size)
        # bias the sample towards the largest entries so the check is not vacuous
        top = np.argsort(-np.abs(a))[: max(1, k // 2)]
        rest = gen.choice(a.size, size=k - len(top), replace=False) if k > len(top) else []
        coords = np.unique(np.concatenate([top, rest]).astype(int))
        num = numeric_grad(value, p, coords, step)
        err = np.max(np.abs(a[coords] - num))
        denom = max(scale, 1e-8)
        rel = err / denom if scale > 1e-10 else err
        if rel > worst:
            worst, worst_name = rel, getattr(p, "name", "?")
    zero_grads(params)
    return worst, worst_name


def jitter(params, seed, scale=0.05):
    """Move every parameter off exact zeros and ones so no ReLU/clip kink sits at the origin."""
    gen = np.random.default_rng(seed)
    for p in params:
        p.data += gen.normal(0.0, scale, p.data.shape)


def small_config(**kw):
    base = dict(n_genes=12, feature_size=16, n_layers=2, n_heads=2, max_seq_len=64,
                dropout_p=0.1, n_random_features=16, attention_mode="exact", proj_dim=8,
                precision="float64")
    base.update(kw)
    return EncoderConfig(**base)


def small_params(seed=0, **kw):
    return init_params(small_config(**kw), RngStream(seed))


def small_profiles(n, n_genes=12, seed=0, labels=None):
    counts, programs = synthetic_counts(n, n_genes, density=0.3, seed=seed)
    if labels is None:
        labels = ["cancer" if g else "normal" for g in programs]
    return profiles_from_counts(counts, labels)


def toy_profile(positions, values, label=None):
    return SparseProfile(np.asarray(positions), np.asarray(values, dtype=float), label)

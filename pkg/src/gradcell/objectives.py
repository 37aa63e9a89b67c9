"""Pre-training losses: InfoNCE over dropout views, masked expression modelling, tumour/normal."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .encoder import cls_logit, encode, mlm_logits, pool_full_sequence
from .errors import ConfigError, DegenerateAugmentationWarning, NumericalError, UsageError
from .preprocess import bin_values

PROB_EPS = 1e-12
CLS_LABELS = {"normal": 0, "cancer": 1}


def view_streams(sample_rng):
    """The two dropout streams (pass 0 and pass 1) of one sample."""
    return sample_rng.derive("view", 0), sample_rng.derive("view", 1)


def embed_view(profile, params, view_rng):
    hidden = encode(profile, params, rng=view_rng)
    return pool_full_sequence(hidden, profile, params)


def make_positive_pair(profile, params, sample_rng):
    """Two pooled embeddings of the same cell under independent dropout masks."""
    if params.config.dropout_p == 0.0:
        warnings.warn("dropout_p is 0: both views are identical", DegenerateAugmentationWarning,
                      stacklevel=2)
    r0, r1 = view_streams(sample_rng)
    return embed_view(profile, params, r0), embed_view(profile, params, r1)


def cosine_similarity_matrix(h, h_plus):
    h, h_plus = ad.as_tensor(h), ad.as_tensor(h_plus)
    try:
        hn = h / ad.l2_norm(h, axis=-1)
        pn = h_plus / ad.l2_norm(h_plus, axis=-1)
    except NumericalError as exc:
        raise NumericalError("info_nce_loss", "zero-norm embedding") from exc
    return ad.matmul(hn, ad.transpose(pn))


def info_nce_loss(h, h_plus, tau=0.05):
    """Mean over rows of ``-log softmax_j(sim(h_i, h+_j) / tau)[i]``."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    h = ad.as_tensor(h)
    n = h.shape[0]
    if n < 1 or ad.as_tensor(h_plus).shape[0] != n:
        raise UsageError("h and h_plus must hold the same non-zero number of rows")
    logits = cosine_similarity_matrix(h, h_plus) * (1.0 / tau)
    logp = ad.log_softmax(logits, axis=-1)
    eye = np.eye(n, dtype=logp.dtype)
    return ad.sum_(logp * eye) * (-1.0 / n)


def mlm_mask(profile, mask_rate, rng):
    """Boolean mask over the profile's positions; never empty."""
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError("mask_rate must lie in (0, 1)")
    n = len(profile)
    counter = 0
    while True:
        mask = rng.at(counter).generator().random(n) < mask_rate
        if mask.any():
            return mask
        counter += 1


def mlm_targets(profile, mask, spec):
    return bin_values(profile.values[mask], spec)


def mlm_loss(logits, labels, normalizer=None):
    """Cross-entropy of softmax(logits) against integer ``labels``.

    ``normalizer`` defaults to the number of rows; pass the batch-wide count of
    masked genes to get chunk losses that add up to the full-batch loss.
    """
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0] if normalizer is None else normalizer
    probs = ad.clip(ad.softmax(logits, axis=-1), PROB_EPS, 1.0)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.sum_(ad.log(probs) * onehot) * (-1.0 / n)


def cls_loss(logits, labels, normalizer=None):
    """Binary cross-entropy on sigmoid(logits), probabilities clamped to ``[eps, 1-eps]``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    n = labels.size if normalizer is None else normalizer
    v = ad.clip(ad.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    per = ad.log(v) * labels + ad.log(1.0 - v) * (1.0 - labels)
    return ad.sum_(per) * (-1.0 / n)


def combined_pretrain_loss(weights, l_cl, l_mlm, l_cls):
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or min(w) < 0:
        raise ConfigError("loss weights must be three non-negative numbers")
    if not any(w):
        raise ConfigError("at least one loss weight must be positive")
    return w[0] * l_cl + w[1] * l_mlm + w[2] * l_cls


def masked_forward(profile, params, mask, view_rng):
    """Encode with masked expression tokens; return ``(mlm_logits_at_mask, cls_logit)``."""
    hidden = encode(profile, params, rng=view_rng, mask=mask)
    rows = np.flatnonzero(mask)
    return mlm_logits(hidden, params)[rows], cls_logit(hidden, params)

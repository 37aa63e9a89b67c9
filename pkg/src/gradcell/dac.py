"""Divide-and-conquer contrastive learning and its end-to-end reference.

The large batch of ``T`` cells is embedded once without a tape (Step 1).
Each mini-batch of ``t`` cells is then re-embedded with a tape, its rows are
spliced into the cached ``T x d`` matrices, the full-batch InfoNCE loss is
evaluated and back-propagated (Step 2), and gradients accumulate across
mini-batches without any parameter update (Step 3).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tape
from .encoder import EncoderConfig, init_params
from .errors import ReplayError, UsageError
from .objectives import embed_view, info_nce_loss, view_streams
from .preprocess import profiles_from_counts, synthetic_counts

REPLAY_TOL = 1e-9


@dataclass(frozen=True)
class ChunkSchedule:
    batch_size: int
    mini_batch_size: int

    def __post_init__(self):
        if self.batch_size < 1 or self.mini_batch_size < 1:
            raise UsageError("batch_size and mini_batch_size must be >= 1")

    @property
    def n_chunks(self):
        return math.ceil(self.batch_size / self.mini_batch_size)

    def ranges(self):
        t, n = self.mini_batch_size, self.batch_size
        return [(k * t, min((k + 1) * t, n)) for k in range(self.n_chunks)]


@dataclass
class EmbeddingCache:
    h: np.ndarray
    h_plus: np.ndarray
    streams: list


@dataclass
class DacResult:
    chunk_losses: list
    cache: EmbeddingCache
    max_replay_diff: float = 0.0
    peak_chunk_activations: int = 0

    @property
    def loss(self):
        return self.chunk_losses[0] if self.chunk_losses else float("nan")


def sample_streams(rng, n, *keys):
    """Per-sample streams keyed by ``keys`` (e.g. epoch, batch index) and sample index."""
    return [rng.derive(*keys, "sample", i) for i in range(n)]


def embed_cache(profiles, params, streams):
    """Step 1: every view of every cell, no tape."""
    h, hp = [], []
    with ad.no_grad():
        for prof, s in zip(profiles, streams):
            r0, r1 = view_streams(s)
            h.append(embed_view(prof, params, r0).data[0])
            hp.append(embed_view(prof, params, r1).data[0])
    return EmbeddingCache(np.stack(h), np.stack(hp), list(streams))


def _splice(cache_rows, fresh, lo, hi):
    parts = []
    if lo > 0:
        parts.append(ad.Tensor.constant(cache_rows[:lo]))
    parts.extend(fresh)
    if hi < len(cache_rows):
        parts.append(ad.Tensor.constant(cache_rows[hi:]))
    return ad.concat(parts, axis=0)


def _replay_gap(fresh, cached):
    scale = max(1.0, float(np.max(np.abs(cached))))
    return float(np.max(np.abs(fresh - cached))) / scale


def dac_contrastive_backward(profiles, params, schedule, tau, streams, loss_scale=1.0,
                             order=None, replay_hook=None, replay_tol=REPLAY_TOL):
    """Accumulate the contrastive gradient chunk by chunk into ``params``' grads.

    Callers zero the grads first.  ``order`` permutes chunk processing;
    ``replay_hook`` maps each Step-2 stream to the one actually used (test
    hook for breaking replay).  Every chunk reports the same full-batch loss.
    """
    if len(profiles) != schedule.batch_size or len(streams) != schedule.batch_size:
        raise UsageError("profiles, streams and schedule disagree on the batch size")
    cache = embed_cache(profiles, params, streams)
    ranges = schedule.ranges()
    if order is not None:
        ranges = [ranges[k] for k in order]
    losses, worst, peak = [], 0.0, 0
    for lo, hi in ranges:
        with Tape() as tape:
            fresh_h, fresh_p = [], []
            for i in range(lo, hi):
                s = streams[i] if replay_hook is None else replay_hook(streams[i])
                r0, r1 = view_streams(s)
                fresh_h.append(embed_view(profiles[i], params, r0))
                fresh_p.append(embed_view(profiles[i], params, r1))
            gap = max(_replay_gap(np.concatenate([x.data for x in fresh_h]), cache.h[lo:hi]),
                      _replay_gap(np.concatenate([x.data for x in fresh_p]), cache.h_plus[lo:hi]))
            if gap > replay_tol:
                raise ReplayError(f"chunk [{lo}, {hi}) recomputation differs from the cache "
                                  f"by {gap:.3e} (tolerance {replay_tol:g})")
            worst = max(worst, gap)
            h = _splice(cache.h, fresh_h, lo, hi)
            hp = _splice(cache.h_plus, fresh_p, lo, hi)
            loss = info_nce_loss(h, hp, tau)
            if loss_scale != 1.0:
                loss = loss * loss_scale
        peak = max(peak, tape.activation_elements)
        tape.backward(loss)
        losses.append(float(loss.data) / loss_scale if loss_scale else 0.0)
    return DacResult(losses, cache, worst, peak)


def end_to_end_backward(profiles, params, tau, streams, loss_scale=1.0):
    """Reference path: one taped forward of all ``2T`` views, one loss, one backward."""
    with Tape() as tape:
        hs, hps = [], []
        for prof, s in zip(profiles, streams):
            r0, r1 = view_streams(s)
            hs.append(embed_view(prof, params, r0))
            hps.append(embed_view(prof, params, r1))
        loss = info_nce_loss(ad.concat(hs), ad.concat(hps), tau)
        if loss_scale != 1.0:
            loss = loss * loss_scale
    tape.backward(loss)
    return float(loss.data) / loss_scale if loss_scale else 0.0


# verification -------------------------------------------------------------------

def relative_difference(a, b):
    """``max|a - b| / max|b|``; 0 when both are identically zero."""
    denom = float(np.max(np.abs(b))) if b.size else 0.0
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    if denom == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / denom


@dataclass
class ScheduleCheck:
    mini_batch_size: int
    n_chunks: int
    max_rel_diff: float
    worst_parameter: str
    per_parameter: dict
    loss: float
    passed: bool


@dataclass
class EquivalenceReport:
    batch_size: int
    threshold: float
    e2e_loss: float
    checks: list = field(default_factory=list)
    pairwise_max_rel_diff: float = 0.0
    seconds: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def lines(self):
        out = [f"end-to-end loss {self.e2e_loss:.12g} (T={self.batch_size})"]
        for c in self.checks:
            out.append(f"t={c.mini_batch_size:<4d} S={c.n_chunks:<4d} max_rel_grad_diff="
                       f"{c.max_rel_diff:.3e} ({c.worst_parameter}) "
                       f"{'PASS' if c.passed else 'FAIL'}")
        out.append(f"pairwise schedule max_rel_grad_diff={self.pairwise_max_rel_diff:.3e}")
        out.append(f"elapsed {self.seconds:.2f}s")
        return out


def verification_config(**overrides):
    base = dict(n_genes=32, feature_size=16, n_layers=2, n_heads=2, max_seq_len=64,
                dropout_p=0.1, n_random_features=16, attention_mode="exact",
                proj_dim=16, precision="float64")
    base.update(overrides)
    return EncoderConfig(**base)


def _grads(params):
    return {n: p.grad.copy() for n, p in params.tensors.items()}


def verify_gradient_equivalence(config=None, batch_size=8, t_list=(1, 2, 4, 8), seed=0,
                                tau=0.05, threshold=1e-6, replay_hook=None):
    """Compare accumulated DAC gradients to end-to-end gradients for each ``t``."""
    start = time.perf_counter()
    config = config or verification_config()
    if config.precision != "float64":
        raise UsageError("gradient equivalence is verified in float64")
    root = RngStream(seed)
    params = init_params(config, root)
    counts, programs = synthetic_counts(batch_size, config.n_genes, seed=seed)
    profiles = profiles_from_counts(counts, max_len=config.max_seq_len)
    streams = sample_streams(root, batch_size, "verify", 0)

    ad.zero_grads(params.parameters())
    e2e_loss = end_to_end_backward(profiles, params, tau, streams)
    ref = _grads(params)
    report = EquivalenceReport(batch_size, threshold, e2e_loss)
    dac_grads = []
    for t in t_list:
        ad.zero_grads(params.parameters())
        sched = ChunkSchedule(batch_size, t)
        res = dac_contrastive_backward(profiles, params, sched, tau, streams,
                                       replay_hook=replay_hook)
        g = _grads(params)
        dac_grads.append(g)
        per = {n: relative_difference(g[n], ref[n]) for n in ref}
        worst = max(per, key=per.get)
        report.checks.append(ScheduleCheck(t, sched.n_chunks, per[worst], worst, per,
                                           res.loss, per[worst] <= threshold))
    pair = 0.0
    for a in range(len(dac_grads)):
        for b in range(a + 1, len(dac_grads)):
            for n in ref:
                pair = max(pair, relative_difference(dac_grads[a][n], dac_grads[b][n]))
    report.pairwise_max_rel_diff = pair
    ad.zero_grads(params.parameters())
    report.seconds = time.perf_counter() - start
    return report

"""Pre-training loop: DAC contrastive term plus mini-batch MLM and CLS terms, one Adam step."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, RngStream, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .dac import ChunkSchedule, dac_contrastive_backward, sample_streams
from .encoder import init_params
from .errors import ConfigError, NumericalError
from .objectives import CLS_LABELS, cls_loss, masked_forward, mlm_loss, mlm_mask, mlm_targets
from .preprocess import ingest_gene_embeddings

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
LATEST = "latest.ckpt"


def trainable(params, tcfg):
    out = params.parameters()
    if not tcfg.train_gene_embeddings:
        out = [p for p in out if p.name != "embed.gene"]
    return out


def make_optimizer(params, tcfg):
    return Adam(trainable(params, tcfg), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps,
                tcfg.weight_decay)


def learning_rate(tcfg, step):
    """Learning rate for 1-based ``step``."""
    if tcfg.scheduler == "constant" or tcfg.steps <= 1:
        return tcfg.lr
    return 0.5 * tcfg.lr * (1.0 + math.cos(math.pi * (step - 1) / tcfg.steps))


def _mlm_cls_backward(batch, params, tcfg, streams):
    """Masked-expression and CLS losses, accumulated one mini-batch at a time."""
    spec = params.config.bin_spec
    masks = [mlm_mask(p, tcfg.mask_rate, s.derive("mlm_mask")) for p, s in zip(batch, streams)]
    n_masked = sum(int(m.sum()) for m in masks)
    cls_idx = [i for i, p in enumerate(batch) if p.label in CLS_LABELS]
    n_cls = len(cls_idx)
    total_mlm = total_cls = 0.0
    sched = ChunkSchedule(len(batch), min(tcfg.mini_batch_size, len(batch)))
    for lo, hi in sched.ranges():
        with Tape() as tape:
            loss = None
            l_mlm = l_cls = None
            logits_m, targets, logits_c, labels = [], [], [], []
            for i in range(lo, hi):
                lm, lc = masked_forward(batch[i], params, masks[i], streams[i].derive("mlm_view"))
                logits_m.append(lm)
                targets.append(mlm_targets(batch[i], masks[i], spec))
                if batch[i].label in CLS_LABELS:
                    logits_c.append(lc)
                    labels.append(CLS_LABELS[batch[i].label])
            if tcfg.w_mlm:
                l_mlm = mlm_loss(ad.concat(logits_m), np.concatenate(targets), n_masked)
                loss = l_mlm * tcfg.w_mlm
            if tcfg.w_cls and logits_c:
                l_cls = cls_loss(ad.concat(logits_c), labels, n_cls)
                loss = l_cls * tcfg.w_cls if loss is None else loss + l_cls * tcfg.w_cls
        if loss is not None:
            tape.backward(loss)
        total_mlm += 0.0 if l_mlm is None else float(l_mlm.data)
        total_cls += 0.0 if l_cls is None else float(l_cls.data)
    return total_mlm, total_cls


def train_step(batch, params, optimizer, tcfg, rng, epoch=0, batch_index=0, lr=None):
    """One optimisation step; returns ``{L_CL, L_MLM, L_CLS, loss, grad_norm}``.

    On a NumericalError the gradients are zeroed, parameters are left as they
    were and the error propagates.
    """
    plist = params.parameters()
    ad.zero_grads(plist)
    streams = sample_streams(rng, len(batch), "epoch", epoch, "batch", batch_index)
    try:
        l_cl = 0.0
        if tcfg.w_cl:
            sched = ChunkSchedule(len(batch), min(tcfg.mini_batch_size, len(batch)))
            res = dac_contrastive_backward(batch, params, sched, tcfg.tau, streams,
                                           loss_scale=tcfg.w_cl)
            l_cl = res.loss
        l_mlm, l_cls = _mlm_cls_backward(batch, params, tcfg, streams)
        sq = sum(float(np.sum(p.grad * p.grad)) for p in optimizer.params)
        grad_norm = math.sqrt(sq)
        if not math.isfinite(grad_norm):
            raise NumericalError("grad_norm")
    except NumericalError:
        ad.zero_grads(plist)
        raise
    optimizer.step(tcfg.lr if lr is None else lr)
    combined = tcfg.w_cl * l_cl + tcfg.w_mlm * l_mlm + tcfg.w_cls * l_cls
    return {"L_CL": l_cl, "L_MLM": l_mlm, "L_CLS": l_cls, "loss": combined,
            "grad_norm": grad_norm}


def batch_for_step(n_cells, tcfg, root, step):
    """``(epoch, batch_index, indices)`` for 1-based ``step``; a pure function of the seed."""
    per_epoch = n_cells // tcfg.batch_size
    if per_epoch == 0:
        raise ConfigError(f"corpus of {n_cells} cells is smaller than batch_size {tcfg.batch_size}")
    epoch, b = divmod(step - 1, per_epoch)
    perm = root.derive("shuffle", epoch).generator().permutation(n_cells)
    return epoch, b, perm[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]


def init_run(run_cfg):
    root = RngStream(run_cfg.train.seed)
    emb = None
    if run_cfg.train.gene_embeddings:
        enc = run_cfg.encoder
        emb = ingest_gene_embeddings(run_cfg.train.gene_embeddings, enc.n_genes, enc.feature_size)
    return init_params(run_cfg.encoder, root, gene_embeddings=emb)


def _format_record(step, metrics, lr, wall_ms=None):
    rec = {"step": step, "L_CL": metrics["L_CL"], "L_MLM": metrics["L_MLM"],
           "L_CLS": metrics["L_CLS"], "loss": metrics["loss"],
           "grad_norm": metrics["grad_norm"], "lr": lr}
    if wall_ms is not None:
        rec["wall_ms"] = wall_ms
    return json.dumps(rec)


def pretrain(profiles, run_cfg, out_dir, resume=None, stop_after=None):
    """Run ``run_cfg.train.steps`` steps, writing metrics and checkpoints to ``out_dir``.

    ``resume`` is a checkpoint path; training continues from its step with the
    parameters and Adam moments restored bit for bit.  ``stop_after`` ends the
    run early at that step (used to produce resumable checkpoints).
    Returns the list of metric records written by this call.
    """
    tcfg = run_cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(tcfg.seed)
    for p in profiles:
        if len(p) and p.positions[-1] >= run_cfg.encoder.n_genes:
            raise ConfigError("corpus gene positions exceed the configured n_genes")
    start = 0
    if resume:
        params, meta, arrays = load_checkpoint(resume)
        if params.config != run_cfg.encoder:
            raise ConfigError("checkpoint encoder config differs from the run config")
        optimizer = make_optimizer(params, tcfg)
        if "adam_t" in meta:
            optimizer.load_state_arrays(arrays, meta["adam_t"])
        start = int(meta["step"])
    else:
        params = init_run(run_cfg)
        optimizer = make_optimizer(params, tcfg)
    metrics_path = out / METRICS_FILE
    kept = []
    if resume and metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            if line.strip() and json.loads(line)["step"] <= start:
                kept.append(line)
    metrics_path.write_text("".join(k + "\n" for k in kept))
    last = tcfg.steps if stop_after is None else min(stop_after, tcfg.steps)
    records = []
    with open(metrics_path, "a") as fh:
        for step in range(start + 1, last + 1):
            t0 = time.perf_counter()
            epoch, b, idx = batch_for_step(len(profiles), tcfg, root, step)
            if tcfg.redraw_features:
                params.redraw_features(root.derive("redraw", step))
            lr = learning_rate(tcfg, step)
            metrics = train_step([profiles[i] for i in idx], params, optimizer, tcfg, root,
                                 epoch, b, lr)
            wall = round((time.perf_counter() - t0) * 1000.0, 3) if tcfg.log_wall_time else None
            line = _format_record(step, metrics, lr, wall)
            fh.write(line + "\n")
            fh.flush()
            records.append(json.loads(line))
            log.info("step %d loss %.6f (cl %.4f mlm %.4f cls %.4f)", step, metrics["loss"],
                     metrics["L_CL"], metrics["L_MLM"], metrics["L_CLS"])
            if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{step:06d}.ckpt", params, step, optimizer)
    save_checkpoint(out / LATEST, params, max(last, start), optimizer)
    return records

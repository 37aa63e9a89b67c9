import numpy as np

from gradcell import autodiff as ad
from gradcell.autodiff import RngStream
from gradcell.dac import (
    ChunkSchedule, dac_contrastive_backward, end_to_end_backward, relative_difference,
    sample_streams, verification_config, verify_gradient_equivalence,
)
from gradcell.encoder import init_params
from gradcell.errors import ReplayError
from gradcell.preprocess import profiles_from_counts, synthetic_counts

spacer = "_" * 60

cfg = verification_config()
params = init_params(cfg, RngStream(0))
counts, _ = synthetic_counts(8, cfg.n_genes, seed=0)
batch = profiles_from_counts(counts)
streams = sample_streams(RngStream(0), len(batch), "demo")

print("End-to-end: all 16 views on one tape")
ad.zero_grads(params.parameters())
loss = end_to_end_backward(batch, params, 0.05, streams)
ref = {n: p.grad.copy() for n, p in params.tensors.items()}
print("loss =", loss)

print(spacer)

print("\nDivide and conquer: cache without a tape, then one chunk at a time")
for t in (1, 2, 4, 8):
    ad.zero_grads(params.parameters())
    res = dac_contrastive_backward(batch, params, ChunkSchedule(8, t), 0.05, streams)
    worst = max(relative_difference(p.grad, ref[n]) for n, p in params.tensors.items())
    print(f"t={t}: chunks={len(res.chunk_losses)} peak tape elements={res.peak_chunk_activations:>8d}"
          f" max rel grad diff={worst:.2e}")

print(spacer)

print("\nEvery chunk reports the same full-batch loss")
print(np.round(res.chunk_losses, 12))

print(spacer)

print("\nIf the recomputation used different dropout masks the result would be wrong")
try:
    dac_contrastive_backward(batch, params, ChunkSchedule(8, 2), 0.05, streams,
                             replay_hook=lambda s: s.derive("desync"))
except ReplayError as exc:
    print("ReplayError:", exc)

print(spacer)

print("\nThe packaged verifier, as run by `gradcell verify`")
for line in verify_gradient_equivalence(cfg, batch_size=16, t_list=(1, 4, 16)).lines():
    print(line)

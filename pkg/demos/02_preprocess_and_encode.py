import numpy as np

from gradcell.autodiff import RngStream
from gradcell.encoder import EncoderConfig, attention_maps, encode, init_params, pool_full_sequence
from gradcell.preprocess import BinSpec, bin_values, normalize, sparsify, synthetic_counts

spacer = "_" * 60

print("Raw counts for one cell, then log-normalised to a 10,000 total")
counts = np.array([1, 0, 3, 0, 0, 12, 4, 0])
x = normalize(counts)
print("counts     =", counts)
print("normalised =", np.round(x, 4))
print("sum(exp(x) - 1) =", np.sum(np.expm1(x)))

print(spacer)

print("\nOnly expressed genes are kept: positions and values")
prof = sparsify(x, label="normal")
print("positions =", prof.positions)
print("values    =", np.round(prof.values, 4))
spec = BinSpec()
print("bin edges =", spec.edges, "-> tokens", bin_values(prof.values, spec))
print("special tokens: mask", spec.mask_token, "cls", spec.cls_token, "pad", spec.pad_token)

print(spacer)

print("\nA desk-sized encoder")
cfg = EncoderConfig(n_genes=8, feature_size=16, n_layers=2, n_heads=2, max_seq_len=32,
                    dropout_p=0.1, n_random_features=64, attention_mode="favor_plus",
                    proj_dim=4)
params = init_params(cfg, RngStream(0))
print("parameters:", sum(p.data.size for p in params.parameters()))

hidden = encode(prof, params, rng=RngStream(0, 1))
print("hidden states (CLS + one row per expressed gene):", hidden.shape)

cell = pool_full_sequence(hidden, prof, params)
print("pooled cell embedding:", np.round(cell.data, 4))

print(spacer)

print("\nSame stream, same dropout masks, same output")
again = encode(prof, params, rng=RngStream(0, 1), mode="no_grad")
print("identical:", np.array_equal(hidden.data, again.data))
other = encode(prof, params, rng=RngStream(0, 2), mode="no_grad")
print("different stream identical:", np.array_equal(hidden.data, other.data))

print(spacer)

print("\nExact attention maps for inspection (rows sum to one)")
maps = attention_maps(prof, params)
print("layer 0, head 0:")
print(np.round(maps[0][0], 3))

print(spacer)

print("\nA synthetic corpus with two expression programs")
matrix, programs = synthetic_counts(6, 8, density=0.3, seed=1)
print(matrix.counts.toarray())
print("programs:", programs)

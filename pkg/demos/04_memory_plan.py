from gradcell.encoder import EncoderConfig
from gradcell.memory import (
    GIB, count_parameters, engine_memory_model, max_len_for_budget, reference_preset,
)

spacer = "_" * 60

model, cfg = reference_preset()
print("Full-size encoder:", count_parameters(cfg), "parameters")
print("fixed overhead (params, grads, two Adam moments): %.2f GiB" % (model.fixed_overhead_bytes / GIB))
print("activation bytes per token per layer: %.0f" % model.bytes_per_token_activation)

print(spacer)

print("\nLongest sequence that fits in 40 GiB, by mini-batch size")
for mb in (1, 2, 4, 16, 64, 256):
    n = max_len_for_budget(model, 40 * GIB, mb, cfg)
    print(f"mini-batch {mb:>4d}: max_len {n:>6d}   tokens {mb * n:>6d}")

print(spacer)

print("\nThe same question for this engine at desk scale, 64-bit, 8 GiB")
small = EncoderConfig(n_genes=2000, feature_size=64, n_layers=4, n_heads=4,
                      n_random_features=64, proj_dim=64)
engine = engine_memory_model(small, 8 * GIB)
for mb in (1, 8, 32):
    print(f"mini-batch {mb:>3d}: max_len {max_len_for_budget(engine, 8 * GIB, mb, small):>7d}")

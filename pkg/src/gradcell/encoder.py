"""Cell encoder: gene + expression embeddings, pre-LN Performer stack, pooling heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigError, SchemaError
from .preprocess import BinSpec, bin_values

ATTENTION_MODES = ("favor_plus", "favor_relu", "exact")
RELU_KERNEL_EPS = 1e-3
DROPOUT_SITES_PER_LAYER = 4


@dataclass
class EncoderConfig:
    n_genes: int = 16906
    feature_size: int = 512
    n_layers: int = 10
    n_heads: int = 16
    max_seq_len: int = 6000
    dropout_p: float = 0.1
    n_random_features: int = 256
    attention_mode: str = "favor_plus"
    ffn_mult: int = 4
    proj_dim: int = 512
    exact_cap: int = 4096
    bin_edges: tuple = (1.0, 2.0, 4.0, 6.0)
    precision: str = "float64"

    def __post_init__(self):
        self.bin_edges = tuple(float(e) for e in self.bin_edges)
        self.validate()

    def validate(self):
        if self.feature_size <= 0 or self.n_heads <= 0 or self.feature_size % self.n_heads:
            raise ConfigError(f"feature_size {self.feature_size} must be divisible by n_heads {self.n_heads}")
        if self.n_random_features < 1:
            raise ConfigError("n_random_features must be >= 1")
        if self.n_layers < 0 or self.n_genes < 1 or self.max_seq_len < 1:
            raise ConfigError("n_layers >= 0, n_genes >= 1 and max_seq_len >= 1 required")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        BinSpec(self.bin_edges)

    @property
    def head_dim(self):
        return self.feature_size // self.n_heads

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def bin_spec(self):
        return BinSpec(self.bin_edges)

    def to_dict(self):
        d = asdict(self)
        d["bin_edges"] = list(self.bin_edges)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def orthogonal_features(m, dim, rng):
    """``m x dim`` Gaussian orthogonal random matrix with chi-distributed row norms."""
    gen = rng.generator()
    blocks = []
    for _ in range(math.ceil(m / dim)):
        q, r = np.linalg.qr(gen.standard_normal((dim, dim)))
        # sign fix makes q Haar-distributed; without it the rows are biased
        blocks.append((q * np.sign(np.diag(r))).T)
    w = np.concatenate(blocks, axis=0)[:m]
    norms = np.linalg.norm(gen.standard_normal((m, dim)), axis=1)
    return norms[:, None] * w


class EncoderParams:
    """All trainable tensors, keyed by stable name, plus the fixed FAVOR+ features."""

    def __init__(self, config, tensors, features=None):
        self.config = config
        self.tensors = tensors
        self.features = features if features is not None else []

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def encoder_parameter_names(self):
        return [n for n in self.tensors if n.startswith(("embed.", "layer", "final_ln."))]

    def redraw_features(self, rng):
        cfg = self.config
        self.features = [orthogonal_features(cfg.n_random_features, cfg.head_dim,
                                             rng.derive("favor_features", layer))
                         .astype(cfg.dtype)
                         for layer in range(cfg.n_layers)]

    def snapshot(self):
        return {n: p.data.copy() for n, p in self.tensors.items()}

    def copy(self):
        tensors = {n: Parameter(p.data, name=n) for n, p in self.tensors.items()}
        return EncoderParams(self.config, tensors, [f.copy() for f in self.features])


def init_params(config, rng, gene_embeddings=None):
    """Random initialisation.  ``gene_embeddings`` (n_genes x d) replaces the gene table rows."""
    gen = rng.derive("init").generator()
    dt = config.dtype
    d, n_tok = config.feature_size, config.bin_spec.n_tokens
    hidden = config.ffn_mult * d
    t = {}

    def add(name, arr):
        t[name] = Parameter(np.asarray(arr, dtype=dt), name=name)

    def lin(name, fan_in, fan_out, random_bias=False):
        std = 1.0 / math.sqrt(fan_in)
        add(name + ".w", gen.normal(0.0, std, (fan_in, fan_out)))
        add(name + ".b", gen.normal(0.0, std, fan_out) if random_bias else np.zeros(fan_out))

    def ln(name):
        add(name + ".g", np.ones(d))
        add(name + ".b", np.zeros(d))

    add("embed.expression", gen.normal(0.0, 1.0, (n_tok, d)))
    gene = gen.normal(0.0, 1.0, (config.n_genes + 1, d))
    if gene_embeddings is not None:
        gene_embeddings = np.asarray(gene_embeddings)
        if gene_embeddings.shape != (config.n_genes, d):
            raise SchemaError(f"gene embeddings have shape {gene_embeddings.shape}, "
                              f"expected {(config.n_genes, d)}")
        gene[: config.n_genes] = gene_embeddings
    add("embed.gene", gene)
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        ln(p + "ln1")
        for proj in ("q", "k", "v", "o"):
            lin(p + "attn." + proj, d, d)
        ln(p + "ln2")
        lin(p + "ffn.1", d, hidden)
        lin(p + "ffn.2", hidden, d)
    if config.n_layers:
        ln("final_ln")
    lin("head.mlm", d, config.bin_spec.n_bins)
    lin("head.cls", d, 1)
    lin("pool.conv", d, 1)
    # a random bias keeps the embedding away from zero when every ReLU is off
    lin("pool.ff", config.n_genes, config.proj_dim, random_bias=True)
    params = EncoderParams(config, t)
    params.redraw_features(rng)
    return params


# attention ------------------------------------------------------------------

def exact_attention(q, k, v, cap=None):
    """Softmax attention; returns ``(output, attention_matrix)``.

    Works on ``[..., L, d_head]`` inputs.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    length = q.shape[-2]
    if cap is not None and length > cap:
        raise ConfigError(f"exact attention limited to {cap} tokens, got {length}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))) * scale
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, v), attn


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def softmax_kernel_features(x, w, is_query):
    """Positive random features ``exp(w.x - |x|^2/2)`` with a detached stabiliser.

    The stabiliser (row max for queries, global max for keys) cancels exactly
    in the attention ratio, so it is passed in as a constant.
    """
    d_head = x.shape[-1]
    xs = x * (d_head ** -0.25)
    proj = ad.matmul(xs, ad.Tensor.constant(w.T.astype(x.dtype)))
    half_sq = ad.sum_(xs * xs, axis=-1, keepdims=True) * 0.5
    if is_query:
        stab = proj.data.max(axis=-1, keepdims=True)
    else:
        stab = proj.data.max(axis=(-1, -2), keepdims=True)
    return ad.exp(proj - half_sq - ad.Tensor.constant(stab))


def relu_kernel_features(x, w):
    """Generalised-attention features ``relu(w.x) + eps``."""
    proj = ad.matmul(x, ad.Tensor.constant(w.T.astype(x.dtype)))
    return ad.relu(proj) + RELU_KERNEL_EPS


def favor_attention(q, k, v, features, kernel="softmax"):
    """Linear-cost random-feature attention on ``[..., L, d_head]``.

    ``features`` is the ``m x d_head`` random projection; no ``L x L`` array is
    formed.  ``kernel="softmax"`` is the FAVOR+ estimate of softmax attention,
    ``kernel="relu"`` the generalised ReLU-kernel variant.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if kernel == "softmax":
        qf = softmax_kernel_features(q, features, is_query=True)
        kf = softmax_kernel_features(k, features, is_query=False)
    elif kernel == "relu":
        qf, kf = relu_kernel_features(q, features), relu_kernel_features(k, features)
    else:
        raise ConfigError(f"unknown attention kernel {kernel!r}")
    kv = ad.matmul(ad.transpose(kf, _swap_last(kf.ndim)), v)
    k_sum = ad.sum_(kf, axis=-2, keepdims=True)
    num = ad.matmul(qf, kv)
    den = ad.sum_(qf * k_sum, axis=-1, keepdims=True)
    return num / den


# forward pass -----------------------------------------------------------------

def embed_input(profile, spec, params, mask=None):
    """Input matrix: CLS row, then ``gene[p_k] + expression[bin(y_k)]`` per expressed gene.

    ``mask`` is an optional boolean array over the profile's positions; masked
    rows swap their expression token for ``spec.mask_token``.
    """
    cfg = params.config
    if len(profile) and profile.positions.max() >= cfg.n_genes:
        raise IndexError(f"gene position {profile.positions.max()} >= n_genes {cfg.n_genes}")
    tokens = bin_values(profile.values, spec) if len(profile) else np.zeros(0, np.int64)
    if mask is not None:
        tokens = np.where(mask, spec.mask_token, tokens)
    gene_idx = np.concatenate([[cfg.n_genes], profile.positions])
    expr_idx = np.concatenate([[spec.cls_token], tokens])
    return ad.gather(params["embed.gene"], gene_idx) + ad.gather(params["embed.expression"], expr_idx)


def _linear(x, params, name):
    return ad.matmul(x, params[name + ".w"]) + params[name + ".b"]


def _layernorm(x, params, name):
    return ad.layernorm(x, params[name + ".g"], params[name + ".b"])


def _dropout(x, p, rng, counter):
    if p == 0.0 or rng is None:
        return x
    return ad.dropout(x, p, rng.at(counter))


def encoder_layer(x, params, layer, rng, attention_sink=None):
    cfg = params.config
    p = f"layer{layer}."
    n_tok = x.shape[0]
    h = _layernorm(x, params, p + "ln1")

    def heads(t):
        return ad.transpose(ad.reshape(t, (n_tok, cfg.n_heads, cfg.head_dim)), (1, 0, 2))

    q = heads(_linear(h, params, p + "attn.q"))
    k = heads(_linear(h, params, p + "attn.k"))
    v = heads(_linear(h, params, p + "attn.v"))
    if cfg.attention_mode == "exact":
        att, probs = exact_attention(q, k, v, cap=cfg.exact_cap)
        if attention_sink is not None:
            attention_sink.append(probs.data.copy())
    else:
        kernel = "relu" if cfg.attention_mode == "favor_relu" else "softmax"
        att = favor_attention(q, k, v, params.features[layer], kernel)
    att = ad.reshape(ad.transpose(att, (1, 0, 2)), (n_tok, cfg.feature_size))
    att = _linear(att, params, p + "attn.o")
    base = DROPOUT_SITES_PER_LAYER * layer
    x = x + _dropout(att, cfg.dropout_p, rng, base)
    h = _layernorm(x, params, p + "ln2")
    h = ad.gelu(_linear(h, params, p + "ffn.1"))
    h = _dropout(h, cfg.dropout_p, rng, base + 1)
    h = _linear(h, params, p + "ffn.2")
    return x + _dropout(h, cfg.dropout_p, rng, base + 2)


def encode(profile, params, rng=None, mask=None, mode=None, attention_sink=None):
    """Hidden states ``[len(profile) + 1, d]``; row 0 is the CLS token.

    ``rng`` is the per-cell, per-view stream; dropout site ``s`` of layer ``l``
    draws from counter ``4*l + s`` so a recomputation replays every mask.
    With ``rng=None`` dropout is off (inference).
    """
    if mode == "no_grad":
        with ad.no_grad():
            return encode(profile, params, rng, mask, None, attention_sink)
    cfg = params.config
    if len(profile) > cfg.max_seq_len:
        raise ConfigError(f"profile length {len(profile)} exceeds max_seq_len {cfg.max_seq_len}")
    x = embed_input(profile, cfg.bin_spec, params, mask)
    for layer in range(cfg.n_layers):
        x = encoder_layer(x, params, layer, rng, attention_sink)
    if cfg.n_layers:
        x = _layernorm(x, params, "final_ln")
    return x


def attention_maps(profile, params):
    """Per-layer ``[heads, L+1, L+1]`` attention matrices (exact mode, no dropout)."""
    cfg = params.config
    if cfg.attention_mode != "exact":
        params = EncoderParams(EncoderConfig(**{**cfg.to_dict(), "attention_mode": "exact"}),
                               params.tensors, params.features)
    sink = []
    encode(profile, params, rng=None, mode="no_grad", attention_sink=sink)
    return sink


def restore_full_sequence(hidden, profile, n_genes):
    """Dense ``[n_genes, d]`` matrix: expressed genes carry their hidden row, others are zero."""
    return ad.scatter_rows(hidden[1:], profile.positions, n_genes)


def pool_full_sequence(hidden, profile, params, prefix="pool"):
    """Restore the full gene sequence, ``1 x d`` convolution, ReLU, feed-forward.

    Returns a ``[1, out_dim]`` row.
    """
    cfg = params.config
    dense = restore_full_sequence(hidden, profile, cfg.n_genes)
    per_gene = ad.relu(_linear(dense, params, prefix + ".conv"))
    flat = ad.reshape(per_gene, (1, cfg.n_genes))
    return _linear(flat, params, prefix + ".ff")


def mlm_logits(hidden, params):
    """Bin-class logits for every non-CLS row."""
    return _linear(hidden[1:], params, "head.mlm")


def cls_logit(hidden, params):
    return _linear(hidden[0:1], params, "head.cls")

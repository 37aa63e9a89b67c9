"""Fine-tuning heads over pooled cell embeddings, and the evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, RngStream, Tape
from .checkpoint import load_arrays, save_arrays
from .encoder import EncoderConfig, EncoderParams, encode, restore_full_sequence
from .errors import ConfigError, DegenerateInputError, SchemaError, UsageError
from .objectives import mlm_loss

ACTIVATIONS = {"relu": ad.relu, "leaky_relu": ad.leaky_relu, "elu": ad.elu, "gelu": ad.gelu}


# metrics ---------------------------------------------------------------------

def _check_pair(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise UsageError("y_true and y_pred must be 1-D and equally long")
    if y_true.size == 0:
        raise UsageError("empty input")
    return y_true, y_pred


def accuracy(y_true, y_pred):
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(np.mean(y_true == y_pred))


def per_class_scores(y_true, y_pred):
    """``{class: (precision, recall, f1, support)}`` over classes seen in either array.

    A ratio with a zero denominator counts as 0.
    """
    y_true, y_pred = _check_pair(y_true, y_pred)
    out = {}
    for c in np.unique(np.concatenate([y_true, y_pred])):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[c.item() if hasattr(c, "item") else c] = (prec, rec, f1, tp + fn)
    return out


def macro_f1(y_true, y_pred):
    scores = per_class_scores(y_true, y_pred)
    return float(np.mean([s[2] for s in scores.values()]))


def weighted_f1(y_true, y_pred):
    """Support-weighted F1, normalised by the total support."""
    scores = per_class_scores(y_true, y_pred)
    support = np.array([s[3] for s in scores.values()], dtype=np.float64)
    f1 = np.array([s[2] for s in scores.values()])
    return float(np.sum(support * f1) / np.sum(support))


def confusion_matrix(y_true, y_pred, classes=None):
    y_true, y_pred = _check_pair(y_true, y_pred)
    if classes is None:
        classes = np.unique(np.concatenate([y_true, y_pred]))
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(cm, ([index[c] for c in y_true], [index[c] for c in y_pred]), 1)
    return cm


def _check_reg(y_true, y_pred, min_len=1):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise UsageError("y_true and y_pred must be 1-D and equally long")
    if y_true.size < min_len:
        raise UsageError(f"need at least {min_len} values")
    return y_true, y_pred


def pearson(y_true, y_pred):
    y, yh = _check_reg(y_true, y_pred, 2)
    n = y.size
    dy, dyh = y - y.mean(), yh - yh.mean()
    vy = np.sum(dy * dy) / (n - 1)
    vyh = np.sum(dyh * dyh) / (n - 1)
    if vy == 0 or vyh == 0:
        raise DegenerateInputError("pearson correlation undefined for zero variance")
    cov = np.sum(dy * dyh) / (n - 1)
    # one sqrt of the product keeps rho(y, y) == 1 exactly
    return float(np.clip(cov / math.sqrt(vy * vyh), -1.0, 1.0))


def r2(y_true, y_pred):
    y, yh = _check_reg(y_true, y_pred, 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise DegenerateInputError("R^2 undefined for constant targets")
    return float(1.0 - np.sum((y - yh) ** 2) / ss_tot)


def rmse(y_true, y_pred):
    y, yh = _check_reg(y_true, y_pred)
    return float(math.sqrt(np.mean((y - yh) ** 2)))


def mae(y_true, y_pred):
    y, yh = _check_reg(y_true, y_pred)
    return float(np.mean(np.abs(y - yh)))


@dataclass
class EvalReport:
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    weighted_f1: float = float("nan")
    pearson: float = float("nan")
    r2: float = float("nan")
    rmse: float = float("nan")
    mae: float = float("nan")
    per_class: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)
    n: int = 0

    def to_text(self):
        lines = [f"n = {self.n}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isnan(v):
                lines.append(f"{f.name} = {v!r}")
        for c, (p, r, f1, sup) in self.per_class.items():
            lines.append(f"precision[{c}] = {p!r}")
            lines.append(f"recall[{c}] = {r!r}")
            lines.append(f"f1[{c}] = {f1!r}")
            lines.append(f"support[{c}] = {sup}")
        if self.confusion:
            lines.append("confusion = " + ";".join(",".join(str(x) for x in row)
                                                    for row in self.confusion))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rep = cls()
        per = {}
        for line in text.splitlines():
            if "=" not in line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            if k == "n":
                rep.n = int(v)
            elif k == "confusion":
                rep.confusion = [[int(x) for x in row.split(",")] for row in v.split(";")]
            elif "[" in k:
                name, c = k[:-1].split("[", 1)
                per.setdefault(c, {})[name] = v
            else:
                setattr(rep, k, float(v))
        rep.per_class = {c: (float(d["precision"]), float(d["recall"]), float(d["f1"]),
                             int(d["support"])) for c, d in per.items()}
        return rep


def classification_report(y_true, y_pred):
    y_true, y_pred = _check_pair(y_true, y_pred)
    classes = np.unique(np.concatenate([y_true, y_pred]))
    return EvalReport(accuracy=accuracy(y_true, y_pred), macro_f1=macro_f1(y_true, y_pred),
                      weighted_f1=weighted_f1(y_true, y_pred),
                      per_class={str(k): v for k, v in per_class_scores(y_true, y_pred).items()},
                      confusion=confusion_matrix(y_true, y_pred, classes).tolist(),
                      n=int(y_true.size))


def regression_report(y_true, y_pred):
    y, yh = _check_reg(y_true, y_pred, 2)
    try:
        rho = pearson(y, yh)
    except DegenerateInputError:
        rho = float("nan")
    return EvalReport(pearson=rho, r2=r2(y, yh), rmse=rmse(y, yh), mae=mae(y, yh), n=int(y.size))


# heads -----------------------------------------------------------------------

def _dense_stack(tensors, prefix, widths, gen, dtype):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        tensors[f"{prefix}.{i}.w"] = Parameter(gen.normal(0, 1 / math.sqrt(a), (a, b)).astype(dtype),
                                               name=f"{prefix}.{i}.w")
        tensors[f"{prefix}.{i}.b"] = Parameter(np.zeros(b, dtype=dtype), name=f"{prefix}.{i}.b")


def _run_stack(x, tensors, prefix, n_layers, act, dropout_p, rng):
    for i in range(n_layers):
        x = ad.matmul(x, tensors[f"{prefix}.{i}.w"]) + tensors[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            x = act(x)
            if rng is not None and dropout_p > 0:
                x = ad.dropout(x, dropout_p, rng.derive(prefix, i))
    return x


class ClassifierHead:
    """Feed-forward classifier; ``widths`` runs from input width to class count."""

    def __init__(self, widths=(512, 128, 11), activation="relu", dropout_p=0.1, seed=0,
                 dtype=np.float64):
        if len(widths) < 2:
            raise ConfigError("a head needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.dropout_p = dropout_p
        self.tensors = {}
        _dense_stack(self.tensors, "cls", self.widths, np.random.default_rng(seed), dtype)

    @property
    def n_classes(self):
        return self.widths[-1]

    def parameters(self):
        return list(self.tensors.values())

    def logits(self, x, rng=None):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise SchemaError(f"classifier expects width {self.widths[0]}, got {x.shape[-1]}")
        return _run_stack(x, self.tensors, "cls", len(self.widths) - 1,
                          ACTIVATIONS[self.activation], self.dropout_p, rng)


def classify(cell_embedding, head):
    """Class probabilities (inference, no dropout)."""
    with ad.no_grad():
        logits = head.logits(cell_embedding).data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class RegressionHead:
    """Cell branch, concatenation with drug features, then the fusion stack to one output."""

    def __init__(self, input_width=512, cell_widths=(1024, 256), drug_width=256,
                 fusion_widths=(512, 512, 1), cell_activation="relu", fusion_activation="elu",
                 dropout_p=0.2, seed=0, dtype=np.float64):
        if fusion_widths[0] != cell_widths[-1] + drug_width:
            raise SchemaError(f"fusion input width {fusion_widths[0]} != cell width "
                              f"{cell_widths[-1]} + drug width {drug_width}")
        if fusion_widths[-1] != 1:
            raise SchemaError("regression output width must be 1")
        self.input_width = int(input_width)
        self.cell_widths = (self.input_width,) + tuple(int(w) for w in cell_widths)
        self.drug_width = int(drug_width)
        self.fusion_widths = tuple(int(w) for w in fusion_widths)
        self.cell_activation = cell_activation
        self.fusion_activation = fusion_activation
        self.dropout_p = dropout_p
        gen = np.random.default_rng(seed)
        self.tensors = {}
        _dense_stack(self.tensors, "cell", self.cell_widths, gen, dtype)
        _dense_stack(self.tensors, "fusion", self.fusion_widths, gen, dtype)

    def parameters(self):
        return list(self.tensors.values())

    def predict(self, cell_embedding, drug_features, rng=None):
        x = ad.as_tensor(cell_embedding)
        d = ad.as_tensor(drug_features)
        if x.shape[-1] != self.input_width:
            raise SchemaError(f"cell branch expects width {self.input_width}, got {x.shape[-1]}")
        if d.shape[-1] != self.drug_width:
            raise SchemaError(f"drug features must be {self.drug_width} wide, got {d.shape[-1]}")
        act = ACTIVATIONS[self.cell_activation]
        c = act(_run_stack(x, self.tensors, "cell", len(self.cell_widths) - 1, act,
                           self.dropout_p, rng))
        z = ad.concat([c, d], axis=-1)
        return _run_stack(z, self.tensors, "fusion", len(self.fusion_widths) - 1,
                          ACTIVATIONS[self.fusion_activation], self.dropout_p, rng)


def regress(cell_embedding, drug_features, head):
    with ad.no_grad():
        return head.predict(cell_embedding, drug_features).data[..., 0]


# fine-tuning -----------------------------------------------------------------

@dataclass
class TaskSpec:
    kind: str = "annotation"          # annotation | drug_sc | drug_line
    class_names: tuple = ()
    hidden: tuple = (128,)
    activation: str = "relu"
    dropout_p: float = 0.1
    freeze_encoder: bool = True
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    cell_widths: tuple = (1024, 256)
    drug_width: int = 256
    fusion_widths: tuple = (512, 512, 1)

    def __post_init__(self):
        if self.kind not in ("annotation", "drug_sc", "drug_line"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split must be three non-negative fractions summing to 1")

    @property
    def is_regression(self):
        return self.kind == "drug_line"


@dataclass
class Dataset:
    profiles: list
    labels: list
    groups: list | None = None
    drug_features: np.ndarray | None = None


def split_indices(n, fractions, seed=0, groups=None):
    """Train/val/test index arrays.  With ``groups`` whole groups go to one split (cold start)."""
    gen = np.random.default_rng(seed)
    if groups is None:
        perm = gen.permutation(n)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        return np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:])
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    perm = gen.permutation(uniq)
    n_tr = int(round(fractions[0] * len(uniq)))
    n_va = int(round(fractions[1] * len(uniq)))
    parts = (perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])
    return tuple(np.flatnonzero(np.isin(groups, p)) for p in parts)


class DownstreamModel:
    """Encoder plus its own pooling layers and a task head."""

    def __init__(self, encoder, task, head):
        self.encoder = encoder
        self.task = task
        self.head = head
        self.pool = {}
        for name in ("pool.conv.w", "pool.conv.b", "pool.ff.w", "pool.ff.b"):
            src = encoder[name]
            self.pool["ds." + name] = Parameter(src.data, name="ds." + name)

    def trainable(self):
        out = list(self.pool.values()) + self.head.parameters()
        if not self.task.freeze_encoder:
            out = [self.encoder[n] for n in self.encoder.encoder_parameter_names()] + out
        return out

    def pooled(self, hidden, profile):
        n_genes = self.encoder.config.n_genes
        dense = restore_full_sequence(hidden, profile, n_genes)
        per_gene = ad.relu(ad.matmul(dense, self.pool["ds.pool.conv.w"]) + self.pool["ds.pool.conv.b"])
        flat = ad.reshape(per_gene, (1, n_genes))
        return ad.matmul(flat, self.pool["ds.pool.ff.w"]) + self.pool["ds.pool.ff.b"]

    def outputs(self, hiddens, profiles, drug=None, rng=None):
        z = ad.concat([self.pooled(h, p) for h, p in zip(hiddens, profiles)])
        if self.task.is_regression:
            return self.head.predict(z, drug, rng)[:, 0]
        return self.head.logits(z, rng)

    def save(self, path):
        arrays = {n: p.data for n, p in self.pool.items()}
        arrays.update({"head." + n: p.data for n, p in self.head.tensors.items()})
        arrays.update({"encoder." + n: p.data for n, p in self.encoder.tensors.items()})
        for i, f in enumerate(self.encoder.features):
            arrays[f"favor.features.{i}"] = f
        meta = {"task": {f.name: getattr(self.task, f.name) for f in fields(self.task)},
                "encoder": self.encoder.config.to_dict(),
                "n_features": len(self.encoder.features)}
        save_arrays(path, meta, arrays)


def load_downstream(path):
    meta, arrays = load_arrays(path)
    if "task" not in meta:
        raise SchemaError(f"{path} is not a fine-tuned model")
    task_d = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["task"].items()}
    task = TaskSpec(**task_d)
    config = EncoderConfig.from_dict(meta["encoder"])
    tensors = {n[len("encoder."):]: Parameter(a, name=n[len("encoder."):])
               for n, a in arrays.items() if n.startswith("encoder.")}
    features = [arrays[f"favor.features.{i}"] for i in range(meta.get("n_features", 0))]
    encoder = EncoderParams(config, tensors, features)
    head = _make_head(task, config.proj_dim, config.dtype)
    for n in head.tensors:
        head.tensors[n].data[...] = arrays["head." + n]
    model = DownstreamModel(encoder, task, head)
    for n in model.pool:
        model.pool[n].data[...] = arrays[n]
    return model


def _make_head(task, in_width, dtype):
    if task.is_regression:
        return RegressionHead(in_width, task.cell_widths, task.drug_width, task.fusion_widths,
                              dropout_p=task.dropout_p, seed=task.seed, dtype=dtype)
    if not task.class_names:
        raise SchemaError("classification task needs class names")
    widths = (in_width,) + tuple(task.hidden) + (len(task.class_names),)
    act = task.activation if task.kind == "annotation" else "leaky_relu"
    return ClassifierHead(widths, act, task.dropout_p, task.seed, dtype)


def _targets(task, labels):
    if task.is_regression:
        return np.asarray(labels, dtype=np.float64)
    index = {c: i for i, c in enumerate(task.class_names)}
    unknown = sorted({str(lab) for lab in labels if lab not in index})
    if unknown:
        raise SchemaError(f"labels {unknown} are not among the head's classes {list(task.class_names)}")
    return np.array([index[lab] for lab in labels], dtype=np.int64)


def fine_tune(task, dataset, encoder, head=None):
    """Train pooling + head (and the encoder unless frozen); report on the test split.

    Returns ``(model, report, test_indices, test_predictions)``.
    """
    cfg = encoder.config
    if head is None:
        head = _make_head(task, cfg.proj_dim, cfg.dtype)
    if not task.is_regression and head.n_classes != len(task.class_names):
        raise SchemaError(f"head has {head.n_classes} outputs for {len(task.class_names)} classes")
    if task.is_regression and dataset.drug_features is None:
        raise SchemaError("regression task needs drug features")
    y = _targets(task, dataset.labels)
    model = DownstreamModel(encoder, task, head)
    tr, va, te = split_indices(len(dataset.profiles), task.split, task.seed, dataset.groups)
    if len(tr) == 0 or len(te) == 0:
        raise ConfigError("split leaves the train or test set empty")
    profiles = dataset.profiles
    frozen_h = None
    if task.freeze_encoder:
        frozen_h = [encode(p, encoder, rng=None, mode="no_grad") for p in profiles]
    params = model.trainable()
    opt = Adam(params, task.lr, weight_decay=task.weight_decay)
    root = RngStream(task.seed).derive("finetune")
    gen = root.generator()
    drug = dataset.drug_features

    def hiddens(idx, rng):
        if frozen_h is not None:
            return [frozen_h[i] for i in idx]
        return [encode(profiles[i], encoder, rng=None if rng is None else rng.derive("enc", int(i)))
                for i in idx]

    for epoch in range(task.epochs):
        order = gen.permutation(tr)
        for b in range(0, len(order), task.batch_size):
            idx = order[b:b + task.batch_size]
            rng = root.derive("epoch", epoch, "batch", b)
            ad.zero_grads(params)
            with Tape() as tape:
                out = model.outputs(hiddens(idx, rng), [profiles[i] for i in idx],
                                    None if drug is None else drug[idx], rng)
                if task.is_regression:
                    diff = out - y[idx]
                    loss = ad.mean(diff * diff)
                else:
                    loss = mlm_loss(out, y[idx])
            tape.backward(loss)
            opt.step()
    preds = predict(model, profiles, te, drug)
    if task.is_regression:
        report = regression_report(y[te], preds)
    else:
        report = classification_report(np.asarray(task.class_names)[y[te]],
                                        np.asarray(task.class_names)[preds])
    return model, report, te, preds


def predict(model, profiles, idx, drug=None):
    """Class indices (classification) or values (regression) for ``profiles[idx]``."""
    with ad.no_grad():
        hs = [encode(profiles[i], model.encoder, rng=None) for i in idx]
        out = model.outputs(hs, [profiles[i] for i in idx], None if drug is None else drug[idx]).data
    if model.task.is_regression:
        return out
    return out.argmax(axis=-1)

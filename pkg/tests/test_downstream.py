import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcell import downstream as ds
from gradcell.autodiff import Parameter, RngStream
from gradcell.errors import DegenerateInputError, SchemaError, UsageError
from gradcell.preprocess import SparseProfile

from helpers import gradcheck, small_params


# naive oracles ------------------------------------------------------------------

def oracle_classification(y_true, y_pred):
    classes = sorted(set(y_true) | set(y_pred))
    f1s, weights = [], []
    for c in classes:
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if p == c and t == c:
                tp += 1
            elif p == c:
                fp += 1
            elif t == c:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        weights.append(tp + fn)
    acc = sum(t == p for t, p in zip(y_true, y_pred)) / len(y_true)
    macro = sum(f1s) / len(f1s)
    weighted = sum(w * f for w, f in zip(weights, f1s)) / sum(weights)
    return acc, macro, weighted


def oracle_regression(y, yh):
    n = len(y)
    my, myh = sum(y) / n, sum(yh) / n
    cov = sum((a - my) * (b - myh) for a, b in zip(y, yh)) / (n - 1)
    sy = math.sqrt(sum((a - my) ** 2 for a in y) / (n - 1))
    syh = math.sqrt(sum((b - myh) ** 2 for b in yh) / (n - 1))
    ss_res = sum((a - b) ** 2 for a, b in zip(y, yh))
    ss_tot = sum((a - my) ** 2 for a in y)
    return (cov / (sy * syh), 1 - ss_res / ss_tot, math.sqrt(ss_res / n),
            sum(abs(a - b) for a, b in zip(y, yh)) / n)


# metrics --------------------------------------------------------------------------

def test_perfect_prediction():
    y = ["b", "a", "c", "a"]
    assert ds.accuracy(y, y) == ds.macro_f1(y, y) == ds.weighted_f1(y, y) == 1.0


def test_hand_two_class_case():
    y_true, y_pred = [1, 1, 0, 0], [1, 0, 0, 0]
    scores = ds.per_class_scores(y_true, y_pred)
    assert scores[1][2] == pytest.approx(2 / 3, abs=1e-15)
    assert scores[0][2] == pytest.approx(4 / 5, abs=1e-15)
    assert ds.macro_f1(y_true, y_pred) == pytest.approx(11 / 15, abs=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_classification_matches_oracle(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(1, 60))
    k = int(gen.integers(2, 6))
    y_true = gen.integers(0, k, size=n).tolist()
    y_pred = gen.integers(0, k, size=n).tolist()
    acc, macro, weighted = oracle_classification(y_true, y_pred)
    assert abs(ds.accuracy(y_true, y_pred) - acc) <= 1e-12
    assert abs(ds.macro_f1(y_true, y_pred) - macro) <= 1e-12
    assert abs(ds.weighted_f1(y_true, y_pred) - weighted) <= 1e-12


@pytest.mark.parametrize("seed", range(100))
def test_regression_matches_oracle(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(2, 50))
    y = gen.normal(size=n).tolist()
    yh = (np.asarray(y) * gen.normal() + gen.normal(size=n)).tolist()
    rho, r2v, rm, ma = oracle_regression(y, yh)
    assert abs(ds.pearson(y, yh) - rho) <= 1e-12
    assert abs(ds.r2(y, yh) - r2v) <= 1e-12
    assert abs(ds.rmse(y, yh) - rm) <= 1e-12
    assert abs(ds.mae(y, yh) - ma) <= 1e-12


def test_regression_hand_case():
    y, yh = [1.0, 2.0, 3.0], [2.0, 2.0, 2.0]
    assert ds.r2(y, yh) == 0.0
    assert ds.rmse(y, yh) == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert ds.mae(y, yh) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        ds.pearson(y, yh)


def test_regression_identity_and_anticorrelation():
    y = np.array([-2.0, -0.5, 0.5, 2.0])
    assert ds.pearson(y, y) == 1.0 and ds.r2(y, y) == 1.0
    assert ds.rmse(y, y) == 0.0 and ds.mae(y, y) == 0.0
    assert ds.pearson(y, -y) == -1.0


def test_metric_input_errors():
    with pytest.raises(UsageError):
        ds.accuracy([], [])
    with pytest.raises(UsageError):
        ds.macro_f1([1, 2], [1])
    with pytest.raises(UsageError):
        ds.pearson([1.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_weighted_equals_macro_with_equal_support(k, per_class, seed):
    gen = np.random.default_rng(seed)
    y_true = np.repeat(np.arange(k), per_class)
    y_pred = gen.integers(0, k, size=y_true.size)
    # weighted == macro only holds when every scored class has equal support
    if set(y_pred) <= set(y_true):
        assert ds.weighted_f1(y_true, y_pred) == pytest.approx(ds.macro_f1(y_true, y_pred), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.integers(0, 10 ** 6))
def test_rmse_at_least_mae(y, seed):
    yh = np.random.default_rng(seed).normal(size=len(y)) * 10
    assert ds.rmse(y, yh) >= ds.mae(y, yh) - 1e-12
    assert ds.mae(y, yh) >= 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 100.0), st.floats(-100.0, 100.0))
def test_pearson_affine_invariance(seed, a, b):
    gen = np.random.default_rng(seed)
    y, yh = gen.normal(size=20), gen.normal(size=20)
    assert ds.pearson(a * y + b, yh) == pytest.approx(ds.pearson(y, yh), abs=1e-12)
    assert ds.pearson(y, a * yh + b) == pytest.approx(ds.pearson(y, yh), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(0, 10 ** 6))
def test_classification_scores_in_unit_interval(y_true, seed):
    y_pred = np.random.default_rng(seed).integers(0, 4, size=len(y_true))
    for f in (ds.accuracy, ds.macro_f1, ds.weighted_f1):
        assert 0.0 <= f(y_true, y_pred) <= 1.0


def test_report_text_round_trip():
    rep = ds.classification_report(["a", "b", "a", "c"], ["a", "a", "a", "c"])
    back = ds.EvalReport.from_text(rep.to_text())
    assert back == rep
    reg = ds.regression_report([1.0, 2.0, 4.0], [1.5, 2.0, 3.0])
    assert ds.EvalReport.from_text(reg.to_text()).to_text() == reg.to_text()


def test_confusion_matrix():
    cm = ds.confusion_matrix([0, 0, 1, 2], [0, 1, 1, 0])
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [1, 0, 0]])


# heads -------------------------------------------------------------------------

def test_zero_head_gives_uniform_probabilities():
    head = ds.ClassifierHead((6, 4, 3), seed=0)
    for p in head.parameters():
        p.data[...] = 0.0
    probs = ds.classify(np.random.default_rng(0).normal(size=(5, 6)), head)
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)


def test_probabilities_sum_to_one():
    head = ds.ClassifierHead((6, 8, 4), activation="gelu", seed=1)
    probs = ds.classify(np.random.default_rng(1).normal(size=(10, 6)) * 5, head)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_head_width_mismatch():
    head = ds.ClassifierHead((6, 3))
    with pytest.raises(SchemaError):
        ds.classify(np.ones((1, 5)), head)
    with pytest.raises(SchemaError):
        ds.RegressionHead(8, (16, 4), 3, (6, 4, 1))
    reg = ds.RegressionHead(8, (16, 4), 3, (7, 4, 1))
    with pytest.raises(SchemaError):
        ds.regress(np.ones((1, 8)), np.ones((1, 2)), reg)
    assert ds.regress(np.ones((2, 8)), np.ones((2, 3)), reg).shape == (2,)


@pytest.mark.parametrize("activation", ["relu", "leaky_relu", "elu", "gelu"])
def test_head_gradients(activation):
    from gradcell.objectives import mlm_loss
    head = ds.ClassifierHead((5, 7, 3), activation=activation, seed=2)
    for p in head.parameters():
        p.data += np.random.default_rng(3).normal(0, 0.1, p.data.shape)
    x = np.random.default_rng(4).normal(size=(6, 5))
    y = np.array([0, 1, 2, 0, 1, 2])
    err, _ = gradcheck(lambda: mlm_loss(head.logits(x), y), head.parameters(), n_coords=10)
    assert err <= 1e-4


def test_regression_head_gradients():
    from gradcell import autodiff as ad
    head = ds.RegressionHead(5, (6, 4), 3, (7, 5, 1), seed=3)
    for p in head.parameters():
        p.data += np.random.default_rng(5).normal(0, 0.1, p.data.shape)
    gen = np.random.default_rng(6)
    x, d, y = gen.normal(size=(4, 5)), gen.normal(size=(4, 3)), gen.normal(size=4)

    def loss():
        diff = head.predict(x, d)[:, 0] - y
        return ad.mean(diff * diff)

    err, _ = gradcheck(loss, head.parameters(), n_coords=10)
    assert err <= 1e-4


# fine-tuning ---------------------------------------------------------------------

def separable_dataset(n=80, n_genes=12, seed=0):
    """Two classes expressing disjoint gene halves."""
    gen = np.random.default_rng(seed)
    half = n_genes // 2
    profiles, labels = [], []
    for i in range(n):
        c = i % 2
        genes = np.sort(gen.choice(half, size=3, replace=False)) + c * half
        profiles.append(SparseProfile(genes, gen.uniform(0.5, 6.0, 3)))
        labels.append("B" if c else "A")
    return ds.Dataset(profiles, labels)


def _task(**kw):
    base = dict(kind="annotation", class_names=("A", "B"), hidden=(8,), epochs=15, lr=1e-2,
                batch_size=16, split=(0.6, 0.1, 0.3), seed=0, dropout_p=0.0)
    base.update(kw)
    return ds.TaskSpec(**base)


def test_fine_tune_separable_task():
    encoder = small_params(seed=0)
    _, report, test_idx, preds = ds.fine_tune(_task(), separable_dataset(), encoder)
    assert report.accuracy >= 0.95
    assert len(preds) == len(test_idx) == report.n


def test_frozen_encoder_unchanged_and_deterministic():
    encoder = small_params(seed=1)
    before = encoder.snapshot()
    _, rep1, _, _ = ds.fine_tune(_task(epochs=3), separable_dataset(), encoder)
    for n, p in encoder.tensors.items():
        assert p.data.tobytes() == before[n].tobytes()
    _, rep2, _, _ = ds.fine_tune(_task(epochs=3), separable_dataset(), encoder)
    assert rep1.to_text() == rep2.to_text()


def test_unfrozen_encoder_moves():
    encoder = small_params(seed=2)
    before = encoder.snapshot()
    ds.fine_tune(_task(epochs=1, freeze_encoder=False), separable_dataset(n=20), encoder)
    assert any(not np.array_equal(encoder[n].data, before[n]) for n in encoder.encoder_parameter_names())


def test_label_set_mismatch():
    encoder = small_params()
    with pytest.raises(SchemaError):
        ds.fine_tune(_task(class_names=("A", "C")), separable_dataset(n=10), encoder)
    with pytest.raises(SchemaError):
        ds.fine_tune(_task(), separable_dataset(n=10), encoder, head=ds.ClassifierHead((8, 3)))


def test_regression_fine_tune_runs():
    encoder = small_params(seed=3)
    data = separable_dataset(n=30)
    gen = np.random.default_rng(0)
    data.labels = [float(i % 2) + gen.normal(0, 0.1) for i in range(30)]
    data.drug_features = gen.normal(size=(30, 4))
    task = ds.TaskSpec(kind="drug_line", cell_widths=(8, 4), drug_width=4, fusion_widths=(8, 4, 1),
                       epochs=5, lr=1e-2, split=(0.6, 0.1, 0.3), dropout_p=0.0)
    _, report, te, preds = ds.fine_tune(task, data, encoder)
    assert report.rmse >= report.mae >= 0
    assert preds.shape == te.shape


def test_group_split_keeps_groups_whole():
    groups = [f"line{i // 4}" for i in range(40)]
    tr, va, te = ds.split_indices(40, (0.6, 0.2, 0.2), seed=1, groups=groups)
    g = np.asarray(groups)
    assert not set(g[tr]) & set(g[te]) and not set(g[tr]) & set(g[va])
    assert len(tr) + len(va) + len(te) == 40


def test_downstream_model_save_load(tmp_path):
    encoder = small_params(seed=4)
    data = separable_dataset(n=20)
    model, _, te, preds = ds.fine_tune(_task(epochs=2), data, encoder)
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = ds.load_downstream(path)
    np.testing.assert_array_equal(ds.predict(back, data.profiles, te), preds)

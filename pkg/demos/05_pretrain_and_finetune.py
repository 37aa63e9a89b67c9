import json
import tempfile
from pathlib import Path

import numpy as np

from gradcell import downstream as ds
from gradcell.checkpoint import load_checkpoint
from gradcell.config import tiny_run_config
from gradcell.preprocess import profiles_from_counts, synthetic_counts
from gradcell.trainer import pretrain

spacer = "_" * 60
work = Path(tempfile.mkdtemp(prefix="gradcell-demo-"))

print("Pre-training a tiny encoder on a synthetic corpus (30 steps)")
counts, programs = synthetic_counts(128, 64, density=0.15, seed=0)
labels = ["cancer" if p else "normal" for p in programs]
profiles = profiles_from_counts(counts, labels)
cfg = tiny_run_config(steps=30)
records = pretrain(profiles, cfg, work / "pretrain")
for r in records[::10] + [records[-1]]:
    print(f"step {r['step']:>3d}  L_CL {r['L_CL']:.4f}  L_MLM {r['L_MLM']:.4f}  "
          f"L_CLS {r['L_CLS']:.4f}  loss {r['loss']:.4f}")
print("metrics log:", work / "pretrain" / "metrics.jsonl")

print(spacer)

print("\nFine-tuning a cell-type head on the frozen encoder")
encoder, meta, _ = load_checkpoint(work / "pretrain" / "latest.ckpt")
print("checkpoint step", meta["step"])
task = ds.TaskSpec(kind="annotation", class_names=("normal", "cancer"), hidden=(16,),
                   epochs=20, lr=1e-2, split=(0.6, 0.1, 0.3))
model, report, test_idx, preds = ds.fine_tune(task, ds.Dataset(profiles, labels), encoder)
print(report.to_text())

print(spacer)

print("Metrics are plain functions of labels and predictions")
y_true = np.array(labels)[test_idx]
y_pred = np.array(task.class_names)[preds]
print("accuracy   ", ds.accuracy(y_true, y_pred))
print("macro F1   ", ds.macro_f1(y_true, y_pred))
print("weighted F1", ds.weighted_f1(y_true, y_pred))
print(json.dumps({k: list(v) for k, v in report.per_class.items()}, indent=1))

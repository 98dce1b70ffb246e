"""
Learning from historical evidence
=================================

The synthetic fault task hides each class signature in two random
historical rows of a 30-step window. The current row is pure noise, so a
classifier that only sees the present cannot beat chance. The relation
unit has to find the informative rows.
"""

import numpy as np

from dptrn import SyntheticSpec, TrainConfig
from dptrn.experiment import current_node_only, model_config_for, run, synthetic_splits

EPOCHS = 15  # 60 for the full protocol

spec = SyntheticSpec()
splits = synthetic_splits(spec)
print("train windows:", splits.train[0].shape, " test windows:", splits.test[0].shape)

###############################################################################
# Train the full model and watch the validation curve.

model, log, metrics = run(splits, model_config_for(splits, spec.C), TrainConfig(epochs=EPOCHS))
for epoch, train_loss, val_loss, val_acc, _ in log.rows:
    print(f"epoch {epoch:2d}  train {train_loss:.3f}  valid {val_loss:.3f}  acc {val_acc:.3f}")
print(f"selected epoch {log.selected_epoch}, test accuracy {metrics['accuracy']:.3f}")

###############################################################################
# The same data with every window cut to its last row.

last = current_node_only(splits)
_, _, base = run(last, model_config_for(last, spec.C, "flatten_mlp"), TrainConfig(epochs=EPOCHS))
print(f"current node only: {base['accuracy']:.3f} (chance {1 / spec.C:.2f})")
print("confusion matrix of the full model:")
print(np.asarray(metrics["confusion"]))

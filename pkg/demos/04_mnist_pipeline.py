"""The full flow on handwritten digits, then a task switch.

Part 1 trains an electronic twin of a small CNN, calibrates the photonic
copy, maps the twin's weights onto it and fine-tunes the singular values
in situ. Part 2 keeps the mapped unitaries of a model built for digits 0-4,
resets its classifier and adapts it to digits 5-9, next to a model trained
from scratch with the same step budget.

Needs the optional mlxtend package for the 5000-image digit subset.
Takes several minutes.

Run:  python3 demos/04_mnist_pipeline.py
"""

import tempfile

from ptclearn.config import ExperimentConfig
from ptclearn.nn import AdamW
from ptclearn.pipeline import RunState, build_model, init_from_scratch, load_dataset, reset_classifier, run_pipeline
from ptclearn.subspace import evaluate, train_epoch

root = tempfile.mkdtemp(prefix="ptclearn-mnist-")

# part 1: IC -> PM -> SL
cfg = ExperimentConfig.from_dict({"output_dir": f"{root}/full", "model": {"preset": "cnn-s"}, "dataset": {"kind": "mnist-subset"}})
state = run_pipeline(cfg, log=print)
print(f"twin {state.twin_acc:.3f} -> photonic after SL {state.metrics[-1].test_acc:.3f}\n")

# part 2: frozen-unitary transfer
base = {"model": {"preset": "cnn-s"}, "ic": {"epochs": 100}, "pm": {"epochs": 100}, "sl": {"enabled": False}}
old = [0, 1, 2, 3, 4]
new = [5, 6, 7, 8, 9]
pre = run_pipeline(ExperimentConfig.from_dict({**base, "output_dir": f"{root}/pre", "dataset": {"kind": "mnist-subset", "train_classes": old, "test_classes": old}}))
new_cfg = ExperimentConfig.from_dict({**base, "output_dir": f"{root}/new", "dataset": {"kind": "mnist-subset", "train_classes": new, "test_classes": new}})
data = load_dataset(new_cfg)
reset_classifier(pre.model)
scratch = RunState(new_cfg, data, build_model(new_cfg))
init_from_scratch(scratch)
for name, model in (("transfer", pre.model), ("scratch", scratch.model)):
    opt, curve = AdamW(2e-3, weight_decay=0.01), []
    for chunk in range(30):
        train_epoch(model, data.train, new_cfg.sampling, opt, chunk, 30, 32, seed=0, max_steps=10)
        curve.append(evaluate(model, data.test)[1])
    print(f"{name:8s} test accuracy every 10 steps: " + " ".join(f"{a:.2f}" for a in curve[::3]))

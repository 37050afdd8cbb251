"""Training only the singular values, with sparse feedback.

A small photonic MLP learns a 4-class blob problem from scratch. The
unitaries stay frozen; each step measures the sigma gradient in situ and
sends the error back through only 60% of the blocks (balanced top-k). The
profiler then compares the run's PTC calls and accumulation steps with a
dense baseline.

Run:  python3 demos/03_subspace_training.py
"""

import json
import tempfile

from ptclearn.config import ExperimentConfig
from ptclearn.pipeline import run_pipeline

out = tempfile.mkdtemp(prefix="ptclearn-demo-")
cfg = ExperimentConfig.from_dict(
    {
        "seed": 3,
        "output_dir": out,
        "model": {"preset": "custom", "input_shape": [8], "num_classes": 4, "layers": [
            {"kind": "linear", "in_features": 8, "out_features": 36},
            {"kind": "relu"},
            {"kind": "linear", "in_features": 36, "out_features": 36},
            {"kind": "relu"},
            {"kind": "linear", "in_features": 36, "out_features": 4},
        ]},
        "ic": {"enabled": False},
        "pm": {"enabled": False},
        "sl": {"epochs": 30},
        "sampling": {"feedback_mode": "btopk", "alpha_w": 0.6, "data_alpha_d": 0.8},
    }
)
state = run_pipeline(cfg, log=print)
cost = json.load(open(f"{out}/cost.json"))["stages"]["SL"]
print(f"\nfinal train accuracy {state.metrics[-1].acc:.3f}, test {state.metrics[-1].test_acc:.3f}")
print(f"dense / sparse PTC calls: {cost['energy_ratio']:.2f}x, accumulation steps: {cost['step_ratio']:.2f}x")
print(f"artifacts in {out}")

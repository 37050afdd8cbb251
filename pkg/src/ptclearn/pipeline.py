"""Stage orchestration: identity calibration, parallel mapping, subspace learning.

``run_pipeline`` executes the enabled stages in order and writes everything a
run produces into ``config.output_dir``:

    config.yaml              echo of the resolved configuration
    twin_metrics.csv         electronic twin training (mapping target / reference)
    checkpoint_<stage>.json  phase programs after IC, PM and SL
    ic_report.json, pm_report.json, mapping_<layer>.csv
    metrics.csv              per-epoch SL metrics
    cost.json, cost.csv      profiler report (SL vs dense baseline, IC/PM call counts)
    plot_ic.csv, plot_pm.csv loss vs. PTC calls per ZO epoch
    plot_sl.csv              loss / accuracy vs. cumulative PTC calls and steps

No stage reads files written by an earlier run, so disabling PM makes SL
start from scratch regardless of what is on disk.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .calibrate import PreconditionError, identity_calibrate, parallel_map
from .config import ConfigError, ExperimentConfig, LayerSpec
from .cost import CostReport, stage_cost
from .data import DatasetHandle, Split, export_mnist_subset_idx, load_idx_dataset, make_blobs
from .nn import (
    AdamW,
    AdaptiveAvgPool2d,
    AvgPool2d,
    Conv2d,
    Flatten,
    Linear,
    NumericalAbort,
    PhotonicConv2d,
    PhotonicLinear,
    ReLU,
    Sequential,
    ShapeError,
)
from .subspace import EpochMetrics, evaluate, metrics_csv, train_epoch
from .zoo import ZooError

STAGES = ("IC", "PM", "SL")


class StageError(RuntimeError):
    """A stage precondition or optimizer failure, tagged with stage, layer and block coordinates."""

    def __init__(self, stage: str, layer: int, message: str, blocks=()):
        self.stage, self.layer, self.blocks = stage, layer, list(blocks)
        where = f" blocks {self.blocks}" if self.blocks else ""
        super().__init__(f"{stage} failed on photonic layer {layer}{where}: {message}")


# -- model and data --------------------------------------------------------


def _layer(spec: LayerSpec, k: int, noise, stream: int, rng, photonic_ok: bool):
    photonic = spec.photonic and photonic_ok
    if spec.kind == "linear":
        if photonic:
            return PhotonicLinear(spec.in_features, spec.out_features, k, noise, (stream,))
        return Linear(spec.in_features, spec.out_features, rng)
    if spec.kind == "conv2d":
        if photonic:
            return PhotonicConv2d(spec.in_features, spec.out_features, spec.kernel, spec.stride, spec.padding, k, noise, (stream,))
        return Conv2d(spec.in_features, spec.out_features, spec.kernel, spec.stride, spec.padding, rng)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "avgpool":
        return AvgPool2d(spec.size)
    return AdaptiveAvgPool2d(spec.size)


def build_model(cfg: ExperimentConfig, photonic: bool = True) -> Sequential:
    """Photonic model (or its electronic twin with ``photonic=False``), shape-checked up front."""
    rng = np.random.default_rng([cfg.seed, 7])
    layers, stream = [], 0
    for spec in cfg.model.layer_specs():
        layers.append(_layer(spec, cfg.model.k, cfg.noise, stream, rng, photonic))
        if spec.kind in ("linear", "conv2d"):
            stream += 1
    model = Sequential(*layers)
    try:
        out = model.output_shape(cfg.model.shape)
    except ShapeError as e:
        raise ConfigError(f"model does not fit input shape {cfg.model.shape}: {e}") from e
    if tuple(out) != (cfg.model.classes,):
        raise ConfigError(f"model produces {out}, expected ({cfg.model.classes},) logits")
    return model


def default_mnist_cache() -> str:
    return os.path.join(tempfile.gettempdir(), "ptclearn-mnist-subset")


def load_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    d = cfg.dataset
    if d.kind == "blobs":
        data = make_blobs(d.n_train, d.n_test, d.classes, d.features, d.spread, cfg.seed)
    else:
        path = d.path
        if d.kind == "mnist-subset":
            path = path or default_mnist_cache()
            if not os.path.exists(os.path.join(path, "t10k-labels-idx1-ubyte")):
                try:
                    export_mnist_subset_idx(path)
                except ImportError as e:
                    raise ConfigError("dataset kind mnist-subset needs the optional mlxtend package") from e
        try:
            data = load_idx_dataset(path, d.mean, d.std, name=d.kind, limit=d.limit)
        except FileNotFoundError as e:
            raise ConfigError(str(e)) from e
        if d.kind == "mnist-subset":
            data.notes["subset"] = "5000-image MNIST subset, 4000 train / 1000 test"
    if d.train_classes is not None:
        data.train = data.train.subset(d.train_classes)
    if d.test_classes is not None:
        data.test = data.test.subset(d.test_classes)
    want = tuple(cfg.model.shape)
    for split in (data.train, data.test):
        if len(split) and split.x.shape[1:] != want:
            if int(np.prod(split.x.shape[1:])) != int(np.prod(want)):
                raise ConfigError(f"dataset samples {split.x.shape[1:]} do not fit model input {want}")
            split.x = split.x.reshape((len(split),) + want)
    return data


# -- checkpoints -----------------------------------------------------------


def checkpoint_dict(model: Sequential, stage: str, seed: int) -> dict:
    electronic = [p.value.tolist() for p in model.params()]
    return {
        "stage": stage,
        "seed": seed,
        "layers": [layer.ptc.to_dict() for layer in model.photonic_layers],
        "electronic": electronic,
    }


def load_checkpoint(model: Sequential, d: dict):
    layers = model.photonic_layers
    if len(d.get("layers", [])) != len(layers):
        raise ConfigError(f"checkpoint has {len(d.get('layers', []))} photonic layers, model has {len(layers)}")
    try:
        for layer, entry in zip(layers, d["layers"]):
            layer.ptc.load_dict(entry)
        params = model.params()
        if len(d.get("electronic", [])) != len(params):
            raise ConfigError("checkpoint electronic parameters do not match the model")
        for p, value in zip(params, d["electronic"]):
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ConfigError(f"checkpoint parameter shape {arr.shape} does not match {p.value.shape}")
            p.value[...] = arr
    except (KeyError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"malformed checkpoint: {e}") from e


def read_checkpoint(path: str) -> dict:
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"checkpoint {path} is not a JSON object")
    return d


# -- stages ----------------------------------------------------------------


@dataclass
class RunState:
    cfg: ExperimentConfig
    data: DatasetHandle
    model: Sequential
    twin: Sequential | None = None
    twin_acc: float | None = None
    reports: dict = field(default_factory=dict)
    stage_calls: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    cost: CostReport | None = None
    baseline: CostReport | None = None
    mapped: bool = False


def train_twin(cfg: ExperimentConfig, data: DatasetHandle) -> tuple[Sequential, list[EpochMetrics]]:
    """Train the electronic twin whose weights are the mapping targets."""
    twin = build_model(cfg, photonic=False)
    opt = AdamW(cfg.twin.lr, weight_decay=cfg.twin.weight_decay)
    rows = []
    for epoch in range(cfg.twin.epochs):
        m = train_epoch(twin, data.train, _dense_plan(), opt, epoch, cfg.twin.epochs, cfg.twin.batch_size, seed=cfg.seed + 1)
        m.test_loss, m.test_acc = evaluate(twin, data.test)
        rows.append(m)
    return twin, rows


def _dense_plan():
    from .sampling import SamplingPlan

    return SamplingPlan.dense()


def run_ic(state: RunState) -> dict:
    cfg = state.cfg
    sched = cfg.ic.schedule(cfg.noise.bitwidth_unitary)
    reports = []
    for i, layer in enumerate(state.model.photonic_layers):
        try:
            rep = identity_calibrate(layer.ptc, cfg.ic.optimizer, sched, cfg.ic.epochs, seed=(cfg.seed, i), workers=cfg.workers)
        except (PreconditionError, ZooError) as e:
            raise StageError("IC", i, str(e)) from e
        reports.append(rep)
    state.reports["IC"] = reports
    state.stage_calls["IC"] = int(sum(r.calls.sum() for r in reports))
    return {"stage": "IC", "layers": [r.to_dict() for r in reports]}


def _electronic_pairs(model: Sequential, twin: Sequential):
    return [(a, b) for a, b in zip(model.layers, twin.layers) if a is not b]


def run_pm(state: RunState) -> dict:
    cfg = state.cfg
    if state.twin is None:
        raise StageError("PM", 0, "no mapping target: the electronic twin was not trained")
    sched = cfg.pm.schedule(cfg.noise.bitwidth_unitary)
    reports = []
    for i, (layer, ref) in enumerate(zip(state.model.photonic_layers, [l for l in state.twin.layers if isinstance(l, (Linear, Conv2d))])):
        target = ref.weight.value
        if not np.all(np.isfinite(target)):
            raise StageError("PM", i, "mapping target contains non-finite entries")
        try:
            rep = parallel_map(
                layer.ptc,
                layer.ptc.target_blocks(target),
                cfg.pm.optimizer,
                sched,
                cfg.pm.epochs,
                seed=(cfg.seed, i),
                ideal_osp=cfg.pm.ideal_osp,
                mask=layer.ptc.real_mask(),
                workers=cfg.workers,
                osp_guard=cfg.pm.osp_guard,
                offset=cfg.pm.init_offset and cfg.ic.enabled,
            )
        except (PreconditionError, ZooError) as e:
            raise StageError("PM", i, str(e)) from e
        if layer.bias is not None and ref.bias is not None:
            layer.bias.value[...] = ref.bias.value
        reports.append(rep)
    # electronic layers of the photonic model take the twin's values
    for a, b in zip(state.model.layers, state.twin.layers):
        if not getattr(a, "photonic", False):
            for pa, pb in zip(a.params(), b.params()):
                pa.value[...] = pb.value
    state.reports["PM"] = reports
    state.stage_calls["PM"] = int(sum(r.calls.sum() for r in reports))
    state.mapped = True
    return {"stage": "PM", "layers": [r.to_dict() for r in reports]}


def init_from_scratch(state: RunState):
    """Random Kaiming weights on every photonic layer (no mapping target involved)."""
    for i, layer in enumerate(state.model.photonic_layers):
        rng = np.random.default_rng([state.cfg.seed, 3, 1000 + i])
        layer.init_random(rng, layer.ptc.in_features)


def reset_classifier(model: Sequential):
    """Zero the last photonic layer's singular values and bias, keeping its unitaries.

    Used when adapting a mapped model to a new task: the inherited bases stay
    frozen while the old task's output head is discarded.
    """
    head = model.photonic_layers[-1]
    head.write_sigma(np.zeros_like(head.sigma_values()))
    if head.bias is not None:
        head.bias.value[...] = 0.0


def run_sl(state: RunState, on_epoch=None) -> list[EpochMetrics]:
    cfg = state.cfg
    epochs, lr = cfg.sl.resolved(state.mapped)
    opt = AdamW(lr, weight_decay=cfg.sl.weight_decay)
    state.cost = state.cost or CostReport()
    state.baseline = state.baseline or CostReport()
    for epoch in range(epochs):
        m = train_epoch(
            state.model,
            state.data.train,
            cfg.sampling,
            opt,
            epoch,
            epochs,
            cfg.sl.batch_size,
            seed=cfg.seed,
            train_electronic=cfg.sl.train_electronic,
            lr_min=cfg.sl.lr_min,
            max_steps=cfg.sl.max_steps_per_epoch,
            cost=state.cost,
            baseline=state.baseline,
        )
        m.test_loss, m.test_acc = evaluate(state.model, state.data.test)
        state.metrics.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return state.metrics


# -- outputs ---------------------------------------------------------------


def _write(path: str, text: str):
    with open(path, "w") as f:
        f.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _zo_plot_rows(reports, k: int) -> list:
    rows = []
    for i, rep in enumerate(reports):
        for epoch, calls, loss in rep.trace_rows():
            # every objective call probes k basis vectors
            rows.append([i, epoch, calls * k, repr(loss)])
    return rows


def cost_summary(state: RunState) -> dict:
    cfg = state.cfg
    out = {"stages": {}}
    layers = state.model.photonic_layers
    k = cfg.model.k
    n_equiv = int(round(np.sqrt(np.mean([l.ptc.in_features * l.ptc.out_features for l in layers])))) if layers else 0
    for stage, key in (("IC", "ic"), ("PM", "pm")):
        if stage in state.stage_calls:
            epochs = getattr(cfg, key).epochs
            out["stages"][stage] = {
                "objective_calls": state.stage_calls[stage],
                "ptc_calls": state.stage_calls[stage] * k,
                "projected": stage_cost(stage, len(layers), n_equiv, k, epochs),
            }
    if state.cost is not None:
        state.cost.set_baseline("dense", state.baseline)
        out["stages"]["SL"] = state.cost.to_dict()
        out["stages"]["SL"]["measured_counters"] = state.model.energy()
    return out


def run_pipeline(cfg: ExperimentConfig, stages=None, checkpoint: dict | None = None, log=None) -> RunState:
    """Run the enabled stages and write all artifacts; returns the final in-memory state.

    ``stages`` restricts the run to a subset of ``("IC", "PM", "SL")`` (on top
    of the ``enabled`` flags); ``checkpoint`` seeds the photonic model before
    the first stage.
    """
    log = log or (lambda msg: None)
    wanted = {s.upper() for s in (stages or STAGES)}
    unknown = wanted - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages {sorted(unknown)}")
    enabled = {
        "IC": cfg.ic.enabled and "IC" in wanted,
        "PM": cfg.pm.enabled and "PM" in wanted,
        "SL": cfg.sl.enabled and "SL" in wanted,
    }
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.yaml"))
    data = load_dataset(cfg)
    model = build_model(cfg)
    state = RunState(cfg, data, model)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
        state.mapped = checkpoint.get("stage") in ("PM", "SL")

    if enabled["PM"]:
        log(f"training electronic twin for {cfg.twin.epochs} epochs")
        state.twin, rows = train_twin(cfg, data)
        state.twin_acc = rows[-1].test_acc if rows else evaluate(state.twin, data.test)[1]
        _write(os.path.join(out, "twin_metrics.csv"), metrics_csv(rows))

    if enabled["IC"]:
        log(f"IC: {cfg.ic.epochs} epochs of {cfg.ic.optimizer} on {len(model.photonic_layers)} layers")
        report = run_ic(state)
        _write(os.path.join(out, "ic_report.json"), json.dumps(report, indent=2))
        _write(os.path.join(out, "plot_ic.csv"), _csv(["layer", "epoch", "ptc_calls", "mean_loss"], _zo_plot_rows(state.reports["IC"], cfg.model.k)))
        _write(os.path.join(out, "checkpoint_ic.json"), json.dumps(checkpoint_dict(model, "IC", cfg.seed)))

    if enabled["PM"]:
        log(f"PM: {cfg.pm.epochs} epochs of {cfg.pm.optimizer}")
        report = run_pm(state)
        _write(os.path.join(out, "pm_report.json"), json.dumps(report, indent=2))
        for i, rep in enumerate(state.reports["PM"]):
            _write(os.path.join(out, f"mapping_{i}.csv"), rep.to_csv())
        _write(os.path.join(out, "plot_pm.csv"), _csv(["layer", "epoch", "ptc_calls", "mean_loss"], _zo_plot_rows(state.reports["PM"], cfg.model.k)))
        _write(os.path.join(out, "checkpoint_pm.json"), json.dumps(checkpoint_dict(model, "PM", cfg.seed)))

    if enabled["SL"]:
        if not state.mapped and checkpoint is None:
            init_from_scratch(state)
        epochs, lr = cfg.sl.resolved(state.mapped)
        log(f"SL: {epochs} epochs at lr {lr} ({'after mapping' if state.mapped else 'from scratch'})")
        plot_rows = []
        totals = {"energy": 0, "steps": 0}

        def on_epoch(m: EpochMetrics):
            totals["energy"] += m.ptc_energy
            totals["steps"] += m.steps
            plot_rows.append([m.epoch, totals["energy"], totals["steps"], state.cost.total_steps, repr(m.loss), repr(m.acc), repr(m.test_acc)])
            log(f"  epoch {m.epoch}: loss {m.loss:.4f} train {m.acc:.4f} test {m.test_acc:.4f}")

        try:
            run_sl(state, on_epoch)
        except NumericalAbort as e:
            _write(os.path.join(out, "metrics.csv"), metrics_csv(state.metrics))
            _write(os.path.join(out, "abort_state.json"), json.dumps(getattr(e, "state", {})))
            raise
        _write(os.path.join(out, "metrics.csv"), metrics_csv(state.metrics))
        _write(
            os.path.join(out, "plot_sl.csv"),
            _csv(["epoch", "ptc_calls", "iterations", "ptc_steps", "loss", "train_acc", "test_acc"], plot_rows),
        )
        _write(os.path.join(out, "checkpoint_sl.json"), json.dumps(checkpoint_dict(model, "SL", cfg.seed)))

    summary = cost_summary(state)
    if state.cost is not None:
        _write(os.path.join(out, "cost.csv"), state.cost.to_csv())
    summary["dataset"] = data.describe()
    summary["twin_test_acc"] = state.twin_acc
    _write(os.path.join(out, "cost.json"), json.dumps(summary, indent=2))
    return state


def evaluate_split(model: Sequential, split: Split) -> dict:
    loss, acc = evaluate(model, split)
    return {"loss": loss, "acc": acc, "n": len(split)}

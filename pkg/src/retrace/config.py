"""Experiment configuration: strict YAML with schema validation.

Every run is fully determined by the config file: seeds, schedules, and
method parameters all live here, so config + code version imply
bit-identical outputs. Unknown keys are rejected with their full path;
YAML syntax errors carry the parser's line/column information.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from . import datasets, models, optim, training
from .errors import ConfigError

ENV_OUTPUT_ROOT = "RETRACE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "retrace-out"

METHOD_MAGIC = "magic"
METHOD_TRAK = "trak-lite"
METHOD_GRAD_DOT = "grad-dot"
KNOWN_METHODS = (METHOD_MAGIC, METHOD_TRAK, METHOD_GRAD_DOT)


class _Section:
    """A dict view that tracks consumed keys and reports leftovers by path."""

    def __init__(self, mapping, path):
        if mapping is None:
            mapping = {}
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}: expected a mapping")
        self.mapping = dict(mapping)
        self.path = path

    def take(self, key, kind=None, default=None, required=False):
        if key not in self.mapping:
            if required:
                raise ConfigError(f"{self.path}.{key}: required key missing")
            return default
        value = self.mapping.pop(key)
        if kind is not None and not isinstance(value, kind):
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                return float(value)
            names = kind.__name__ if not isinstance(kind, tuple) else "/".join(
                k.__name__ for k in kind)
            raise ConfigError(
                f"{self.path}.{key}: expected {names}, got {type(value).__name__}"
            )
        return value

    def section(self, key, required=False):
        return _Section(self.take(key, dict, default={}, required=required),
                        f"{self.path}.{key}")

    def finish(self):
        if self.mapping:
            extras = ", ".join(sorted(self.mapping))
            raise ConfigError(f"{self.path}: unknown keys: {extras}")


def _float_list(section, key, default=None, required=False):
    raw = section.take(key, list, default=default, required=required)
    if raw is None:
        return None
    try:
        return [float(v) for v in raw]
    except (TypeError, ValueError):
        raise ConfigError(f"{section.path}.{key}: expected a list of numbers") from None


@dataclass
class MeasurementSpec:
    kind: str
    index: int = 0
    scale: float = 1.0


@dataclass
class ExperimentConfig:
    task_id: str
    output_dir: str
    workers: int
    raw: dict = field(repr=False)

    # dataset
    generator: str | None
    csv_path: str | None
    test_csv_path: str | None
    csv_task: str | None
    data_seed: int
    n_train: int
    n_test: int
    dim: int
    generator_params: dict

    # model
    model_kind: str
    hidden: tuple
    init_seed: int

    # optimizer
    rule: optim.UpdateRule
    normalize_lr_by_batch: bool

    # training
    batch_size: int
    epochs: int
    shuffle_seed: int

    measurements: list

    # attribution
    drop_fractions: list
    num_subsets: int
    subset_seed: int
    methods: list
    trak_projection_dim: int
    trak_seed: int
    bootstrap_resamples: int
    bootstrap_seed: int
    resample_batches: bool

    # replay
    checkpoint_policy: str
    compensated_summation: bool

    # probe / gradcheck
    probe_measurement: int
    probe_example_index: int
    probe_epsilons: list
    gradcheck_step: float
    gradcheck_tolerance: float
    gradcheck_measurement: int


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    root = _Section(raw, "config")
    task_id = root.take("task_id", str, required=True)
    output_dir = root.take("output_dir", str,
                           default=os.environ.get(ENV_OUTPUT_ROOT,
                                                  DEFAULT_OUTPUT_ROOT))
    workers = int(root.take("workers", int, default=1))

    ds = root.section("dataset", required=True)
    generator = ds.take("generator", str)
    csv_path = ds.take("csv", str)
    if (generator is None) == (csv_path is None):
        raise ConfigError("config.dataset: give exactly one of 'generator' or 'csv'")
    test_csv_path = ds.take("test_csv", str)
    csv_task = ds.take("task", str)
    if csv_path is not None and csv_task is None:
        raise ConfigError("config.dataset.task: required for CSV datasets")
    if generator is not None and csv_task is not None:
        raise ConfigError("config.dataset.task: generators define their own task")
    data_seed = int(ds.take("seed", int, default=0))
    n_train = int(ds.take("n_train", int, default=0))
    n_test = int(ds.take("n_test", int, default=0))
    dim = int(ds.take("dim", int, default=0))
    if generator is not None:
        if n_train < 1 or dim < 1:
            raise ConfigError("config.dataset: generators need n_train >= 1 and dim >= 1")
        if generator not in datasets.GENERATORS:
            raise ConfigError(
                f"config.dataset.generator: unknown generator {generator!r}"
            )
    generator_params = dict(ds.take("params", dict, default={}))
    ds.finish()

    mdl = root.section("model", required=True)
    model_kind = mdl.take("kind", str, required=True)
    hidden = tuple(int(h) for h in mdl.take("hidden", list, default=[]))
    init_seed = int(mdl.take("init_seed", int, default=0))
    mdl.finish()

    opt = root.section("optimizer", required=True)
    rule_kind = opt.take("kind", str, required=True)
    lr = opt.take("lr", float)
    sched_sec = opt.section("schedule")
    if lr is not None and sched_sec.mapping:
        raise ConfigError("config.optimizer: give either 'lr' or 'schedule', not both")
    if sched_sec.mapping:
        sched_kind = sched_sec.take("kind", str, required=True)
        if sched_kind != optim.SCHEDULE_ONE_CYCLE:
            raise ConfigError(
                "config.optimizer.schedule.kind: only 'one-cycle-linear' here; "
                "use 'lr' for a constant rate"
            )
        schedule = optim.LrSchedule.one_cycle(
            max_lr=float(sched_sec.take("max_lr", float, required=True)),
            start_mult=float(sched_sec.take("start_mult", float, default=1e-6)),
            end_mult=float(sched_sec.take("end_mult", float, default=0.1)),
            peak_frac=float(sched_sec.take("peak_frac", float, default=0.25)),
        )
        sched_sec.finish()
    elif lr is not None:
        schedule = optim.LrSchedule.constant(float(lr))
    else:
        raise ConfigError("config.optimizer: need 'lr' or 'schedule'")
    try:
        rule = optim.UpdateRule(
            kind=rule_kind,
            schedule=schedule,
            momentum=float(opt.take("momentum", float, default=0.9)),
            beta1=float(opt.take("beta1", float, default=0.9)),
            beta2=float(opt.take("beta2", float, default=0.999)),
            eps=float(opt.take("eps", float, default=1e-8)),
            eps_root=float(opt.take("eps_root", float, default=1e-8)),
            weight_decay=float(opt.take("weight_decay", float, default=0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"config.optimizer: {exc}") from None
    normalize = bool(opt.take("normalize_lr_by_batch", bool, default=False))
    opt.finish()

    tr = root.section("training", required=True)
    batch_size = int(tr.take("batch_size", int, required=True))
    epochs = int(tr.take("epochs", int, required=True))
    shuffle_seed = int(tr.take("shuffle_seed", int, default=0))
    tr.finish()

    raw_measurements = root.take("measurements", list, default=[{"kind": "mean-test-loss"}])
    measurements = []
    for k, entry in enumerate(raw_measurements):
        sec = _Section(entry, f"config.measurements[{k}]")
        kind = sec.take("kind", str, required=True)
        if kind not in (models.MEASURE_EXAMPLE, models.MEASURE_MEAN):
            raise ConfigError(f"{sec.path}.kind: unknown measurement {kind!r}")
        index = int(sec.take("index", int, default=0))
        scale = float(sec.take("scale", float, default=1.0))
        sec.finish()
        measurements.append(MeasurementSpec(kind, index, scale))

    att = root.section("attribution")
    drop_fractions = _float_list(att, "drop_fractions", default=[0.01])
    num_subsets = int(att.take("num_subsets", int, default=64))
    subset_seed = int(att.take("subset_seed", int, default=0))
    methods = att.take("methods", list, default=[METHOD_MAGIC])
    for m in methods:
        if m not in KNOWN_METHODS:
            raise ConfigError(
                f"config.attribution.methods: unknown method {m!r}; "
                f"known: {list(KNOWN_METHODS)}"
            )
    trak_projection_dim = int(att.take("trak_projection_dim", int, default=64))
    trak_seed = int(att.take("trak_seed", int, default=0))
    bootstrap_resamples = int(att.take("bootstrap_resamples", int, default=1000))
    bootstrap_seed = int(att.take("bootstrap_seed", int, default=0))
    resample_batches = bool(att.take("resample_batches", bool, default=False))
    att.finish()

    rp = root.section("replay")
    checkpoint_policy = rp.take("checkpoint_policy", str, default="logarithmic")
    if checkpoint_policy not in ("logarithmic", "retain-all"):
        raise ConfigError("config.replay.checkpoint_policy: "
                          "use 'logarithmic' or 'retain-all'")
    compensated = bool(rp.take("compensated_summation", bool, default=False))
    rp.finish()

    pr = root.section("probe")
    probe_measurement = int(pr.take("measurement", int, default=0))
    probe_example_index = int(pr.take("example_index", int, default=0))
    probe_epsilons = _float_list(pr, "epsilons",
                                 default=[1e-3, 2e-3, 4e-3])
    pr.finish()

    gc = root.section("gradcheck")
    gradcheck_step = float(gc.take("fd_step", float, default=1e-4))
    gradcheck_tolerance = float(gc.take("tolerance", float, default=1e-5))
    gradcheck_measurement = int(gc.take("measurement", int, default=0))
    gc.finish()

    root.finish()

    return ExperimentConfig(
        task_id=task_id, output_dir=output_dir, workers=workers, raw=raw,
        generator=generator, csv_path=csv_path, test_csv_path=test_csv_path,
        csv_task=csv_task, data_seed=data_seed, n_train=n_train, n_test=n_test,
        dim=dim, generator_params=generator_params,
        model_kind=model_kind, hidden=hidden, init_seed=init_seed,
        rule=rule, normalize_lr_by_batch=normalize,
        batch_size=batch_size, epochs=epochs, shuffle_seed=shuffle_seed,
        measurements=measurements,
        drop_fractions=drop_fractions, num_subsets=num_subsets,
        subset_seed=subset_seed, methods=list(methods),
        trak_projection_dim=trak_projection_dim, trak_seed=trak_seed,
        bootstrap_resamples=bootstrap_resamples, bootstrap_seed=bootstrap_seed,
        resample_batches=resample_batches,
        checkpoint_policy=checkpoint_policy, compensated_summation=compensated,
        probe_measurement=probe_measurement,
        probe_example_index=probe_example_index, probe_epsilons=probe_epsilons,
        gradcheck_step=gradcheck_step, gradcheck_tolerance=gradcheck_tolerance,
        gradcheck_measurement=gradcheck_measurement,
    )


def build_datasets(cfg: ExperimentConfig):
    """Return (train, test); test is None when the config defines none."""
    if cfg.generator is not None:
        if cfg.n_test > 0:
            return datasets.synthetic_split(cfg.generator, cfg.data_seed,
                                            cfg.n_train, cfg.n_test, cfg.dim,
                                            **cfg.generator_params)
        train = datasets.synthetic(cfg.generator, cfg.data_seed, cfg.n_train,
                                   cfg.dim, **cfg.generator_params)
        return train, None
    train = datasets.Dataset.from_csv(cfg.csv_path, cfg.csv_task)
    test = (datasets.Dataset.from_csv(cfg.test_csv_path, cfg.csv_task)
            if cfg.test_csv_path else None)
    return train, test


def build_plan(cfg: ExperimentConfig, train_ds) -> training.TrainPlan:
    try:
        model = models.ModelFamily(cfg.model_kind, train_ds.feature_dim,
                                   hidden=cfg.hidden,
                                   task_kind=train_ds.task_kind)
    except ValueError as exc:
        raise ConfigError(f"config.model: {exc}") from None
    rule = cfg.rule
    if cfg.normalize_lr_by_batch:
        sched = rule.schedule
        if sched.kind == optim.SCHEDULE_CONSTANT:
            sched = optim.LrSchedule.constant(sched.lr / cfg.batch_size)
        else:
            sched = optim.LrSchedule.one_cycle(sched.max_lr / cfg.batch_size,
                                               sched.start_mult, sched.end_mult,
                                               sched.peak_frac)
        rule = optim.with_schedule(rule, sched)
    schedule = training.BatchSchedule.from_seed(cfg.shuffle_seed, train_ds.n,
                                                cfg.batch_size, cfg.epochs)
    try:
        return training.TrainPlan(train_ds, model, rule, schedule,
                                  init_seed=cfg.init_seed)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None


def build_measurements(cfg: ExperimentConfig, test_ds) -> list:
    out = []
    for k, spec in enumerate(cfg.measurements):
        if test_ds is None:
            raise ConfigError(
                f"config.measurements[{k}]: measurements need a test set "
                "(dataset.n_test or dataset.test_csv)"
            )
        if spec.kind == models.MEASURE_EXAMPLE:
            if not 0 <= spec.index < test_ds.n:
                raise ConfigError(
                    f"config.measurements[{k}].index: {spec.index} out of range "
                    f"for test set of size {test_ds.n}"
                )
            payload = test_ds.example(spec.index)
        else:
            payload = test_ds
        out.append(models.MeasurementFn(spec.kind, payload, scale=spec.scale))
    return out


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """Hash of the run-defining part of the config (not outputs or workers)."""
    trimmed = {k: v for k, v in cfg.raw.items()
               if k not in ("output_dir", "workers")}
    blob = json.dumps(trimmed, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()

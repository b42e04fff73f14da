"""Experiment runner: train, attribute, lds, gradcheck, probe.

Every command takes a config file; `attribute` and `lds` additionally take
the run directory produced by `train` and verify that the config still
matches it before touching anything. Output files are deterministic given
the config (timings live only in the manifest, outside its content hash).

Exit codes: 0 success, 2 config error, 3 training divergence, 4 replay
budget violation, 5 undefined rank metric, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import attribution, baselines, checkpoints, config as cfgmod, models
from . import replay as replaymod
from . import training
from .errors import (BudgetViolationError, ConfigError, RetraceError,
                     TrainingDivergedError, UndefinedMetricError)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BUDGET = 4
EXIT_UNDEFINED_METRIC = 5

MANIFEST_NAME = "manifest.json"
FINAL_STATE_NAME = "final_state.bin"
CHECKPOINT_DIR_NAME = "checkpoints"


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _scenario_dir(cfg) -> str:
    path = os.path.join(cfg.output_dir, cfg.task_id)
    os.makedirs(path, exist_ok=True)
    return path


def _task_ids(measurements) -> list:
    return [f"task{k}" for k in range(len(measurements))]


def _load_setup(cfg):
    train_ds, test_ds = cfgmod.build_datasets(cfg)
    plan = cfgmod.build_plan(cfg, train_ds)
    measurements = cfgmod.build_measurements(cfg, test_ds)
    return plan, measurements


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_train(cfg, run_dir=None) -> int:
    plan, _ = _load_setup(cfg)
    run_dir = run_dir or os.path.join(_scenario_dir(cfg), "run")
    ckpt_dir = os.path.join(run_dir, CHECKPOINT_DIR_NAME)
    os.makedirs(ckpt_dir, exist_ok=True)

    started = time.perf_counter()
    final, store = training.train_recorded(
        plan, training.ones_weights(plan.n_examples),
        policy=cfg.checkpoint_policy, spill_dir=ckpt_dir,
    )
    elapsed = time.perf_counter() - started

    final_path = os.path.join(run_dir, FINAL_STATE_NAME)
    checkpoints.write_state(final_path, final)
    content = {
        "config_hash": cfgmod.config_fingerprint(cfg),
        "plan_fingerprint": plan.fingerprint(),
        "total_steps": plan.total_steps,
        "param_dim": plan.model.param_dim,
        "checkpoint_policy": cfg.checkpoint_policy,
        "retained_steps": store.retained_steps(),
        "final_state_sha256": _sha256_file(final_path),
    }
    manifest = {
        "content": content,
        "content_hash": hashlib.sha256(
            json.dumps(content, sort_keys=True).encode()).hexdigest(),
        "timings": {"train_seconds": elapsed},
    }
    _write_json(os.path.join(run_dir, MANIFEST_NAME), manifest)
    print(f"trained {plan.total_steps} steps; run artifact at {run_dir}")
    return EXIT_OK


def _open_run(cfg, plan, run_dir):
    manifest_path = os.path.join(run_dir, MANIFEST_NAME)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no run manifest at {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest_path}: {exc}") from None
    try:
        recorded = manifest["content"]["plan_fingerprint"]
        recorded_policy = manifest["content"]["checkpoint_policy"]
    except (KeyError, TypeError):
        raise ConfigError(f"{manifest_path}: malformed manifest") from None
    if recorded != plan.fingerprint():
        raise ConfigError(
            "config does not match the run artifact: plan fingerprint "
            f"{plan.fingerprint()[:12]}.. != recorded {recorded[:12]}.."
        )
    if recorded_policy != cfg.checkpoint_policy:
        raise ConfigError(
            f"config asks for checkpoint policy {cfg.checkpoint_policy!r} but "
            f"the run artifact was recorded under {recorded_policy!r}"
        )
    store = checkpoints.CheckpointStore.open_dir(
        os.path.join(run_dir, CHECKPOINT_DIR_NAME), plan.total_steps)
    return manifest, store


def cmd_attribute(cfg, run_dir) -> int:
    plan, measurements = _load_setup(cfg)
    _, store = _open_run(cfg, plan, run_dir)
    out_dir = os.path.join(_scenario_dir(cfg), "influence")
    os.makedirs(out_dir, exist_ok=True)

    # the logarithmic-memory envelope is a property of that policy; a
    # retain-all store holds T+1 states on purpose and is not audited
    audit = cfg.checkpoint_policy == "logarithmic"
    audited = False
    for task, measurement in zip(_task_ids(measurements), measurements):
        influence, budget = replaymod.replay_metagradient(
            plan, measurement, store, compensated=cfg.compensated_summation)
        replaymod.influence_to_csv(
            os.path.join(out_dir, f"influence_magic_{task}.csv"), influence,
            include_method=True)
        checkpoints.write_vector(
            os.path.join(out_dir, f"influence_magic_{task}.bin"),
            influence.values)
        report = (replaymod.audit_budget(budget) if audit
                  else {"skipped": "retain-all policy"})
        audited = audited or audit
        _write_json(os.path.join(out_dir, f"budget_{task}.json"),
                    {"task": task, "budget": budget.as_dict(), "audit": report})
        print(f"{task}: influence over {influence.n} examples; "
              f"recompute {budget.recompute_steps_total}, "
              f"peak live {budget.peak_live_states}")
    if audited:
        print(f"budget audit ok for T={plan.total_steps}")
    return EXIT_OK


def _predictors_for(cfg, plan, measurements, store):
    """method -> list of per-task Taylor predictors (shared center training)."""
    final = store.get(plan.total_steps)
    predictors = {}
    for method in cfg.methods:
        per_task = []
        for measurement in measurements:
            center = models.measure(measurement, plan.model, final.params)
            if method == cfgmod.METHOD_MAGIC:
                influence, budget = replaymod.replay_metagradient(
                    plan, measurement, store,
                    compensated=cfg.compensated_summation)
                if cfg.checkpoint_policy == "logarithmic":
                    replaymod.audit_budget(budget)
                per_task.append(attribution.TaylorPredictor.from_influence(influence))
            elif method == cfgmod.METHOD_TRAK:
                scores = baselines.trak_lite(plan, measurement,
                                             cfg.trak_projection_dim,
                                             cfg.trak_seed,
                                             center_params=final.params)
                per_task.append(attribution.TaylorPredictor.from_scores(scores, center))
            else:
                scores = baselines.grad_dot_influence(plan, measurement,
                                                      center_params=final.params)
                per_task.append(attribution.TaylorPredictor.from_scores(scores, center))
        predictors[method] = per_task
    return predictors


def cmd_lds(cfg, run_dir, workers=None) -> int:
    plan, measurements = _load_setup(cfg)
    _, store = _open_run(cfg, plan, run_dir)
    workers = cfg.workers if workers is None else workers
    task_ids = _task_ids(measurements)
    predictors = _predictors_for(cfg, plan, measurements, store)

    any_undefined = False
    scenario = _scenario_dir(cfg)
    for p in cfg.drop_fractions:
        try:
            subsets = attribution.sample_subsets(plan.n_examples, p,
                                                 cfg.num_subsets, cfg.subset_seed)
        except ValueError as exc:
            raise ConfigError(f"config.attribution.drop_fractions: {exc}") from None
        truth = attribution.ground_truth_matrix(
            plan, measurements, subsets, workers=workers,
            resample_batches=cfg.resample_batches)
        p_dir = os.path.join(scenario, f"dropfrac_{p:g}")
        os.makedirs(p_dir, exist_ok=True)

        summary_rows = []
        for method in cfg.methods:
            for k, task in enumerate(task_ids):
                predicted = predictors[method][k].predict_many(
                    s.weights for s in subsets)
                report = attribution.LdsReport.build(
                    task, method, p, predicted, truth[:, k],
                    bootstrap_seed=cfg.bootstrap_seed,
                    num_resamples=cfg.bootstrap_resamples)
                pairs_path = os.path.join(p_dir, f"pairs_{method}_{task}.csv")
                with open(pairs_path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["subset_id", "predicted", "true"])
                    for j in range(len(subsets)):
                        writer.writerow([j, _fmt(predicted[j]), _fmt(truth[j, k])])
                row = {
                    "task": task, "method": method, "drop_fraction": p,
                    "num_subsets": report.num_subsets,
                    "lds": report.spearman,
                    "ci_low": report.ci_low, "ci_high": report.ci_high,
                }
                if report.spearman is None:
                    row["undefined"] = report.undefined_reason
                    any_undefined = True
                summary_rows.append(row)

        by_method = {}
        for method in cfg.methods:
            values = [r["lds"] for r in summary_rows
                      if r["method"] == method and r["lds"] is not None]
            by_method[method] = (float(np.mean(values)) if values else None)
        _write_json(os.path.join(p_dir, "summary.json"), {
            "task_id": cfg.task_id,
            "drop_fraction": p,
            "num_subsets": cfg.num_subsets,
            "mean_lds_by_method": by_method,
            "rows": summary_rows,
        })
        shown = {m: (f"{v:.4f}" if v is not None else "undefined")
                 for m, v in by_method.items()}
        print(f"dropfrac {p:g}: mean LDS {shown}")

    if any_undefined:
        print("warning: at least one task had an undefined rank correlation",
              file=sys.stderr)
        return EXIT_UNDEFINED_METRIC
    return EXIT_OK


def cmd_gradcheck(cfg, workers=None) -> int:
    plan, measurements = _load_setup(cfg)
    workers = cfg.workers if workers is None else workers
    k = cfg.gradcheck_measurement
    if not 0 <= k < len(measurements):
        raise ConfigError(f"config.gradcheck.measurement: index {k} out of range")
    measurement = measurements[k]

    _, store = training.train_recorded(
        plan, training.ones_weights(plan.n_examples),
        policy=cfg.checkpoint_policy)
    influence, budget = replaymod.replay_metagradient(
        plan, measurement, store, compensated=cfg.compensated_summation)
    oracle = baselines.fd_influence(plan, measurement, step=cfg.gradcheck_step,
                                    workers=workers)
    scale = np.max(np.abs(oracle.values))
    denom = np.maximum(np.abs(oracle.values), 1e-12 * max(scale, 1e-300))
    rel = np.abs(influence.values - oracle.values) / denom
    worst = int(np.argmax(rel))

    path = os.path.join(_scenario_dir(cfg), "gradcheck.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "replay", "finite_difference", "rel_err"])
        for i in range(len(rel)):
            writer.writerow([i, _fmt(influence.values[i]),
                             _fmt(oracle.values[i]), _fmt(rel[i])])

    ok = bool(np.max(rel) <= cfg.gradcheck_tolerance)
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] max rel err {np.max(rel):.3e} "
          f"(tolerance {cfg.gradcheck_tolerance:g}, worst index {worst}, "
          f"fd step {cfg.gradcheck_step:g}, T={plan.total_steps})")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_probe(cfg) -> int:
    plan, measurements = _load_setup(cfg)
    k = cfg.probe_measurement
    if not 0 <= k < len(measurements):
        raise ConfigError(f"config.probe.measurement: index {k} out of range")
    try:
        probe = attribution.smoothness_probe(plan, measurements[k],
                                             cfg.probe_example_index,
                                             cfg.probe_epsilons)
    except ValueError as exc:
        raise ConfigError(f"config.probe: {exc}") from None
    ratios = {e: r for e, _, _, r in probe.doubling_pairs}
    path = os.path.join(
        _scenario_dir(cfg),
        f"probe_task{k}_example{probe.example_index}.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "delta", "doubling_ratio"])
        for e, d in zip(probe.epsilons, probe.deltas):
            r = ratios.get(float(e))
            writer.writerow([_fmt(e), _fmt(d), "" if r is None else _fmt(r)])
    print(f"probe example {probe.example_index}: "
          f"slope estimate {probe.slope_estimate!r}; "
          f"doubling ratios {[round(r[3], 3) for r in probe.doubling_pairs]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrace",
        description="exact influence functions by replaying training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_run=False, needs_workers=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", help="override the config's output directory")
        if needs_run:
            p.add_argument("--run", help="run directory from `retrace train` "
                                         "(default <out>/<task_id>/run)")
        if needs_workers:
            p.add_argument("--workers", type=int,
                           help="parallel retraining workers")
        return p

    add("train", "train the center model and persist its checkpoint store")
    add("attribute", "replay the trajectory and emit influence vectors",
        needs_run=True)
    add("lds", "retrain on sampled subsets and score predictions",
        needs_run=True, needs_workers=True)
    add("gradcheck", "compare replay against the finite-difference oracle",
        needs_workers=True)
    add("probe", "measure the output response to upweighting one example")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        if args.out:
            cfg.output_dir = args.out
        run_dir = getattr(args, "run", None) or os.path.join(
            _scenario_dir(cfg), "run")
        if args.command == "train":
            return cmd_train(cfg, run_dir)
        if args.command == "attribute":
            return cmd_attribute(cfg, run_dir)
        if args.command == "lds":
            return cmd_lds(cfg, run_dir, workers=getattr(args, "workers", None))
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, workers=getattr(args, "workers", None))
        return cmd_probe(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BudgetViolationError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED_METRIC
    except RetraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

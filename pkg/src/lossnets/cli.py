"""Command-line experiment harness.

Subcommands: run (experiment grid from a JSON spec), toy (single-parameter
demo), fetch (dataset download), report (re-render tables from a results
file), calibrate (threshold selection for a finished run).  Exit codes:
0 success, 1 partial failure, 2 invalid spec or arguments.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FetchError,
    SplitSpec,
    UnknownDatasetError,
    default_cache_dir,
    fetch_dataset,
    load_csv,
    load_libsvm,
    load_registry,
    split_dataset,
    standardize,
    synth_toy_1d,
    synth_two_cluster,
)
from .metrics import (
    RANKING_METRICS,
    MetricId,
    average_ranks,
    calibrate_threshold,
    default_gamma_grid,
    true_loss,
)
from .nets import (
    PredictionNet,
    SurrogateNet,
    ToyAffineModel,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    BASELINE_MODES,
    CS_WEIGHT_GRID,
    SURROGATE_MODES,
    TrainConfig,
    evaluate,
    train_baseline,
    train_bilevel,
    train_mode,
    write_trace,
)

WORKERS_ENV = "LOSSNETS_WORKERS"
VALIDATION_FRACTION = 0.1
REPORT_STYLES = ("ranks", "wins")
DATASET_KINDS = ("two-cluster", "libsvm", "csv", "registry")

# Desk-scale profile for the single-parameter demo.  The slow surrogate
# rate keeps its fit improving through the final iteration instead of
# peaking early and drifting.
TOY_N = 1000
TOY_ALPHA0 = 0.3
TOY_GRID_POINTS = 1001
TOY_GRID_LO, TOY_GRID_HI = -1.0, 3.0
# Desk-scale profile for the single-parameter demo: k_beta=30 anchors the
# surrogate before the untrained prediction step can drag alpha into the
# all-negative plateau, and 500 iterations at eta 1e-3 cover the travel
# from alpha=0.3 to the optimum near 0.57 with margin.
TOY_PROFILE = dict(
    outer_steps=500,
    k_alpha=3,
    k_beta=30,
    eta_alpha=1e-3,
    eta_beta=1e-3,
    clip_norm=1e-3,
    batch_size=100,
)
SNAPSHOT_LABELS = ("first", "mid", "final")


class SpecError(ValueError):
    """The experiment spec is structurally invalid."""


@dataclasses.dataclass(frozen=True)
class DatasetRef:
    """One dataset entry of an experiment spec."""

    kind: str
    name: str
    params: dict

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, **self.params}


@dataclasses.dataclass
class ExperimentSpec:
    datasets: list
    metrics: list
    modes: list
    seeds: list
    output_dir: Path
    overrides: dict
    report_style: str = "ranks"

    def to_dict(self):
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "metrics": [m.value for m in self.metrics],
            "modes": list(self.modes),
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
            "config": dict(self.overrides),
            "report_style": self.report_style,
        }


def _require(cond, message):
    if not cond:
        raise SpecError(message)


def _safe_name(name):
    ok = name and all(ch.isalnum() or ch in "._-" for ch in name)
    _require(ok, f"dataset name {name!r} must be non-empty [A-Za-z0-9._-]")
    return name


def _parse_dataset_entry(entry, index, base_dir):
    _require(isinstance(entry, dict), f"datasets[{index}] must be an object")
    entry = dict(entry)
    kind = entry.pop("kind", None)
    _require(kind in DATASET_KINDS, f"datasets[{index}].kind must be one of {DATASET_KINDS}, got {kind!r}")
    name = entry.pop("name", None)
    if kind in ("libsvm", "csv"):
        path = entry.pop("path", None)
        _require(isinstance(path, str) and path, f"datasets[{index}] ({kind}) needs a 'path'")
        resolved = Path(base_dir, path)
        if name is None:
            name = resolved.stem
        entry["path"] = str(resolved)
        if kind == "csv":
            target = entry.pop("target", None)
            _require(isinstance(target, str) and target, f"datasets[{index}] (csv) needs a 'target' column name")
            entry["target"] = target
    elif kind == "registry":
        _require(isinstance(name, str) and name, f"datasets[{index}] (registry) needs a 'name'")
        if "registry" in entry:
            entry["registry"] = str(Path(base_dir, entry["registry"]))
    else:
        if name is None:
            name = "two-cluster"
    entry.setdefault("standardize", kind != "two-cluster")
    _require(isinstance(entry["standardize"], bool), f"datasets[{index}].standardize must be a boolean")
    return DatasetRef(kind=kind, name=_safe_name(name), params=entry)


def parse_spec(payload, base_dir="."):
    """Validate a spec mapping into an ExperimentSpec.

    Raises SpecError with a human-readable message on any structural
    problem; TrainConfig overrides are validated by constructing one.
    """
    _require(isinstance(payload, dict), "spec must be a JSON object")
    known = {"datasets", "metrics", "modes", "seeds", "output_dir", "config", "report_style"}
    unknown = set(payload) - known
    _require(not unknown, f"unknown spec keys: {sorted(unknown)}")

    raw_datasets = payload.get("datasets")
    _require(isinstance(raw_datasets, list) and raw_datasets, "spec needs a non-empty 'datasets' list")
    datasets = [_parse_dataset_entry(e, i, base_dir) for i, e in enumerate(raw_datasets)]
    _require(
        len({d.name for d in datasets}) == len(datasets),
        "dataset names must be unique within a spec",
    )

    raw_metrics = payload.get("metrics")
    _require(isinstance(raw_metrics, list) and raw_metrics, "spec needs a non-empty 'metrics' list")
    try:
        metrics = [MetricId(m) for m in raw_metrics]
    except ValueError as exc:
        raise SpecError(f"bad metric: {exc}") from None

    modes = payload.get("modes")
    _require(isinstance(modes, list) and modes, "spec needs a non-empty 'modes' list")
    allowed = SURROGATE_MODES + BASELINE_MODES
    for mode in modes:
        _require(mode in allowed, f"mode must be one of {allowed}, got {mode!r}")

    seeds = payload.get("seeds", [0])
    _require(
        isinstance(seeds, list) and seeds and all(isinstance(s, int) and not isinstance(s, bool) for s in seeds),
        "'seeds' must be a non-empty list of integers",
    )

    overrides = payload.get("config", {})
    _require(isinstance(overrides, dict), "'config' must be an object of TrainConfig overrides")
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in ("metric", "mode", "seed"):
        _require(key not in overrides, f"config override {key!r} is set per run, not in the spec")
    unknown = set(overrides) - field_names
    _require(not unknown, f"unknown config overrides: {sorted(unknown)}")
    try:
        TrainConfig(**overrides)
    except ValueError as exc:
        raise SpecError(f"bad config override: {exc}") from None

    style = payload.get("report_style", "ranks")
    _require(style in REPORT_STYLES, f"report_style must be one of {REPORT_STYLES}, got {style!r}")

    out = payload.get("output_dir", "runs")
    _require(isinstance(out, str) and out, "'output_dir' must be a non-empty string")
    return ExperimentSpec(
        datasets=datasets,
        metrics=metrics,
        modes=list(modes),
        seeds=list(seeds),
        output_dir=Path(base_dir, out),
        overrides=dict(overrides),
        report_style=style,
    )


def load_spec(path):
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise SpecError(f"cannot read spec file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec file is not valid JSON: {exc}") from None
    return parse_spec(payload, base_dir=path.parent)


def resolve_dataset(ref, cache_dir=None):
    """Materialize (train, test) splits for a dataset reference."""
    params = dict(ref.params)
    do_standardize = params.pop("standardize")
    split_seed = params.pop("split_seed", 0)
    train_fraction = params.pop("train_fraction", 0.8)
    if ref.kind == "two-cluster":
        n_train = params.pop("n_train", 2000)
        n_test = params.pop("n_test", 500)
        rng = np.random.default_rng(params.pop("seed", 0))
        full = synth_two_cluster(
            n_train + n_test,
            rng,
            n_features=params.pop("n_features", 5),
            pos_fraction=params.pop("pos_fraction", 0.3),
            separation=params.pop("separation", 2.5),
        )
        if params:
            raise SpecError(f"unknown two-cluster options: {sorted(params)}")
        full.name = ref.name
        train, test = split_dataset(full, SplitSpec(n_train / (n_train + n_test), split_seed))
    else:
        if ref.kind == "libsvm":
            full = load_libsvm(params["path"], n_features=params.get("n_features"))
        elif ref.kind == "csv":
            full = load_csv(params["path"], params["target"])
        else:
            registry = None
            if "registry" in params:
                registry = load_registry(params["registry"])
            full = fetch_dataset(ref.name, registry=registry, cache_dir=cache_dir)
        full.name = ref.name
        train, test = split_dataset(full, SplitSpec(train_fraction, split_seed))
    if do_standardize:
        train, test, _ = standardize(train, test)
    return train, test


def run_dir_for(output_dir, dataset, metric, mode, seed):
    return Path(output_dir) / dataset / metric.value / mode / f"seed-{seed}"


def _write_json(path, payload):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _eval_scores(net, features, batch_size=8192):
    chunks = [
        net.forward_eval(features[i : i + batch_size])
        for i in range(0, features.shape[0], batch_size)
    ]
    return np.concatenate(chunks)


def _design_flags(ref, config):
    return {
        "standardize": ref.params.get("standardize", True),
        "batchnorm": "batch statistics in training, running averages in eval",
        "sampler": "stratified with replacement",
        "validation_fraction": VALIDATION_FRACTION,
        "gamma_grid_size": config.gamma_grid_size,
    }


@dataclasses.dataclass(frozen=True)
class RunRequest:
    ref: DatasetRef
    metric: MetricId
    mode: str
    seed: int
    overrides: dict
    output_dir: str
    force: bool = False
    cache_dir: str = None


def _tune_cs_weight(config, fit, val, rng_seed):
    """Pick the cost-sensitive weight by short probe runs on the carve-out."""
    probe_steps = max(1, config.outer_steps // 10)
    probe_cfg = dataclasses.replace(config, outer_steps=probe_steps, eval_every=probe_steps)
    best = None
    for weight in CS_WEIGHT_GRID:
        rng = np.random.default_rng(rng_seed)
        net = PredictionNet(fit.n_features)
        net.init(rng)
        train_baseline("cs", probe_cfg, fit, net, rng, cs_weight=weight)
        scores = _eval_scores(net, val.features)
        if config.metric in RANKING_METRICS:
            loss = true_loss(config.metric, val.targets, scores)
        else:
            grid = default_gamma_grid(scores, config.gamma_grid_size)
            gamma = calibrate_threshold(config.metric, val.targets, scores, grid)
            loss = true_loss(config.metric, val.targets, scores, gamma)
        if best is None or loss < best[0]:
            best = (loss, weight)
    return best[1]


def _execute_run(req):
    """Train one (dataset, metric, mode, seed) cell and write its artifacts.

    Returns the result summary dict (also persisted as result.json).
    Failures are caught, recorded, and reported with status "failed".
    """
    run_dir = run_dir_for(req.output_dir, req.ref.name, req.metric, req.mode, req.seed)
    result_path = run_dir / "result.json"
    if result_path.exists() and not req.force:
        try:
            previous = json.loads(result_path.read_text())
        except (OSError, json.JSONDecodeError):
            previous = {}
        if previous.get("status") == "ok":
            previous["skipped"] = True
            return previous
    run_dir.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(
        metric=req.metric, mode=req.mode, seed=req.seed, **req.overrides
    )
    base = {
        "dataset": req.ref.to_dict(),
        "metric": req.metric.value,
        "mode": req.mode,
        "seed": req.seed,
        "config": config.to_dict(),
        "flags": _design_flags(req.ref, config),
        "version": __version__,
        "run_dir": str(run_dir),
    }
    _write_json(run_dir / "config.json", base)
    t0 = time.perf_counter()
    try:
        train, test = resolve_dataset(req.ref, cache_dir=req.cache_dir)
        fit, val = split_dataset(train, SplitSpec(1.0 - VALIDATION_FRACTION, req.seed))
        rng = np.random.default_rng(req.seed)
        cs_weight = None
        if req.mode in SURROGATE_MODES:
            out = train_mode(config, fit, rng, test=test)
            prediction, surrogate = out.prediction, out.surrogate
            counters = {"alpha_steps": out.alpha_steps, "beta_steps": out.beta_steps}
        else:
            if req.mode == "cs":
                cs_weight = _tune_cs_weight(config, fit, val, req.seed)
                rng = np.random.default_rng(req.seed)
            prediction = PredictionNet(fit.n_features)
            prediction.init(rng)
            out = train_baseline(req.mode, config, fit, prediction, rng, test=test, cs_weight=cs_weight)
            surrogate = None
            counters = {"alpha_steps": out.steps, "beta_steps": 0}
        write_trace(out.trace, run_dir / "trace.csv")
        save_checkpoint(prediction, run_dir / "prediction.ckpt", seed=req.seed)
        if surrogate is not None:
            save_checkpoint(surrogate, run_dir / "surrogate.ckpt", seed=req.seed)
        val_scores = _eval_scores(prediction, val.features)
        if req.metric in RANKING_METRICS:
            gamma = None
            val_loss = true_loss(req.metric, val.targets, val_scores)
            test_loss = evaluate(prediction, test, req.metric)
            train_loss = evaluate(prediction, fit, req.metric)
        else:
            grid = default_gamma_grid(val_scores, config.gamma_grid_size)
            gamma = calibrate_threshold(req.metric, val.targets, val_scores, grid)
            val_loss = true_loss(req.metric, val.targets, val_scores, gamma)
            test_loss = evaluate(prediction, test, req.metric, gamma)
            train_loss = evaluate(prediction, fit, req.metric, gamma)
        result = dict(
            base,
            status="ok",
            gamma=gamma,
            cs_weight=cs_weight,
            validation_loss=val_loss,
            test_loss=test_loss,
            train_loss=train_loss,
            seconds=time.perf_counter() - t0,
            **counters,
        )
    except Exception as exc:  # noqa: BLE001 - one bad run must not kill the grid
        result = dict(
            base,
            status="failed",
            error=f"{type(exc).__name__}: {exc}",
            seconds=time.perf_counter() - t0,
        )
    _write_json(result_path, result)
    return result


def worker_count(flag_value=None):
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SpecError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def run_experiment(spec, force=False, workers=1, cache_dir=None):
    """Execute the whole grid; returns (results payload, any_failed)."""
    requests = [
        RunRequest(
            ref=ref,
            metric=metric,
            mode=mode,
            seed=seed,
            overrides=spec.overrides,
            output_dir=str(spec.output_dir),
            force=force,
            cache_dir=cache_dir,
        )
        for ref in spec.datasets
        for metric in spec.metrics
        for mode in spec.modes
        for seed in spec.seeds
    ]
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1 and len(requests) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_execute_run, requests))
    else:
        runs = [_execute_run(req) for req in requests]
    payload = {"version": __version__, "spec": spec.to_dict(), "runs": runs}
    _write_json(spec.output_dir / "results.json", payload)
    report = render_report(payload, style=spec.report_style)
    (spec.output_dir / "report.txt").write_text(report)
    failed = [r for r in runs if r.get("status") != "ok"]
    return payload, report, bool(failed)


def collect_cells(runs):
    """Mean test loss per (dataset, metric) cell keyed by mode."""
    acc = {}
    for run in runs:
        if run.get("status") != "ok":
            continue
        key = (run["dataset"]["name"], run["metric"])
        acc.setdefault(key, {}).setdefault(run["mode"], []).append(run["test_loss"])
    return {
        key: {mode: float(np.mean(vals)) for mode, vals in modes.items()}
        for key, modes in acc.items()
    }


def rank_row(cells, datasets, metric, modes):
    """Average rank per mode over the datasets with every mode present."""
    per_mode = {mode: [] for mode in modes}
    for ds in datasets:
        cell = cells.get((ds, metric), {})
        if any(mode not in cell for mode in modes):
            continue
        losses = np.array([cell[mode] for mode in modes])
        for mode, rank in zip(modes, average_ranks(losses)):
            per_mode[mode].append(rank)
    return {
        mode: (float(np.mean(r)) if r else float("nan")) for mode, r in per_mode.items()
    }


def win_row(cells, datasets, metric, modes):
    """Count of datasets where the mode attains the cell minimum (ties share)."""
    wins = {mode: 0 for mode in modes}
    for ds in datasets:
        cell = cells.get((ds, metric), {})
        if any(mode not in cell for mode in modes):
            continue
        best = min(cell[mode] for mode in modes)
        for mode in modes:
            if cell[mode] == best:
                wins[mode] += 1
    return wins


def _render_table(title, header, rows):
    widths = [
        max(len(str(header[i])), *(len(str(row[i])) for row in rows))
        for i in range(len(header))
    ]
    def fmt(row):
        return "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip()
    sep = "-" * len(fmt(header))
    return "\n".join([title, fmt(header), sep] + [fmt(r) for r in rows])


def render_report(payload, style="ranks"):
    """Text tables of mean test losses, one per metric, lowest cell marked."""
    if style not in REPORT_STYLES:
        raise SpecError(f"report style must be one of {REPORT_STYLES}, got {style!r}")
    spec = payload["spec"]
    datasets = [d["name"] for d in spec["datasets"]]
    metrics = list(spec["metrics"])
    modes = list(spec["modes"])
    cells = collect_cells(payload["runs"])
    blocks = []
    for metric in metrics:
        rows = []
        for ds in datasets:
            cell = cells.get((ds, metric), {})
            present = [cell[m] for m in modes if m in cell]
            best = min(present) if present else None
            row = [ds]
            for mode in modes:
                if mode not in cell:
                    row.append("-")
                else:
                    mark = "*" if cell[mode] == best else ""
                    row.append(f"{cell[mode]:.4f}{mark}")
            rows.append(row)
        if style == "ranks":
            agg = rank_row(cells, datasets, metric, modes)
            rows.append(["rank"] + [f"{agg[m]:.2f}" for m in modes])
        else:
            agg = win_row(cells, datasets, metric, modes)
            rows.append(["wins"] + [str(agg[m]) for m in modes])
        blocks.append(_render_table(f"== {metric} loss (test) ==", ["dataset"] + modes, rows))
    failed = [r for r in payload["runs"] if r.get("status") != "ok"]
    if failed:
        lines = [
            f"  {r['dataset']['name']}/{r['metric']}/{r['mode']}/seed-{r['seed']}: {r.get('error', 'unknown')}"
            for r in failed
        ]
        blocks.append("failed runs:\n" + "\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def calibrate_and_eval(run_dir, cache_dir=None):
    """Re-derive the decision threshold for a finished run and report losses.

    Reconstructs the validation carve-out from the recorded seed, loads the
    prediction checkpoint, picks gamma on the carve-out (thresholded metrics
    only), and reports the test loss at that gamma.
    """
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise SpecError(f"{run_dir} has no config.json")
    try:
        recorded = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"config.json is not valid JSON: {exc}") from None
    checkpoint = run_dir / "prediction.ckpt"
    if not checkpoint.exists():
        raise FileNotFoundError(f"{run_dir} has no prediction checkpoint")
    ds = recorded["dataset"]
    ref = DatasetRef(kind=ds["kind"], name=ds["name"], params={k: v for k, v in ds.items() if k not in ("kind", "name")})
    metric = MetricId(recorded["metric"])
    seed = recorded["seed"]
    grid_size = recorded["config"]["gamma_grid_size"]
    train, test = resolve_dataset(ref, cache_dir=cache_dir)
    fit, val = split_dataset(train, SplitSpec(1.0 - VALIDATION_FRACTION, seed))
    net, _ = load_checkpoint(checkpoint)
    val_scores = _eval_scores(net, val.features)
    if metric in RANKING_METRICS:
        gamma = None
        val_loss = true_loss(metric, val.targets, val_scores)
        test_loss = evaluate(net, test, metric)
    else:
        grid = default_gamma_grid(val_scores, grid_size)
        gamma = calibrate_threshold(metric, val.targets, val_scores, grid)
        val_loss = true_loss(metric, val.targets, val_scores, gamma)
        test_loss = evaluate(net, test, metric, gamma)
    payload = {
        "metric": metric.value,
        "seed": seed,
        "gamma": gamma,
        "validation_loss": val_loss,
        "test_loss": test_loss,
        "calibrated": metric not in RANKING_METRICS,
    }
    _write_json(run_dir / "calibration.json", payload)
    return payload


def _toy_true_curve(dataset, alphas):
    x = dataset.features.ravel()
    preds = (alphas[:, None] * x[None, :] - 1.0) >= 0.0
    return (preds != (dataset.targets == 1)[None, :]).mean(axis=1)


def _toy_surrogate_curve(surrogate, dataset, alphas):
    x = dataset.features.ravel()
    return np.array(
        [surrogate.forward_eval(dataset.targets, a * x - 1.0) for a in alphas]
    )


def _window_gap(alphas, true_curve, surr_curve, alpha_now, width=0.2):
    mask = np.abs(alphas - alpha_now) <= width
    if not mask.any():
        return float("nan")
    return float(np.abs(surr_curve[mask] - true_curve[mask]).mean())


def _write_csv(path, header, columns):
    rows = zip(*columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def run_toy_demo(out_dir, seed, render=False):
    """Single-parameter alternating run with snapshot loss curves.

    Emits scatter.csv, snapshot-{first,mid,final}.csv (columns alpha,
    true_loss, surrogate_loss, current_alpha over the 1001-point grid),
    snapshots.csv, and demo.json; optionally renders PNGs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dataset = synth_toy_1d(TOY_N, rng)
    model = ToyAffineModel(alpha0=TOY_ALPHA0)
    surrogate = SurrogateNet()
    init_params(surrogate, rng)
    config = TrainConfig(
        metric=MetricId.MCR,
        mode="sl-s",
        seed=seed,
        eval_every=max(1, TOY_PROFILE["outer_steps"] // 10),
        record_wall_time=False,
        **TOY_PROFILE,
    )
    alphas = np.linspace(TOY_GRID_LO, TOY_GRID_HI, TOY_GRID_POINTS)
    true_curve = _toy_true_curve(dataset, alphas)
    total = config.outer_steps
    snapshot_iterations = (max(1, total // 10), total // 2, total)
    snapshots = []

    def on_snapshot(iteration):
        snapshots.append(
            {
                "iteration": iteration,
                "alpha": model.alpha,
                "curve": _toy_surrogate_curve(surrogate, dataset, alphas),
            }
        )

    result = train_bilevel(
        config,
        dataset,
        model,
        surrogate,
        rng,
        snapshot_at=snapshot_iterations,
        on_snapshot=on_snapshot,
    )
    write_trace(result.trace, out_dir / "trace.csv")
    _write_csv(
        out_dir / "scatter.csv",
        ["x", "target"],
        [dataset.features.ravel(), dataset.targets],
    )
    manifest = []
    for label, snap in zip(SNAPSHOT_LABELS, snapshots):
        _write_csv(
            out_dir / f"snapshot-{label}.csv",
            ["alpha", "true_loss", "surrogate_loss", "current_alpha"],
            [alphas, true_curve, snap["curve"], np.full(alphas.shape, snap["alpha"])],
        )
        manifest.append(
            {
                "snapshot": label,
                "iteration": snap["iteration"],
                "alpha": snap["alpha"],
                "window_gap": _window_gap(alphas, true_curve, snap["curve"], snap["alpha"]),
            }
        )
    _write_csv(
        out_dir / "snapshots.csv",
        ["snapshot", "iteration", "alpha", "window_gap"],
        [
            [m["snapshot"] for m in manifest],
            [m["iteration"] for m in manifest],
            np.array([m["alpha"] for m in manifest]),
            np.array([m["window_gap"] for m in manifest]),
        ],
    )
    optimum = float(true_curve.min())
    final_mcr = float(_toy_true_curve(dataset, np.array([model.alpha]))[0])
    summary = {
        "seed": seed,
        "iterations": total,
        "snapshot_iterations": list(snapshot_iterations),
        "final_alpha": model.alpha,
        "final_train_mcr": final_mcr,
        "grid_optimum_mcr": optimum,
        "snapshots": manifest,
        "rendered": bool(render),
        "version": __version__,
    }
    _write_json(out_dir / "demo.json", summary)
    if render:
        _render_toy_plots(out_dir, dataset, alphas, true_curve, snapshots)
    return summary


def _render_toy_plots(out_dir, dataset, alphas, true_curve, snapshots):
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("plot rendering needs matplotlib (pip install lossnets[plots])") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    x = dataset.features.ravel()
    for cls, color in ((0, "tab:cyan"), (1, "tab:orange")):
        mask = dataset.targets == cls
        ax.scatter(x[mask], np.full(mask.sum(), cls), s=8, alpha=0.4, color=color, label=f"class {cls}")
    ax.set_xlabel("x")
    ax.set_ylabel("target")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "scatter.png", dpi=120)
    plt.close(fig)
    for label, snap in zip(SNAPSHOT_LABELS, snapshots):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(alphas, true_curve, color="tab:cyan", label="true loss")
        ax.plot(alphas, snap["curve"], color="magenta", label="surrogate loss")
        ax.axvline(snap["alpha"], color="gray", linestyle="--", label="current alpha")
        ax.set_xlabel("alpha")
        ax.set_ylabel("MCR loss")
        ax.set_title(f"iteration {snap['iteration']}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"snapshot-{label}.png", dpi=120)
        plt.close(fig)


def _cmd_run(args):
    spec = load_spec(args.spec)
    if args.out is not None:
        spec.output_dir = Path(args.out)
    if args.seeds is not None:
        try:
            spec.seeds = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            raise SpecError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        if not spec.seeds:
            raise SpecError("--seeds must name at least one seed")
    if args.style is not None:
        spec.report_style = args.style
    workers = worker_count(args.workers)
    _, report, failed = run_experiment(
        spec, force=args.force, workers=workers, cache_dir=args.cache
    )
    print(report, end="")
    print(f"results: {spec.output_dir / 'results.json'}")
    return 1 if failed else 0


def _cmd_toy(args):
    summary = run_toy_demo(args.out, args.seed, render=args.render)
    print(f"final alpha {summary['final_alpha']:.4f}")
    print(
        f"final train MCR {summary['final_train_mcr']:.4f} "
        f"(grid optimum {summary['grid_optimum_mcr']:.4f})"
    )
    for snap in summary["snapshots"]:
        print(
            f"snapshot {snap['snapshot']}: iteration {snap['iteration']} "
            f"alpha {snap['alpha']:.4f} window gap {snap['window_gap']:.4f}"
        )
    print(f"artifacts: {args.out}")
    return 0


def _cmd_fetch(args):
    registry = load_registry(args.registry) if args.registry else None
    try:
        dataset = fetch_dataset(args.name, registry=registry, cache_dir=args.cache)
    except (UnknownDatasetError, FetchError) as exc:
        print(f"fetch failed: {exc}", file=sys.stderr)
        return 1
    print(
        f"fetched {dataset.name}: {len(dataset)} rows, {dataset.n_features} features, "
        f"positive fraction {dataset.positive_fraction:.3f}"
    )
    print(f"cache: {args.cache or default_cache_dir()}")
    return 0


def _cmd_report(args):
    path = Path(args.results)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise SpecError(f"cannot read results file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"results file is not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or "runs" not in payload or "spec" not in payload:
        raise SpecError("results file must contain 'spec' and 'runs'")
    style = args.style or payload["spec"].get("report_style", "ranks")
    report = render_report(payload, style=style)
    out = Path(args.out) if args.out else path.parent / "report.txt"
    out.write_text(report)
    print(report, end="")
    return 0


def _cmd_calibrate(args):
    try:
        payload = calibrate_and_eval(args.run_dir, cache_dir=args.cache)
    except FileNotFoundError as exc:
        print(f"calibrate failed: {exc}", file=sys.stderr)
        return 1
    if payload["calibrated"]:
        print(f"gamma {payload['gamma']:.6f}")
    else:
        print("ranking metric: no threshold to calibrate")
    print(f"validation loss {payload['validation_loss']:.6f}")
    print(f"test loss {payload['test_loss']:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lossnets",
        description="Train binary classifiers against learned surrogate losses.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment grid from a JSON spec")
    p_run.add_argument("spec", help="path to the experiment spec (JSON)")
    p_run.add_argument("--out", help="override the spec's output directory")
    p_run.add_argument("--seeds", help="override seeds, comma-separated")
    p_run.add_argument("--style", choices=REPORT_STYLES, help="report aggregation row")
    p_run.add_argument("--force", action="store_true", help="redo completed runs")
    p_run.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p_run.add_argument("--cache", help="dataset cache directory")
    p_run.set_defaults(func=_cmd_run)

    p_toy = sub.add_parser("toy", help="run the single-parameter demo")
    p_toy.add_argument("--out", default="toy-demo", help="output directory")
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--render", action="store_true", help="also write PNG plots (needs matplotlib)")
    p_toy.set_defaults(func=_cmd_toy)

    p_fetch = sub.add_parser("fetch", help="download a registry dataset into the cache")
    p_fetch.add_argument("name", help="registry dataset name")
    p_fetch.add_argument("--registry", help="path to a registry JSON file")
    p_fetch.add_argument("--cache", help="cache directory (default $LOSSNETS_CACHE)")
    p_fetch.set_defaults(func=_cmd_fetch)

    p_report = sub.add_parser("report", help="re-render tables from a results file")
    p_report.add_argument("results", help="path to results.json")
    p_report.add_argument("--style", choices=REPORT_STYLES)
    p_report.add_argument("--out", help="report output path (default report.txt beside results)")
    p_report.set_defaults(func=_cmd_report)

    p_cal = sub.add_parser("calibrate", help="re-select the threshold for a finished run")
    p_cal.add_argument("run_dir", help="run directory with config.json and prediction.ckpt")
    p_cal.add_argument("--cache", help="dataset cache directory")
    p_cal.set_defaults(func=_cmd_calibrate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

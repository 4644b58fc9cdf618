"""End-to-end benchmark driver.

For every (dataset, backend) cell: train the backend, sample test instances,
generate counterfactuals with the robustness term enabled ("extended",
lambda_r = 0.4 by default) and disabled ("baseline", lambda_r = 0), evaluate
the quality metrics and 1-NN fidelity, and compare the two methods with
paired t-tests. A lambda_r grid search over the same instances backs the
default-weight choice.

Every random stream derives from one master seed, so report.json is
byte-identical across runs. Wall-clock timings are therefore written to a
separate timings.json.
"""

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from .cfgen import CfConfig, config_for_lambda_r, generate_blackbox, generate_gradient
from .fidelity import fidelity_score
from .metrics import MetricsReport, evaluate
from .model import (ModelBundle, TrainConfig, accuracy, predict_class,
                    train_forest, train_mlp)
from .rng import derive_seed
from .stats import DegenerateDifferences, paired_t_test, summarize

METHODS = ("baseline", "extended")
DEFAULT_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

# seed stream tags
_SPLIT, _SAMPLE, _TRAIN, _CF, _EVAL, _FID = range(101, 107)


@dataclass
class DatasetSpec:
    name: str
    csv: str | None = None
    schema: str | None = None
    synthetic: bool = False
    n_rows: int = 1000
    seed: int = data_mod.SYNTHETIC_SEED

    def load(self):
        if self.synthetic:
            return data_mod.synthetic_dataset(self.n_rows, self.seed)
        schema = data_mod.FeatureSchema.from_json(self.schema)
        return data_mod.load_csv(self.csv, schema)

    @classmethod
    def from_dict(cls, obj):
        return cls(name=obj["name"], csv=obj.get("csv"), schema=obj.get("schema"),
                   synthetic=bool(obj.get("synthetic", False)),
                   n_rows=int(obj.get("n_rows", 1000)),
                   seed=int(obj.get("seed", data_mod.SYNTHETIC_SEED)))


@dataclass
class ExperimentConfig:
    datasets: list
    backends: list = field(default_factory=lambda: ["mlp", "forest"])
    n_instances: int = 50
    k: int = 10
    trials: int = 10
    fidelity_count: int = 1000
    radii: tuple = (0.5, 1.0, 2.0)
    split_ratio: float = 0.8
    lambda_r: float = 0.4
    cf: CfConfig = field(default_factory=CfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: tuple = DEFAULT_GRID
    master_seed: int = 0

    def validate(self):
        if self.n_instances < 2:
            raise ValueError("n_instances must be >= 2 (paired tests need pairs)")
        bad = set(self.backends) - {"mlp", "forest"}
        if bad:
            raise ValueError(f"unknown backends: {sorted(bad)}")
        if not self.datasets:
            raise ValueError("at least one dataset required")
        for spec in self.datasets:
            if not spec.synthetic:
                for path in (spec.csv, spec.schema):
                    if not path or not os.path.exists(path):
                        raise FileNotFoundError(f"dataset {spec.name}: missing file {path!r}")
        if any(not 0.0 <= g <= 1.0 for g in self.grid):
            raise ValueError("grid values must lie in [0, 1]")
        self.cf.validate()
        self.train.validate()
        return self

    @classmethod
    def from_dict(cls, obj):
        cfg = cls(datasets=[DatasetSpec.from_dict(d) for d in obj["datasets"]])
        for key in ("backends", "n_instances", "k", "trials", "fidelity_count",
                    "split_ratio", "lambda_r", "master_seed"):
            if key in obj:
                setattr(cfg, key, obj[key])
        if "radii" in obj:
            cfg.radii = tuple(obj["radii"])
        if "grid" in obj:
            cfg.grid = tuple(obj["grid"])
        if "cf" in obj:
            cfg.cf = replace(cfg.cf, **obj["cf"])
        if "train" in obj:
            cfg.train = replace(cfg.train, **obj["train"])
        return cfg

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def summary_dict(self):
        out = {
            "datasets": [dataclasses.asdict(d) for d in self.datasets],
            "backends": list(self.backends),
            "n_instances": self.n_instances,
            "k": self.k,
            "trials": self.trials,
            "fidelity_count": self.fidelity_count,
            "radii": list(self.radii),
            "split_ratio": self.split_ratio,
            "lambda_r": self.lambda_r,
            "grid": list(self.grid),
            "master_seed": self.master_seed,
            "cf": {k: v for k, v in dataclasses.asdict(self.cf).items()
                   if k != "feature_weights"},
            "train": dataclasses.asdict(self.train),
        }
        return out


def desk_config(**overrides):
    """The bundled desk-scale benchmark: synthetic data, both backends."""
    cfg = ExperimentConfig(datasets=[DatasetSpec(name="synthetic", synthetic=True)])
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class ExperimentReport:
    config: dict
    cells: list
    grid: list
    metrics_rows: list
    fidelity_rows: list
    timings: dict
    out_dir: str | None = None

    @property
    def any_failed(self):
        return any(c["status"] != "ok" for c in self.cells)

    def report_dict(self):
        return {"config": self.config, "cells": self.cells, "grid": self.grid}


def _train_backend(backend, train, val, cfg, seed):
    if backend == "mlp":
        res = train_mlp(train, val, replace(cfg.train, seed=seed))
        return res.model
    return train_forest(train, n_estimators=100, seed=seed)


def _router(backend):
    return generate_gradient if backend == "mlp" else generate_blackbox


def _instance_cf_config(cfg, desired, lambda_r, seed):
    cf = replace(cfg.cf, k=cfg.k, desired_class=int(desired), seed=seed)
    return config_for_lambda_r(cf, lambda_r)


def _aggregate(rows, fieldnames):
    mean, std = {}, {}
    for name in fieldnames:
        v = np.array([r[name] for r in rows])
        m, s = summarize(v)
        mean[name] = m
        std[name] = s
    return mean, std


def _paired_or_degenerate(ext, base):
    try:
        return paired_t_test(ext, base).as_dict()
    except DegenerateDifferences as exc:
        return {"mean_difference": exc.mean_difference, "t_statistic": None,
                "degrees_of_freedom": len(ext) - 1, "p_value": None,
                "p_scientific": None, "significant": False, "degenerate": True}


def _run_cell(ds_spec, backend, dataset, train, test, instances, cfg):
    """All per-instance work for one (dataset, backend) cell."""
    di = _dataset_index(cfg, ds_spec)
    bi = cfg.backends.index(backend)
    model = _train_backend(backend, train, test, cfg,
                           derive_seed(cfg.master_seed, di, _TRAIN, bi))
    generate = _router(backend)
    encoder = dataset.encoder
    mads_raw = data_mod.raw_mads(train)

    metric_rows = {m: [] for m in METHODS}
    fid_values = {m: {r: [] for r in cfg.radii} for m in METHODS}
    traces = {}
    gen_time = {m: 0.0 for m in METHODS}

    for ii, row_idx in enumerate(instances):
        x = test.X[row_idx]
        desired = 1 - predict_class(model, x)
        cf_seed = derive_seed(cfg.master_seed, di, bi, ii, _CF)
        eval_seed = derive_seed(cfg.master_seed, di, bi, ii, _EVAL)
        for method, lam in (("baseline", 0.0), ("extended", cfg.lambda_r)):
            cf_cfg = _instance_cf_config(cfg, desired, lam, cf_seed)
            cs = generate(model, x, cf_cfg, encoder)
            gen_time[method] += cs.generation_time
            rep = evaluate(cs, model, cf_cfg, encoder, cfg.trials, eval_seed)
            row = {"dataset": ds_spec.name, "backend": backend, "method": method,
                   "instance": ii}
            row.update(rep.as_dict())
            metric_rows[method].append(row)
            for ri, radius in enumerate(cfg.radii):
                fid = fidelity_score(model, x, cs.cfs, radius, cfg.fidelity_count,
                                     derive_seed(cfg.master_seed, di, bi, ii, _FID, ri),
                                     encoder, mads_raw)
                fid_values[method][radius].append(fid)
            if method == "extended":
                traces[ii] = cs.trace

    methods_out = {}
    fidelity_rows = []
    for method in METHODS:
        mean, std = _aggregate(metric_rows[method],
                               [f for f in MetricsReport.FIELDS if f != "generation_time"])
        fid_list = []
        for radius in cfg.radii:
            fm, fs = summarize(fid_values[method][radius])
            fid_list.append({"radius": radius, "mean": fm, "std": fs})
            fidelity_rows.append({"dataset": ds_spec.name, "backend": backend,
                                  "method": method, "radius": radius,
                                  "mean": fm, "std": fs})
        methods_out[method] = {
            "metrics": {f: {"mean": mean[f], "std": std[f]} for f in mean},
            "fidelity": fid_list,
        }

    tests = {}
    for name in ("validity", "proximity", "sparsity", "diversity", "robustness"):
        ext = [r[name] for r in metric_rows["extended"]]
        base = [r[name] for r in metric_rows["baseline"]]
        tests[name] = _paired_or_degenerate(ext, base)
    for radius in cfg.radii:
        tests[f"fidelity_{radius}"] = _paired_or_degenerate(
            fid_values["extended"][radius], fid_values["baseline"][radius])

    cell = {"dataset": ds_spec.name, "backend": backend, "status": "ok",
            "error": None, "accuracy": accuracy(model, test),
            "n_instances": len(instances), "methods": methods_out,
            "paired_tests": tests}
    per_instance = [r for m in METHODS for r in metric_rows[m]]
    timing = {"baseline_seconds": gen_time["baseline"],
              "extended_seconds": gen_time["extended"],
              "ratio": (gen_time["extended"] / gen_time["baseline"]
                        if gen_time["baseline"] > 0 else None)}
    return cell, per_instance, fidelity_rows, traces, timing, model


def _dataset_index(cfg, spec):
    return next(i for i, s in enumerate(cfg.datasets) if s is spec)


def _grid_cell(ds_spec, backend, model, test, instances, cfg, grid):
    di = _dataset_index(cfg, ds_spec)
    bi = cfg.backends.index(backend)
    generate = _router(backend)
    rows = []
    for lam in grid:
        robs, totals, vals = [], [], []
        for ii, row_idx in enumerate(instances):
            x = test.X[row_idx]
            desired = 1 - predict_class(model, x)
            cf_cfg = _instance_cf_config(cfg, desired, lam,
                                         derive_seed(cfg.master_seed, di, bi, ii, _CF))
            cs = generate(model, x, cf_cfg, test.encoder)
            rep = evaluate(cs, model, cf_cfg, test.encoder, cfg.trials,
                           derive_seed(cfg.master_seed, di, bi, ii, _EVAL))
            robs.append(rep.robustness)
            vals.append(rep.validity)
            totals.append(cs.trace.records[-1]["total_loss"] if len(cs.trace) else 0.0)
        rows.append({"dataset": ds_spec.name, "backend": backend, "lambda_r": lam,
                     "mean_robustness": float(np.mean(robs)),
                     "mean_total_loss": float(np.mean(totals)),
                     "validity": float(np.mean(vals))})
    return rows


def _write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(fieldnames) + "\n")
        for r in rows:
            cells = []
            for f in fieldnames:
                v = r[f]
                cells.append(format(v, ".17g") if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg, out_dir, run_grid=True):
    """Run the full protocol and write all artifacts into out_dir.

    Output layout: report.json, metrics.csv, fidelity.csv, grid_lambda_r.csv,
    timings.json and traces/<dataset>_<backend>_<instance>.csv (loss traces of
    the extended method). Failures isolate to their (dataset, backend) cell.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    traces_dir = os.path.join(out_dir, "traces")
    os.makedirs(traces_dir, exist_ok=True)

    cells, metrics_rows, fidelity_rows, grid_rows = [], [], [], []
    timings = {"cells": []}

    for ds_spec in cfg.datasets:
        di = _dataset_index(cfg, ds_spec)
        try:
            dataset = ds_spec.load()
            train, test = data_mod.train_test_split(
                dataset, cfg.split_ratio, derive_seed(cfg.master_seed, di, _SPLIT))
            if test.n < cfg.n_instances:
                raise ValueError(f"test split has {test.n} rows < n_instances")
            rng = np.random.default_rng(derive_seed(cfg.master_seed, di, _SAMPLE))
            instances = np.sort(rng.choice(test.n, size=cfg.n_instances, replace=False))
        except Exception as exc:  # dataset-level failure poisons all its cells
            for backend in cfg.backends:
                cells.append({"dataset": ds_spec.name, "backend": backend,
                              "status": "failed", "error": str(exc)})
            continue
        for backend in cfg.backends:
            t0 = time.perf_counter()
            try:
                cell, rows, fid_rows, traces, timing, model = _run_cell(
                    ds_spec, backend, dataset, train, test, instances, cfg)
            except Exception as exc:
                cells.append({"dataset": ds_spec.name, "backend": backend,
                              "status": "failed", "error": str(exc)})
                continue
            cells.append(cell)
            metrics_rows.extend(rows)
            fidelity_rows.extend(fid_rows)
            for ii, trace in traces.items():
                trace.write_csv(os.path.join(
                    traces_dir, f"{ds_spec.name}_{backend}_{ii}.csv"))
            timing["wall_seconds"] = time.perf_counter() - t0
            timing["dataset"] = ds_spec.name
            timing["backend"] = backend
            timings["cells"].append(timing)
            if run_grid and cfg.grid:
                grid_rows.extend(_grid_cell(ds_spec, backend, model, test,
                                            instances, cfg, cfg.grid))

    report = ExperimentReport(config=cfg.summary_dict(), cells=cells,
                              grid=grid_rows, metrics_rows=metrics_rows,
                              fidelity_rows=fidelity_rows, timings=timings,
                              out_dir=out_dir)
    _write_json(os.path.join(out_dir, "report.json"), report.report_dict())
    _write_json(os.path.join(out_dir, "timings.json"), timings)
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["dataset", "backend", "method", "instance"] + list(MetricsReport.FIELDS),
               metrics_rows)
    _write_csv(os.path.join(out_dir, "fidelity.csv"),
               ["dataset", "backend", "method", "radius", "mean", "std"],
               fidelity_rows)
    if run_grid and cfg.grid:
        _write_csv(os.path.join(out_dir, "grid_lambda_r.csv"),
                   ["dataset", "backend", "lambda_r", "mean_robustness",
                    "mean_total_loss", "validity"], grid_rows)
    return report


def grid_search_lambda_r(cfg, grid=None, out_path=None):
    """Grid search over the robustness weight on the configured instances.

    Reuses the experiment's training/sampling streams so a row at a given
    lambda_r reproduces the corresponding full-run method exactly.
    """
    cfg.validate()
    grid = tuple(cfg.grid if grid is None else grid)
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("grid values must lie in [0, 1]")
    rows = []
    for ds_spec in cfg.datasets:
        di = _dataset_index(cfg, ds_spec)
        dataset = ds_spec.load()
        train, test = data_mod.train_test_split(
            dataset, cfg.split_ratio, derive_seed(cfg.master_seed, di, _SPLIT))
        rng = np.random.default_rng(derive_seed(cfg.master_seed, di, _SAMPLE))
        instances = np.sort(rng.choice(test.n, size=cfg.n_instances, replace=False))
        for backend in cfg.backends:
            bi = cfg.backends.index(backend)
            model = _train_backend(backend, train, test, cfg,
                                   derive_seed(cfg.master_seed, di, _TRAIN, bi))
            rows.extend(_grid_cell(ds_spec, backend, model, test, instances, cfg, grid))
    if out_path:
        _write_csv(out_path, ["dataset", "backend", "lambda_r", "mean_robustness",
                              "mean_total_loss", "validity"], rows)
    return rows

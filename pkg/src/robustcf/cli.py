"""Command-line front end.

Subcommands: synth (write the bundled synthetic dataset), train, explain,
evaluate, bench, grid. Exit codes: 0 ok, 1 usage error, 2 I/O error,
3 training failure, 4 no valid counterfactual found, 5 benchmark cell failed.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .cfgen import CfConfig, LossWeights, generate_blackbox, generate_gradient
from .data import DataError, FeatureSchema, load_csv, raw_mads, write_synthetic_csv
from .harness import (DEFAULT_GRID, ExperimentConfig, desk_config,
                      grid_search_lambda_r, run_experiment)
from .metrics import evaluate
from .model import (ModelBundle, TrainConfig, TrainingError, accuracy,
                    load_model, predict_class, save_model, train_forest,
                    train_mlp)
from .cfgen import CounterfactualSet, LossTrace
from .data import train_test_split


def _parse_floats(text):
    return tuple(float(v) for v in text.split(","))


def build_parser():
    p = argparse.ArgumentParser(
        prog="robustcf",
        description="Robust counterfactual explanations for binary tabular classifiers.")
    p.add_argument("--verbose", action="store_true", help="print progress details")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write the bundled synthetic dataset")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--rows", type=int, default=1000, help="row count (default: 1000)")
    sp.add_argument("--seed", type=int, default=None, help="generator seed")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a classifier backend")
    tp.add_argument("--data", required=True, help="CSV path")
    tp.add_argument("--schema", required=True, help="schema JSON path")
    tp.add_argument("--backend", choices=("mlp", "forest"), default="mlp",
                    help="backend (default: mlp)")
    tp.add_argument("--out", required=True, help="model file to write")
    tp.add_argument("--epochs", type=int, default=10, help="training epochs (default: 10)")
    tp.add_argument("--learning-rate", type=float, default=0.001,
                    help="Adam learning rate (default: 0.001)")
    tp.add_argument("--batch", type=int, default=16, help="train batch size (default: 16)")
    tp.add_argument("--batch-eval", type=int, default=4,
                    help="eval batch size (default: 4)")
    tp.add_argument("--hidden", type=int, default=32, help="hidden width (default: 32)")
    tp.add_argument("--patience", type=int, default=3,
                    help="early-stopping patience in epochs (default: 3)")
    tp.add_argument("--estimators", type=int, default=100,
                    help="forest size (default: 100)")
    tp.add_argument("--split", type=float, default=0.8,
                    help="train fraction (default: 0.8)")
    tp.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("explain", help="generate counterfactuals for one instance")
    ep.add_argument("--model", required=True, help="model file from `train`")
    ep.add_argument("--instance", required=True,
                    help="raw feature values as inline JSON or a path to a JSON file")
    ep.add_argument("--k", type=int, default=10, help="counterfactuals to generate (default: 10)")
    ep.add_argument("--lambda-p", type=float, default=0.5,
                    help="proximity weight (default: 0.5)")
    ep.add_argument("--lambda-d", type=float, default=1.0,
                    help="diversity weight (default: 1.0)")
    ep.add_argument("--lambda-r", type=float, default=0.4,
                    help="robustness weight (default: 0.4)")
    ep.add_argument("--p-norm", type=int, choices=(1, 2), default=1,
                    help="proximity norm (default: 1)")
    ep.add_argument("--iterations", type=int, default=500,
                    help="optimizer budget (default: 500)")
    ep.add_argument("--learning-rate", type=float, default=0.05,
                    help="optimizer step size (default: 0.05)")
    ep.add_argument("--perturbation-scale", type=float, default=0.05,
                    help="robustness perturbation scale (default: 0.05)")
    ep.add_argument("--desired", type=int, choices=(0, 1), default=None,
                    help="target class (default: opposite of the prediction)")
    ep.add_argument("--trials", type=int, default=10,
                    help="perturbation draws for reported robustness (default: 10)")
    ep.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    ep.add_argument("--out", required=True, help="output directory")
    ep.add_argument("--encoded", action="store_true",
                    help="include encoded-space rows in the output")
    ep.set_defaults(func=cmd_explain)

    vp = sub.add_parser("evaluate", help="re-score a saved counterfactual file")
    vp.add_argument("--model", required=True)
    vp.add_argument("--cfs", required=True, help="cfs.json written by `explain`")
    vp.add_argument("--trials", type=int, default=10,
                    help="perturbation draws (default: 10)")
    vp.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    vp.set_defaults(func=cmd_evaluate)

    bp = sub.add_parser("bench", help="run the full benchmark protocol")
    bp.add_argument("--config", default=None, help="experiment config JSON")
    bp.add_argument("--out", required=True, help="report directory")
    bp.add_argument("--instances", type=int, default=None,
                    help="test instances per dataset (default: 50)")
    bp.add_argument("--k", type=int, default=None,
                    help="counterfactuals per instance (default: 10)")
    bp.add_argument("--backends", default=None,
                    help="comma list of backends (default: mlp,forest)")
    bp.add_argument("--trials", type=int, default=None,
                    help="robustness perturbation draws (default: 10)")
    bp.add_argument("--neighbors", type=int, default=None,
                    help="fidelity neighbor count (default: 1000)")
    bp.add_argument("--radii", default=None,
                    help="fidelity MAD radii (default: 0.5,1.0,2.0)")
    bp.add_argument("--lambda-r", type=float, default=None,
                    help="extended-method robustness weight (default: 0.4)")
    bp.add_argument("--seed", type=int, default=None, help="master seed (default: 0)")
    bp.add_argument("--no-grid", action="store_true",
                    help="skip the lambda_r grid search")
    bp.set_defaults(func=cmd_bench)

    gp = sub.add_parser("grid", help="grid search over the robustness weight")
    gp.add_argument("--config", default=None, help="experiment config JSON")
    gp.add_argument("--out", required=True, help="CSV path to write")
    gp.add_argument("--grid", default=None,
                    help="comma list of weights in [0,1] (default: 0,0.2,0.4,0.6,0.8,1.0)")
    gp.add_argument("--instances", type=int, default=None,
                    help="test instances per dataset (default: 50)")
    gp.add_argument("--backends", default=None,
                    help="comma list of backends (default: mlp,forest)")
    gp.add_argument("--seed", type=int, default=None, help="master seed (default: 0)")
    gp.set_defaults(func=cmd_grid)
    return p


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    kwargs = {"n_rows": args.rows}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    write_synthetic_csv(os.path.join(args.out, "synthetic.csv"),
                        os.path.join(args.out, "schema.json"), **kwargs)
    print(f"wrote {args.out}/synthetic.csv and {args.out}/schema.json")
    return 0


def cmd_train(args):
    for path in (args.data, args.schema):
        if not os.path.exists(path):
            raise FileNotFoundError(path)
    schema = FeatureSchema.from_json(args.schema)
    ds = load_csv(args.data, schema)
    train, test = train_test_split(ds, args.split, args.seed)
    if args.backend == "mlp":
        cfg = TrainConfig(learning_rate=args.learning_rate, epochs=args.epochs,
                          batch_train=args.batch, batch_eval=args.batch_eval,
                          early_stopping_patience=args.patience,
                          hidden=args.hidden, seed=args.seed).validate()
        res = train_mlp(train, test, cfg)
        for ep, (tl, vl) in enumerate(zip(res.train_losses, res.val_losses), start=1):
            print(f"epoch {ep}: train_loss={tl:.6f} val_loss={vl:.6f}")
        model = res.model
    else:
        if args.estimators < 1:
            raise ValueError("estimators must be >= 1")
        model = train_forest(train, n_estimators=args.estimators, seed=args.seed)
    acc = accuracy(model, test)
    bundle = ModelBundle(args.backend, model, ds.encoder, raw_mads(train), acc)
    save_model(args.out, bundle)
    print(f"held-out accuracy: {acc:.4f}")
    print(f"model written to {args.out}")
    return 0


def _load_instance(text, encoder):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        if not os.path.exists(text):
            raise FileNotFoundError(f"instance file not found: {text}") from None
        with open(text, encoding="utf-8") as fh:
            raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("instance must be a JSON object of feature values")
    return raw, encoder.encode_row(raw)


def _print_metrics(rep):
    for name in ("validity", "proximity", "sparsity", "diversity", "robustness"):
        print(f"{name}: {getattr(rep, name):.6f}")


def cmd_explain(args):
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"model file not found: {args.model}")
    bundle = load_model(args.model)
    raw, x = _load_instance(args.instance, bundle.encoder)
    desired = args.desired
    if desired is None:
        desired = 1 - predict_class(bundle.model, x)
    cfg = CfConfig(k=args.k, desired_class=desired,
                   weights=LossWeights(args.lambda_p, args.lambda_d, args.lambda_r),
                   p_norm=args.p_norm, max_iterations=args.iterations,
                   learning_rate=args.learning_rate,
                   perturbation_scale=args.perturbation_scale,
                   seed=args.seed).validate()
    generate = generate_gradient if bundle.backend == "mlp" else generate_blackbox
    cs = generate(bundle.model, x, cfg, bundle.encoder)
    rep = evaluate(cs, bundle.model, cfg, bundle.encoder, args.trials, args.seed)

    os.makedirs(args.out, exist_ok=True)
    cs.trace.write_csv(os.path.join(args.out, "trace.csv"))
    doc = {
        "desired_class": int(desired),
        "instance": raw,
        "instance_encoded": [float(v) for v in x],
        "found_any_valid": cs.found_any,
        "metrics": rep.as_dict(),
        "counterfactuals": [],
    }
    for i in range(cs.k):
        entry = {
            "features": bundle.encoder.decode_row(cs.cfs[i]),
            "achieved_class": int(cs.achieved_class[i]),
            "valid": bool(cs.valid_mask[i]),
        }
        if args.encoded:
            entry["encoded"] = [float(v) for v in cs.cfs[i]]
        doc["counterfactuals"].append(entry)
    with open(os.path.join(args.out, "cfs.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

    _print_metrics(rep)
    print(f"outputs written to {args.out}")
    if not cs.found_any:
        print("warning: no candidate reached the desired class; "
              "best-effort set written", file=sys.stderr)
        return 4
    return 0


def cmd_evaluate(args):
    for path in (args.model, args.cfs):
        if not os.path.exists(path):
            raise FileNotFoundError(path)
    bundle = load_model(args.model)
    with open(args.cfs, encoding="utf-8") as fh:
        doc = json.load(fh)
    x = np.array(doc["instance_encoded"], dtype=float)
    rows = np.array([bundle.encoder.encode_row(c["features"])
                     for c in doc["counterfactuals"]])
    desired = int(doc["desired_class"])
    achieved = (bundle.model.predict_proba(rows) >= 0.5).astype(int)
    cs = CounterfactualSet(cfs=rows, origin=x, desired_class=desired,
                           achieved_class=achieved, trace=LossTrace())
    cfg = CfConfig(k=len(rows), desired_class=desired).validate()
    rep = evaluate(cs, bundle.model, cfg, bundle.encoder, args.trials, args.seed)
    _print_metrics(rep)
    return 0


def _bench_config(args):
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = desk_config()
    if args.instances is not None:
        cfg.n_instances = args.instances
    if getattr(args, "k", None) is not None:
        cfg.k = args.k
    if args.backends is not None:
        cfg.backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "neighbors", None) is not None:
        cfg.fidelity_count = args.neighbors
    if getattr(args, "radii", None) is not None:
        cfg.radii = _parse_floats(args.radii)
    if getattr(args, "lambda_r", None) is not None:
        cfg.lambda_r = args.lambda_r
    if args.seed is not None:
        cfg.master_seed = args.seed
    if getattr(args, "grid", None) is not None:
        cfg.grid = _parse_floats(args.grid)
    return cfg


def cmd_bench(args):
    cfg = _bench_config(args)
    report = run_experiment(cfg, args.out, run_grid=not args.no_grid)
    for cell in report.cells:
        status = cell["status"]
        print(f"cell {cell['dataset']}/{cell['backend']}: {status}"
              + (f" ({cell['error']})" if status != "ok" else ""))
    print(f"report written to {args.out}")
    return 5 if report.any_failed else 0


def cmd_grid(args):
    cfg = _bench_config(args)
    rows = grid_search_lambda_r(cfg, cfg.grid, out_path=args.out)
    for r in rows:
        print(f"{r['dataset']}/{r['backend']} lambda_r={r['lambda_r']}: "
              f"robustness={r['mean_robustness']:.6f} validity={r['validity']:.4f}")
    print(f"grid written to {args.out}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

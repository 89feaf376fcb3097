"""Command line front end, ``python -m auglaplace <command>``.

Commands
--------
train            run one experiment from a JSON config
gradcheck        compare analytic hyper-gradients against finite differences
report           aggregate result.json files into CSV tables
dump-transforms  write sampled affine matrices as CSV
gen-data         materialise the train/test sets of a config
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from ._io import atomic_write_text
from .augment import AugmentationParams, Family, affine_matrix, sample_eps
from .data import (
    TransformSpec,
    apply_transform,
    gen_toy,
    load_idx,
    save_dataset,
    subset,
    to_polar,
)
from .hypergrad import fd_oracle, grad_eta_total, laplace_pass, marglik_at
from .laplace import Prior, grad_log_precision, log_marglik
from .model import MlpModel, save_checkpoint
from .train import METHODS, DivergenceError, TrainConfig, run

log = logging.getLogger("auglaplace")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
GRADCHECK_MAX_PARAMS = 500
GRADCHECK_TOL = 1e-3
TOY_TEST_SEED_OFFSET = 1000
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_TRAIN_KEYS = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": ["integer", "null"], "minimum": 1},
    "S_train": {"type": "integer", "minimum": 1},
    "S_test": {"type": "integer", "minimum": 1},
    "S_hyper": {"type": ["integer", "null"], "minimum": 1},
    "lr_theta": {"type": "number", "minimum": 0},
    "lr_theta_floor": {"type": ["number", "null"], "minimum": 0},
    "lr_hyper": {"type": "number", "minimum": 0},
    "lr_hyper_floor": {"type": ["number", "null"], "minimum": 0},
    "lr_prior": {"type": ["number", "null"], "minimum": 0},
    "burnin_epochs": {"type": "integer", "minimum": 0},
    "hyper_every": {"type": "integer", "minimum": 1},
    "hyper_subsample": {"type": ["integer", "null"], "minimum": 1},
    "eta_init": {"type": "number"},
    "prior_prec_init": {"type": "number", "exclusiveMinimum": 0},
    "tied_prior": {"type": "boolean"},
    "antithetic": {"type": "boolean"},
    "differentiate_lambda": {"type": "boolean"},
    "seed": {"type": "integer"},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model", "method"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["toy", "mnist"]},
                "transform": {"enum": ["None", "FullRot", "PartialRot", "Translate", "Scale"]},
                "subset_n": {"type": ["integer", "null"], "minimum": 1},
                "test_n": {"type": ["integer", "null"], "minimum": 1},
                "n": {"type": "integer", "minimum": 2},
                "features": {"enum": ["cartesian", "polar"]},
                "seed": {"type": "integer"},
                "paths": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"dir": {"type": "string"}, **{k: {"type": "string"} for k in MNIST_FILES}},
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["hidden_sizes"],
            "properties": {
                "hidden_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "activation": {"enum": ["tanh", "relu"]},
            },
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": list(METHODS)},
                "curvature": {"enum": ["kfac", "full"]},
                "final_curvature": {"enum": ["kfac", "full", "auto"]},
                "fixed_eta": {"type": ["array", "null"], "items": {"type": "number"}},
            },
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_KEYS},
        "output_dir": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


# --- config -------------------------------------------------------------------

def load_config(path, seed=None):
    """Parse and validate a run config; ``seed`` overrides both data and training seeds."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))
    cfg.setdefault("train", {})
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["dataset"]["seed"] = seed
    cfg["_base_dir"] = str(path.resolve().parent)
    return cfg


def train_config(cfg) -> TrainConfig:
    family = Family.POINT_ROTATION if cfg["dataset"]["name"] == "toy" else Family.IMAGE_AFFINE
    method = cfg["method"]
    kwargs = dict(cfg["train"])
    kwargs.setdefault("seed", cfg["dataset"].get("seed", 0))
    try:
        return TrainConfig(
            method=method["type"],
            curvature=method.get("curvature", "kfac"),
            final_curvature=method.get("final_curvature", "auto"),
            fixed_eta=method.get("fixed_eta"),
            family=family.value,
            **kwargs,
        )
    except ValueError as err:
        raise ConfigError(f"train: {err}") from err


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def build_datasets(cfg):
    """Train and test sets described by the ``dataset`` block."""
    d = cfg["dataset"]
    seed = d.get("seed", 0)
    if d["name"] == "toy":
        n = d.get("n", 200)
        train = gen_toy(seed, n)
        test = gen_toy(seed + TOY_TEST_SEED_OFFSET, d.get("test_n") or n)
        if d.get("features", "cartesian") == "polar":
            if cfg["method"]["type"] != "baseline":
                raise ConfigError("dataset/features: polar features only support method 'baseline'")
            train, test = to_polar(train), to_polar(test)
        return train, test
    paths = d.get("paths", {})
    base = cfg.get("_base_dir", ".")
    root = _resolve(base, paths.get("dir", "data/mnist"))
    files = {k: _resolve(base, paths[k]) if k in paths else root / v for k, v in MNIST_FILES.items()}
    missing = [str(p) for p in files.values() if not p.exists()]
    if missing:
        raise ConfigError("dataset/paths: missing files " + ", ".join(missing))
    train = load_idx(files["train_images"], files["train_labels"])
    test = load_idx(files["test_images"], files["test_labels"])
    if d.get("subset_n"):
        try:
            train = subset(train, d["subset_n"], seed)
        except ValueError as err:
            raise ConfigError(f"dataset/subset_n: {err}") from err
    if d.get("test_n"):
        test = subset(test, min(d["test_n"], len(test)), seed + 1)
    kind = d.get("transform", "None")
    train = apply_transform(train, TransformSpec(kind, seed))
    test = apply_transform(test, TransformSpec(kind, seed + 1))
    return train, test


def output_dir(cfg, out=None):
    if out:
        return Path(out)
    if os.environ.get("OUTPUT_DIR"):
        return Path(os.environ["OUTPUT_DIR"])
    if "output_dir" in cfg:
        return _resolve(cfg["_base_dir"], cfg["output_dir"])
    raise ConfigError("no output directory: pass --out, set OUTPUT_DIR or give output_dir in the config")


def _public(cfg):
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


# --- train --------------------------------------------------------------------

def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def trajectory_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0].keys())
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def result_record(cfg, tcfg: TrainConfig, res):
    d = cfg["dataset"]
    return {
        "dataset": d["name"],
        "transform": d.get("transform", "None") if d["name"] == "mnist" else d.get("features", "cartesian"),
        "method": tcfg.method,
        "seed": tcfg.seed,
        "curvature": tcfg.curvature,
        "final_eta": [float(e) for e in res.final_eta],
        "final_abs_eta": [float(abs(e)) for e in res.final_eta],
        "final_prior_precision": [float(np.exp(v)) for v in res.final_log_prec],
        "marglik": res.final_report.to_dict(),
        "marglik_total": res.final_report.total,
        "test_acc": res.test_accuracy,
        "test_nll": res.test_nll,
        "epochs": len(res.rows),
        "wallclock_seconds": res.wallclock,
        "config": _public(cfg),
        "train_config": asdict(tcfg),
    }


def cmd_train(args):
    cfg = load_config(args.config, args.seed)
    tcfg = train_config(cfg)
    out = output_dir(cfg, args.out)
    train, test = build_datasets(cfg)
    m = cfg["model"]
    log.info("training %s on %s (N=%d) -> %s", tcfg.method, cfg["dataset"]["name"], len(train), out)
    try:
        res = run(tcfg, train, test, tuple(m["hidden_sizes"]), m.get("activation", "tanh"))
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "trajectory.csv", trajectory_csv(res.rows))
    save_checkpoint(res.model, out / "model", extra={"eta": res.final_eta.tolist(), "log_prec": res.final_log_prec.tolist()})
    record = result_record(cfg, tcfg, res)
    atomic_write_text(out / "result.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(
        f"{tcfg.method}: marglik {res.final_report.total:.4f}  test acc {res.test_accuracy:.4f}  "
        f"test nll {res.test_nll:.4f}  |eta| {np.round(np.abs(res.final_eta), 4).tolist()}"
    )
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------

def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def gradcheck_rows(cfg, corrupt=False, h=1e-5):
    """(component, analytic, finite difference) triples for the config's tiny problem."""
    tcfg = train_config(cfg)
    train, _ = build_datasets(cfg)
    m = cfg["model"]
    model = MlpModel.init([train.input_dim, *m["hidden_sizes"], train.n_classes], m.get("activation", "tanh"), seed=tcfg.seed)
    if model.n_params > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck needs a network with at most {GRADCHECK_MAX_PARAMS} parameters, got {model.n_params}")
    rng = np.random.default_rng([tcfg.seed, 9001])
    prior = Prior(rng.normal(np.log(tcfg.prior_prec_init), 0.3, model.n_layers))
    x, y = train.inputs, train.labels
    rows = []
    curvature = tcfg.curvature
    if tcfg.method == "baseline":
        curv_state, report = laplace_pass(model, x, y, None, prior, None, curvature)
        loglik = report.loglik
    else:
        eta = np.asarray(tcfg.fixed_eta, dtype=np.float64) if tcfg.fixed_eta is not None else rng.uniform(0.2, 0.6, tcfg.k)
        aug = AugmentationParams(tcfg.family, eta)
        eps = sample_eps(rng, tcfg.s_hyper, tcfg.k, tcfg.antithetic, batch=(len(x),))
        hp = grad_eta_total(model, x, y, aug, prior, tcfg.s_hyper, curvature=curvature, eps=eps,
                            differentiate_lambda=tcfg.differentiate_lambda)
        curv_state, loglik = hp.curvature, hp.loglik

        def part(name):
            return lambda e: getattr(marglik_at(model, x, y, aug.with_eta(e), prior, eps, curvature), name)

        analytic = {"loglik": hp.gradient.loglik_part, "logdet": hp.gradient.logdet_part, "total": hp.gradient.total}
        if corrupt:
            analytic = {k: v * 1.01 + 1e-3 for k, v in analytic.items()}
        fd = {"loglik": fd_oracle(part("loglik"), eta, h), "logdet": fd_oracle(part("logdet_term"), eta, h)}
        fd["total"] = fd["loglik"] + fd["logdet"]
        for name in ("loglik", "logdet", "total"):
            for i in range(tcfg.k):
                rows.append((f"eta_{i + 1}/{name}", float(analytic[name][i]), float(fd[name][i])))
    g = grad_log_precision(curv_state, model, prior)
    fd_g = fd_oracle(lambda lp: log_marglik(curv_state, model, Prior(lp), loglik).total, prior.log_prec, h)
    for l in range(model.n_layers):
        rows.append((f"log_prec_{l + 1}", float(g[l]), float(fd_g[l])))
    return rows


def cmd_gradcheck(args):
    cfg = load_config(args.config, args.seed)
    rows = gradcheck_rows(cfg, corrupt=args.corrupt_gradient)
    width = max(len(r[0]) for r in rows)
    print(f"{'component':<{width}}  {'analytic':>16}  {'finite-diff':>16}  {'rel-error':>10}")
    worst = 0.0
    for name, a, f in rows:
        err = _rel_err(a, f)
        worst = max(worst, err)
        flag = "" if err < GRADCHECK_TOL else "  FAIL"
        print(f"{name:<{width}}  {a:>16.9g}  {f:>16.9g}  {err:>10.2e}{flag}")
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.2e} ({'pass' if ok else 'fail'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


# --- report -------------------------------------------------------------------

REPORT_COLUMNS = ["dataset", "transform", "method", "seed", "marglik_total", "test_acc", "test_nll"]
SUMMARY_METRICS = ["marglik_total", "test_acc", "test_nll"]


def collect_results(root):
    """Valid result records below ``root``, sorted so the output does not depend on file order."""
    records = []
    for path in sorted(Path(root).rglob("result.json")):
        try:
            rec = json.loads(path.read_text())
            row = {k: rec[k] for k in REPORT_COLUMNS}
            for k in SUMMARY_METRICS:
                row[k] = float(row[k])
        except (OSError, ValueError, KeyError, TypeError) as err:
            print(f"warning: skipping {path}: {err}", file=sys.stderr)
            continue
        records.append(row)
    records.sort(key=lambda r: (r["dataset"], r["transform"], r["method"], r["seed"]))
    return records


def summarize(records):
    """Per (dataset, transform, method): mean and standard error (sample std / sqrt(n)) over seeds."""
    groups = {}
    for r in records:
        groups.setdefault((r["dataset"], r["transform"], r["method"]), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        row = dict(zip(("dataset", "transform", "method"), key))
        row["n_seeds"] = len(rs)
        for k in SUMMARY_METRICS:
            v = np.array([r[k] for r in rs])
            row[f"{k}_mean"] = float(v.mean())
            row[f"{k}_se"] = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
        out.append(row)
    return out


def _csv(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def cmd_report(args):
    root = Path(args.dir)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    records = collect_results(root)
    if not records:
        print(f"error: no valid result.json files under {root}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else root
    summary = summarize(records)
    atomic_write_text(out / "results.csv", _csv(records, REPORT_COLUMNS))
    sum_cols = ["dataset", "transform", "method", "n_seeds"] + [f"{k}_{s}" for k in SUMMARY_METRICS for s in ("mean", "se")]
    atomic_write_text(out / "results_summary.csv", _csv(summary, sum_cols))
    for r in summary:
        print(
            f"{r['dataset']:<6} {r['transform']:<10} {r['method']:<9} n={r['n_seeds']}  "
            f"marglik {r['marglik_total_mean']:.3f} +- {r['marglik_total_se']:.3f}  "
            f"acc {r['test_acc_mean']:.4f} +- {r['test_acc_se']:.4f}"
        )
    return EXIT_OK


# --- dump-transforms ----------------------------------------------------------

def cmd_dump_transforms(args):
    if args.result:
        eta = np.asarray(json.loads(Path(args.result).read_text())["final_eta"], dtype=np.float64)
    elif args.eta:
        eta = np.array([float(v) for v in args.eta.split(",")])
    else:
        print("error: pass --eta or --result", file=sys.stderr)
        return EXIT_CONFIG
    if eta.size != 6:
        print(f"error: affine transforms need 6 components, got {eta.size}", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng([args.seed or 0, 9002])
    eps = sample_eps(rng, args.n, 6)
    T, _ = affine_matrix(eta, eps)
    rows = [{f"t{i + 1}{j + 1}": T[s, i, j] for i in range(3) for j in range(3)} for s in range(args.n)]
    header = list(rows[0].keys())
    out = Path(args.out) if args.out else Path(os.environ.get("OUTPUT_DIR", "."))
    atomic_write_text(out / "transforms.csv", _csv(rows, header))
    print(f"wrote {args.n} transforms to {out / 'transforms.csv'}")
    return EXIT_OK


# --- gen-data -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed)
    train, test = build_datasets(cfg)
    out = output_dir(cfg, args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="python -m auglaplace", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference hyper-gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate result.json files")
    p.add_argument("dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-transforms", help="sample affine matrices for a given eta")
    p.add_argument("--eta", help="comma separated eta (6 values)")
    p.add_argument("--result", help="take eta from a result.json")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_transforms)

    p = sub.add_parser("gen-data", help="write the train/test sets of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG

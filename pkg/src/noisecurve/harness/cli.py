"""Command-line entry point: gen-data, train, eval, curvature, verify, transform."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .. import data as D
from . import checkpoint as ckpt
from . import config as C
from . import evaluate as E
from . import train as T
from . import verify as V

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.csv"
CURVATURE_NAME = "curvature.csv"
REPORT_NAME = "report.json"


class UsageError(Exception):
    pass


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def update_report(run_dir, section, payload):
    """Merge one section into report.json, keeping the others."""
    path = os.path.join(run_dir, REPORT_NAME)
    report = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    report[section] = _jsonable(payload)
    _write(path, json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def run_config(run_dir, override=None) -> C.ExperimentConfig:
    path = override or os.path.join(run_dir, CONFIG_NAME)
    if not os.path.exists(path):
        raise UsageError(f"no config at {path}; run 'train' first or pass --config")
    return C.load(path)


def test_split(cfg):
    return T.split(cfg, T.build_dataset(cfg))[1]


def load_checkpoint(run_dir):
    path = os.path.join(run_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise UsageError(f"no checkpoint at {path}; run 'train' first")
    return ckpt.load(path)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    cfg = C.load(args.config)
    ds = T.build_dataset(cfg)
    D.save(ds, args.out)
    if args.csv:
        D.export_csv(ds, args.csv)
    print(f"wrote {len(ds)} samples ({ds.kind}, shape {ds.shape}) to {args.out}")
    return EXIT_OK


def do_train(cfg: C.ExperimentConfig, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    _write(os.path.join(run_dir, CONFIG_NAME), cfg.to_text())
    train_ds, test_ds = T.split(cfg, T.build_dataset(cfg))
    start = time.perf_counter()
    res = T.train(cfg, train_ds)
    wall = time.perf_counter() - start
    ckpt.save(os.path.join(run_dir, CHECKPOINT_NAME), res.model, res.loss_config, res.centroids, cfg.seed,
              extra={"method": cfg.method})
    last = res.log[-1] if res.log else {}
    update_report(run_dir, "train", {"method": cfg.method, "seed": cfg.seed, "train_size": len(train_ds),
                                     "test_size": len(test_ds), "final_epoch": last, "hinges": res.final,
                                     "wall_time_s": wall})
    return res


def cmd_train(args):
    res = do_train(C.load(args.config), args.run_dir)
    print(f"trained; final hinges {res.final}")
    return EXIT_OK


def do_eval(run_dir, cfg=None):
    cfg = cfg or run_config(run_dir)
    model, _, _, doc = load_checkpoint(run_dir)
    test = test_split(cfg)
    start = time.perf_counter()
    records = E.evaluate(model, test, cfg.evals, cfg["eval.repeats"], cfg.seed,
                         run_id=os.path.basename(os.path.normpath(run_dir)), method=cfg.method,
                         clamp=(0.0, 1.0) if cfg["eval.clamp"] else None)
    _write(os.path.join(run_dir, METRICS_NAME), E.metrics_csv(records))
    summary = E.summarize(records)
    update_report(run_dir, "eval", {"summary": summary, "wall_time_s": time.perf_counter() - start})
    return summary


def cmd_eval(args):
    for row in do_eval(args.run_dir, run_config(args.run_dir, args.config)):
        print(f"{row['perturbation']:<40} {row['mean']:.4f} +- {row['std']:.4f}")
    return EXIT_OK


def do_curvature(run_dir, cfg=None, limit=None):
    cfg = cfg or run_config(run_dir)
    model, _, _, _ = load_checkpoint(run_dir)
    test = test_split(cfg)
    if limit:
        test = test.subset(np.arange(min(limit, len(test))))
    start = time.perf_counter()
    rows, summary = E.curvature_report(model, test, cfg["curvature.sigma"], cfg["curvature.repeats"],
                                       cfg["curvature.t"], cfg["curvature.K"], cfg.seed,
                                       exact=cfg["curvature.exact"])
    _write(os.path.join(run_dir, CURVATURE_NAME), E.curvature_csv(rows))
    update_report(run_dir, "curvature", {**summary, "wall_time_s": time.perf_counter() - start})
    return summary


def cmd_curvature(args):
    s = do_curvature(args.run_dir, run_config(args.run_dir, args.config), args.limit)
    flag = "" if s["pearson_defined"] else " (undefined: constant input)"
    print(f"median low-90% curvature {s['low90']['median']:.6g}; pearson {s['pearson']}{flag}")
    return EXIT_OK


def cmd_verify(args):
    report = V.run_suite(args.suite, args.seed)
    text = json.dumps(_jsonable(report), indent=1)
    if args.json:
        _write(args.json, text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def do_transform(run_dir, nu, out=None, cfg=None):
    if not nu > 0:
        raise UsageError("nu must be positive")
    cfg = cfg or run_config(run_dir)
    model, lc, cents, doc = load_checkpoint(run_dir)
    test = test_split(cfg)
    new, rep = V.transform_report(model, test.flat(), test.labels, nu)
    scaled = {c: nu * v for c, v in cents.items()}
    out = out or os.path.join(run_dir, f"checkpoint_nu{nu:g}.json")
    ckpt.save(out, new, lc, scaled, doc.get("seed", 0), extra={**doc.get("extra", {}), "transform_nu": nu})
    update_report(run_dir, f"transform_nu{nu:g}", {**rep, "checkpoint": os.path.basename(out)})
    return rep


def cmd_transform(args):
    rep = do_transform(args.run_dir, args.nu, args.out, run_config(args.run_dir, args.config))
    print(json.dumps(_jsonable(rep), indent=1))
    return EXIT_OK if rep["agreement"] == 1.0 else EXIT_FAIL


# ------------------------------------------------------------------- parsing

def build_parser():
    p = argparse.ArgumentParser(prog="noisecurve", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also export a CSV copy")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one method into a run directory")
    t.add_argument("--config", required=True)
    t.add_argument("--run-dir", required=True)
    t.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "accuracy under the configured perturbations"),
                          ("curvature", cmd_curvature, "per-sample input loss curvature report")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--config", help="config file (default: the run's config.txt)")
        if name == "curvature":
            s.add_argument("--limit", type=int, help="only the first N test samples")
        s.set_defaults(fn=fn)

    v = sub.add_parser("verify", help="run a numeric verification suite")
    v.add_argument("suite", choices=V.SUITES)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", help="also write the report here")
    v.set_defaults(fn=cmd_verify)

    x = sub.add_parser("transform", help="apply the prediction-preserving rescaling")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--nu", type=float, required=True)
    x.add_argument("--out", help="output checkpoint path")
    x.add_argument("--config")
    x.set_defaults(fn=cmd_transform)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "verify" and os.environ.get(C.SEED_ENV):
            args.seed = int(os.environ[C.SEED_ENV])
        return args.fn(args)
    except (UsageError, C.ConfigError, ckpt.CheckpointError, D.DataFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

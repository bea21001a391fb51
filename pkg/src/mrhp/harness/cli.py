"""Command-line front end: generate, train, eval, gradcheck, sigtest, distances, ablation.

Exit codes: 0 success, 1 validation error (bad flags, config, data or
checkpoint; failed gradient check), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from ..config import ConfigError, TrainConfig
from ..dataset import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from .checkpoint import Checkpoint, CheckpointError
from .metrics import paired_bootstrap

log = logging.getLogger("mrhp")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SIG_METRICS = ("AP", "NDCG@3", "NDCG@5")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our code 1 instead
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _setup_logging() -> None:
    name = os.environ.get("MRHP_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"MRHP_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    root = logging.getLogger("mrhp")
    root.setLevel(LOG_LEVELS[name])
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(args, *names) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {' '.join(missing)}")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _sidecar(path) -> Path:
    return Path(f"{path}.report.json")


def _metric_table(rows: Sequence[tuple[str, dict]]) -> str:
    lines = [f"{'':<12} {'MAP':>7} {'NDCG@3':>7} {'NDCG@5':>7}"]
    for name, r in rows:
        lines.append(f"{name:<12} {r['MAP']:7.4f} {r['NDCG@3']:7.4f} {r['NDCG@5']:7.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    _require(args, "out")
    spec = SyntheticSpec.from_json(args.config) if args.config else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    ds = generate_synthetic(spec)
    write_dataset(args.out, ds)
    report = {"spec": dataclasses.asdict(spec), "n_products": len(ds.products),
              "n_reviews": sum(len(p.reviews) for p in ds.products),
              "label_counts": {str(k): sum(r.label == k for p in ds.products for r in p.reviews)
                               for k in range(5)}}
    _write_json(_sidecar(args.out), report)
    print(f"wrote {report['n_products']} products / {report['n_reviews']} reviews to {args.out}")
    print("label  count")
    for k, v in report["label_counts"].items():
        print(f"{k:>5}  {v:>5}")
    return 0


def cmd_train(args) -> int:
    from .evaluation import evaluate
    from .training import split_dataset, train

    _require(args, "data", "out")
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    train_ds, test_ds = split_dataset(ds, cfg.test_fraction, cfg.seed)
    result = train(cfg, train_ds)
    result.checkpoint.save(args.out)
    report = {"config": cfg.to_dict(), "history": result.history_dicts(),
              "n_train_products": len(train_ds.products), "n_test_products": len(test_ds.products)}
    if test_ds.products:
        ev = evaluate(result.model, test_ds, cfg.tau).to_json()
        report["test"] = {k: ev[k] for k in ("MAP", "NDCG@3", "NDCG@5", "n_products", "n_map_products")}
    _write_json(_sidecar(args.out), report)
    print(f"{'epoch':>5} {'ranking':>10} {'contrastive':>12} {'total':>10}")
    for h in result.history:
        print(f"{h.epoch:>5} {h.ranking:10.4f} {h.contrastive:12.4f} {h.total:10.4f}")
    if "test" in report:
        print(_metric_table([("test", report["test"])]))
    print(f"checkpoint: {args.out}")
    return 0


def _eval_split(ckpt: Checkpoint, ds, split: str):
    from .training import split_dataset

    if split == "all":
        return ds
    _, test_ds = split_dataset(ds, ckpt.config.test_fraction, ckpt.config.seed)
    if not test_ds.products:
        raise ConfigError("the test split is empty; use --split all")
    return test_ds


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    _require(args, "checkpoint", "data")
    opts = _read_json(args.config) if args.config else {}
    gain = opts.get("gain", "exp")
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _eval_split(ckpt, load_dataset(args.data), opts.get("split", args.split))
    report = evaluate(ckpt, ds, int(opts.get("tau", ckpt.config.tau)), gain).to_json()
    if args.out:
        _write_json(args.out, report)
    print(f"tau={report['tau']} gain={report['gain']} products={report['n_products']} "
          f"(MAP over {report['n_map_products']})")
    print(_metric_table([("model", report)]))
    return 0


def cmd_gradcheck(args) -> int:
    from ..gradcheck import end_to_end_check, run_op_suite

    opts = _read_json(args.config) if args.config else {}
    n_points = int(opts.get("n_points", 100))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    op_tol = float(opts.get("op_tolerance", 1e-4))
    e2e_tol = float(opts.get("end_to_end_tolerance", 1e-3))
    ops = run_op_suite(n_points, seed)
    e2e = end_to_end_check(seed)
    failed = sorted(k for k, v in ops.items() if not v <= op_tol)
    ok = not failed and e2e <= e2e_tol
    report = {"n_points": n_points, "seed": seed, "op_tolerance": op_tol, "end_to_end_tolerance": e2e_tol,
              "ops": ops, "end_to_end": e2e, "failed": failed + ([] if e2e <= e2e_tol else ["end_to_end"]),
              "passed": ok}
    if args.out:
        _write_json(args.out, report)
    print(f"{'op':<16} {'max rel err':>12}  status")
    for k, v in ops.items():
        print(f"{k:<16} {v:12.3e}  {'ok' if v <= op_tol else 'FAIL'}")
    print(f"{'end_to_end':<16} {e2e:12.3e}  {'ok' if e2e <= e2e_tol else 'FAIL'}")
    return 0 if ok else 1


def _per_product(report: dict, metric: str) -> dict[str, float]:
    if "per_product" not in report:
        raise ConfigError("sigtest inputs must be eval reports with per-product metrics")
    return {pid: v[metric] for pid, v in report["per_product"].items() if metric in v}


def cmd_sigtest(args) -> int:
    opts = _read_json(args.config) if args.config else {}
    paths = args.reports or [opts.get("report_a"), opts.get("report_b")]
    if len(paths) != 2 or None in paths:
        raise UsageError("sigtest needs two eval reports (positional or report_a/report_b in --config)")
    metric = opts.get("metric", args.metric)
    if metric not in SIG_METRICS:
        raise ConfigError(f"metric must be one of {SIG_METRICS}, got {metric!r}")
    n_resamples = int(opts.get("n_resamples", args.n_resamples))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    a, b = (_per_product(_read_json(p), metric) for p in paths)
    common = sorted(set(a) & set(b))
    if set(a) != set(b):
        log.warning("reports cover different products; using the %d in common", len(common))
    p = paired_bootstrap([a[k] for k in common], [b[k] for k in common], n_resamples, seed)
    diff = sum(a[k] - b[k] for k in common) / max(len(common), 1)
    report = {"test": "paired bootstrap over products (stand-in: no test was specified for the original "
                      "comparison)", "metric": metric, "n_products": len(common), "n_resamples": n_resamples,
              "seed": seed, "mean_a": sum(a[k] for k in common) / max(len(common), 1),
              "mean_b": sum(b[k] for k in common) / max(len(common), 1), "mean_diff": diff, "p_value": p,
              "report_a": str(paths[0]), "report_b": str(paths[1])}
    if args.out:
        _write_json(args.out, report)
    print(f"{metric}: a={report['mean_a']:.4f} b={report['mean_b']:.4f} diff={diff:+.4f} "
          f"p={p:.4g} (paired bootstrap, {n_resamples} resamples, {len(common)} products)")
    return 0


def cmd_distances(args) -> int:
    from .evaluation import distance_analysis

    _require(args, "checkpoint", "data")
    opts = _read_json(args.config) if args.config else {}
    groups = opts.get("label_groups")
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _eval_split(ckpt, load_dataset(args.data), opts.get("split", args.split))
    report = distance_analysis(ckpt, ds, groups)
    if args.out:
        _write_json(args.out, report)
    print(f"{'group':<10} {'relation':<13} {'CS':>16} {'L2':>18}")
    for g, rels in report.items():
        for rel, v in rels.items():
            print(f"{g:<10} {rel:<13} {v['CS_mean']:7.4f} +- {v['CS_std']:6.4f} "
                  f"{v['L2_mean']:8.4f} +- {v['L2_std']:6.4f}")
    return 0


def cmd_ablation(args) -> int:
    from .benchmark import run_benchmark

    opts = _read_json(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(opts.get("train", {}))
    spec = SyntheticSpec.from_dict(opts.get("data", {}))
    seeds = opts.get("seeds", args.seeds)
    variants = opts.get("variants", ["full", "no-contrastive"])
    table = run_benchmark(cfg, spec, seeds, variants)
    if args.out:
        _write_json(args.out, table.to_json())
    print(table.format())
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "sigtest": cmd_sigtest, "distances": cmd_distances, "ablation": cmd_ablation}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrhp", description="Multimodal review helpfulness ranking toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--data", metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="INT")
    common.add_argument("--checkpoint", metavar="PATH")
    helps = {
        "generate": "write a synthetic dataset (config: synthetic spec JSON)",
        "train": "train on --data, save checkpoint to --out (config: train config JSON)",
        "eval": "MAP / NDCG@3 / NDCG@5 of --checkpoint on --data",
        "gradcheck": "finite-difference check of every op and of the full loss",
        "sigtest": "paired bootstrap between two eval reports",
        "distances": "token-level CS / L2 between modality features per label group",
        "ablation": "train full and no-contrastive variants over seeds; emit comparison table",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=h, description=h) for name, h in helps.items()}
    for name in ("eval", "distances"):
        subs[name].add_argument("--split", choices=("test", "all"), default="test",
                                help="evaluate on the checkpoint's held-out products or all of --data")
    subs["sigtest"].add_argument("reports", nargs="*", metavar="REPORT")
    subs["sigtest"].add_argument("--metric", default="AP", choices=SIG_METRICS)
    subs["sigtest"].add_argument("--n-resamples", type=int, default=10000)
    subs["ablation"].add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nmrhp: error: a subcommand is required")
        _setup_logging()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"mrhp: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error by contract
        log.debug("runtime failure", exc_info=True)
        print(f"mrhp: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mmal generate | run | aggregate | report``.

Exit codes: 0 success, 2 usage error, 3 missing or invalid data, 4 at least
one run failed (the other runs are still written).
"""

from __future__ import annotations

import argparse
import csv
import glob
import itertools
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from . import engine, evaluation
from .ingest import FormatError, load_cifar10, load_mnist, read_manifest, write_bundle
from .model import ModelConfig
from .ndnet import TrainRecipe
from .pitfalls import BUILDERS, ClassBijection, MissingnessPolicy, build_missing, build_share, build_synergy, build_unique
from .quintfeatures import ErosionConfig, GenConfig
from .query import known_strategies

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 2, 3, 4
DATA_ENV = "MMAL_DATA_DIR"

log = logging.getLogger("mmal")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def _resolve_dataset(path: str) -> str:
    p = Path(path)
    root = _data_root()
    if not p.exists() and not p.is_absolute() and root is not None and (root / p).exists():
        p = root / p
    if not (p / "manifest.json").exists():
        raise DataError(f"no dataset bundle at {path} (missing manifest.json)")
    return str(p)


# -------------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    sizes = {"train": args.n_train, "test": args.n_test}
    erosion = ErosionConfig(threshold=args.erosion_threshold)
    gen = GenConfig(canvas=args.canvas, erosion=erosion)
    if args.kind == "missing":
        bundle = build_missing(gen, MissingnessPolicy(tuple(args.p_missing)), sizes, args.seed)
    elif args.kind == "unique":
        bundle = build_unique(gen, sizes, args.seed)
    elif args.kind == "synergy":
        bundle = build_synergy(gen, sizes, args.seed)
    else:
        root = _data_root()
        mnist_dir = args.mnist_dir or (str(root / "mnist") if root else None)
        cifar_dir = args.cifar_dir or (str(root / "cifar-10-batches-bin") if root else None)
        if not mnist_dir or not cifar_dir:
            raise UsageError(f"generate share needs --mnist-dir and --cifar-dir (or {DATA_ENV})")
        try:
            mnist = {"train": load_mnist(mnist_dir, "train"), "test": load_mnist(mnist_dir, "test")}
            cifar = {"train": load_cifar10(cifar_dir, "train"), "test": load_cifar10(cifar_dir, "test")}
        except (OSError, FormatError) as exc:
            raise DataError(f"cannot read share sources: {exc}") from exc
        bij = ClassBijection.from_seed(args.bijection_seed) if args.bijection_seed is not None else ClassBijection.identity()
        try:
            bundle = build_share(mnist, cifar, bij, sizes, args.seed)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    out = write_bundle(bundle, args.out)
    man = bundle.manifest
    print(f"wrote {man['dataset_kind']} bundle to {out}")
    print(f"  classes={man['n_classes']} modalities={man['n_modalities']} "
          + " ".join(f"{k}={len(v)}" for k, v in bundle.partitions.items()))
    stats = man.get("missingness", {}).get("stats", {}).get("train")
    if stats:
        print("  train missing rate per modality: " + ", ".join(f"{r:.4f}" for r in stats["missing_rate"]))
    return EXIT_OK


# ------------------------------------------------------------------------- run

CONFIG_DEFAULTS = {
    "dataset": None,        # bundle directory, or a list of them
    "regime": "low",        # low | mid | high, a list, or {initial_budget, val_size, acq_size, iterations}
    "strategies": ["random"],
    "seeds": [0, 1, 2],
    "moddrop": False,       # bool or list of bools
    "desk": False,
    "model": {},            # ModelConfig overrides
    "recipe": {},           # TrainRecipe overrides (applied after the desk preset)
    "grid": None,           # {lr: [...], weight_decay: [...], augmentation: [...]}
    "side": 16,
    "pool_cap": None,
    "mc_passes": 10,
    "output": "runs",
    "jobs": 1,
}
_SIZE_KEYS = ("initial_budget", "val_size", "acq_size", "iterations")


def load_config(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping")
    unknown = set(raw) - set(CONFIG_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    _check_keys(raw.get("model") or {}, {f.name for f in fields(ModelConfig)} - {"input_dims", "n_classes"}, "model")
    _check_keys(raw.get("recipe") or {}, {f.name for f in fields(TrainRecipe)}, "recipe")
    _check_keys(raw.get("grid") or {}, set(engine.DEFAULT_GRID), "grid")
    if isinstance(raw.get("regime"), dict):
        _check_keys(raw["regime"], set(_SIZE_KEYS), "regime")
    return {**CONFIG_DEFAULTS, **raw}


def _check_keys(d, allowed: set, section: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"config section {section!r} must be a mapping")
    bad = set(d) - allowed
    if bad:
        raise UsageError(f"unknown keys in {section!r}: {', '.join(sorted(bad))}")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def build_configs(cfg: dict, sizes: dict | None = None) -> list[engine.RunConfig]:
    """Cross product datasets x regimes x strategies x moddrop x seeds; ``sizes`` override regime sizes."""
    if not cfg.get("dataset"):
        raise UsageError("no dataset given (--dataset or 'dataset' in the config)")
    strategies = _as_list(cfg["strategies"])
    valid = known_strategies()
    bad = [s for s in strategies if s not in valid]
    if bad:
        raise UsageError(f"unknown strategy {', '.join(bad)}; valid ids: {', '.join(valid)}")
    regimes = cfg["regime"]
    regimes = [regimes] if isinstance(regimes, dict) else _as_list(regimes)
    for r in regimes:
        if not isinstance(r, dict) and r not in engine.REGIMES:
            raise UsageError(f"unknown regime {r!r}; expected one of {', '.join(engine.REGIMES)}")
    datasets = [_resolve_dataset(d) for d in _as_list(cfg["dataset"])]
    out = []
    for ds, reg, strat, md, seed in itertools.product(datasets, regimes, strategies,
                                                      _as_list(cfg["moddrop"]), _as_list(cfg["seeds"])):
        explicit = {**(dict(reg) if isinstance(reg, dict) else {}), **(sizes or {})}
        out.append(engine.RunConfig(
            dataset=ds, strategy=strat, seed=int(seed), regime=None if isinstance(reg, dict) else reg,
            moddrop=bool(md), desk=bool(cfg["desk"]), recipe=dict(cfg["recipe"] or {}),
            model=dict(cfg["model"] or {}), grid=cfg["grid"], side=int(cfg["side"]),
            pool_cap=cfg["pool_cap"], mc_passes=int(cfg["mc_passes"]), out_dir=str(cfg["output"]), **explicit))
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else dict(CONFIG_DEFAULTS)
    if args.dataset:
        cfg["dataset"] = args.dataset
    if args.strategy:
        cfg["strategies"] = [s for item in args.strategy for s in item.split(",") if s]
    if args.seeds:
        cfg["seeds"] = args.seeds
    if args.regime:
        cfg["regime"] = args.regime
    if args.moddrop:
        cfg["moddrop"] = True
    if args.desk:
        cfg["desk"] = True
    if args.out:
        cfg["output"] = args.out
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    sizes = {k: getattr(args, k) for k in _SIZE_KEYS if getattr(args, k) is not None}
    if args.epochs is not None:
        cfg["recipe"] = {**(cfg["recipe"] or {}), "epochs": args.epochs}
    configs = build_configs(cfg, sizes)
    for c in configs:
        try:
            engine.resolve(c, read_manifest(c.dataset))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    records = engine.run_matrix(configs, jobs=int(cfg["jobs"]), show_progress=not args.quiet)
    failed = [r for r in records if r.status == "failed"]
    for r in records:
        line = f"done run={r.run_id} status={r.status}"
        if r.error:
            line += f" error={r.error}"
        print(line, flush=True)
    if failed:
        print(f"{len(failed)} of {len(records)} runs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ------------------------------------------------------------------- aggregate

AULC_FIELDS = ["dataset", "regime", "strategy", "subset", "mean", "std", "n", "scale", "display"]
RANK_FIELDS = ["regime", "strategy", "rank_sum"]
CURVE_FIELDS = ["dataset", "regime", "strategy", "subset", "iteration", "mean", "std", "n"]


def _find_records(patterns: list[str]) -> list[Path]:
    found = set()
    for pat in patterns:
        for hit in glob.glob(pat, recursive=True):
            p = Path(hit)
            if p.is_dir():
                found.update(p.glob("**/record.jsonl"))
            elif p.name.endswith(".jsonl"):
                found.add(p)
    return sorted(found)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_aggregate(args) -> int:
    files = _find_records(args.runs)
    if not files:
        raise DataError(f"no run records match {' '.join(args.runs)}")
    summaries = []
    for f in files:
        s = engine.summary_of(f)
        if s is None or "aulc" not in s:
            print(f"skipping {f}: no completed summary", file=sys.stderr)
            continue
        summaries.append(s)
    if not summaries:
        raise DataError("none of the matched runs has results")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = evaluation.aggregate(summaries)
    _write_csv(out / "aulc.csv", AULC_FIELDS, [
        {"dataset": c.dataset, "regime": c.regime, "strategy": c.strategy, "subset": c.subset,
         "mean": _fmt(c.mean), "std": _fmt(c.std), "n": c.n, "scale": c.scale, "display": c.display()}
        for c in cells])
    weak = {s["dataset"]: s.get("weak_subset") for s in summaries}
    rank_rows = []
    try:
        ranks = evaluation.rank_summary([c for c in cells if weak.get(c.dataset)], lambda d: weak[d])
        for regime in sorted(ranks):
            for strat, total in sorted(ranks[regime].items(), key=lambda kv: (kv[1], kv[0])):
                rank_rows.append({"regime": regime, "strategy": strat, "rank_sum": _fmt(total)})
    except ValueError as exc:
        print(f"rank table skipped: {exc}", file=sys.stderr)
    _write_csv(out / "ranks.csv", RANK_FIELDS, rank_rows)
    curves = evaluation.curve_table(summaries)
    _write_csv(out / "curves.csv", CURVE_FIELDS,
               [{**r, "mean": _fmt(r["mean"]), "std": _fmt(r["std"])} for r in curves])
    names = {s["dataset"]: s.get("subset_names", {}) for s in sorted(summaries, key=lambda s: s["run_id"])}
    (out / "subsets.json").write_text(json.dumps(names, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"aggregated {len(summaries)} runs into {len(cells)} cells -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- report

def cmd_report(args) -> int:
    from .plotting import plot_curves

    tables = Path(args.tables)
    curves_csv = tables / "curves.csv"
    if not curves_csv.exists():
        raise DataError(f"no curves.csv in {tables}; run 'mmal aggregate' first")
    with open(curves_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{curves_csv} has no rows")
    names_file = tables / "subsets.json"
    names = json.loads(names_file.read_text(encoding="utf-8")) if names_file.exists() else {}
    out = Path(args.out)
    paths = plot_curves(rows, out, names)
    if (out / "curves.csv").resolve() != curves_csv.resolve():
        (out / "curves.csv").write_bytes(curves_csv.read_bytes())
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="mmal", description="Multimodal active-learning benchmark.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="build a dataset bundle", formatter_class=fmt)
    g.add_argument("kind", choices=BUILDERS)
    g.add_argument("--out", required=True, help="output bundle directory")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")
    g.add_argument("--n-train", type=int, default=10000, help="train partition size")
    g.add_argument("--n-test", type=int, default=2000, help="test partition size")
    g.add_argument("--canvas", type=int, default=64, help="QuintFeatures image side in pixels")
    g.add_argument("--erosion-threshold", type=float, default=ErosionConfig().threshold,
                   help="keep foreground pixels whose noise value is >= this")
    g.add_argument("--p-missing", type=float, nargs=2, default=[0.9, 0.1], metavar=("P_A", "P_B"),
                   help="per-modality missing probability (missing only)")
    g.add_argument("--mnist-dir", help=f"MNIST IDX directory (share only; default $%s/mnist)" % DATA_ENV)
    g.add_argument("--cifar-dir", help=f"CIFAR-10 binary directory (share only; default $%s/cifar-10-batches-bin)" % DATA_ENV)
    g.add_argument("--bijection-seed", type=int, default=None,
                   help="seed for the CIFAR class -> digit bijection (share only; default identity)")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run active-learning experiments", formatter_class=fmt)
    r.add_argument("--config", help="YAML config file; flags below override it")
    r.add_argument("--dataset", nargs="+", help=f"bundle directories (relative paths also tried under ${DATA_ENV})")
    r.add_argument("--strategy", action="append",
                   help=f"strategy id, repeatable or comma separated; one of {', '.join(known_strategies())}")
    r.add_argument("--seeds", type=int, nargs="+", help="run seeds (config default 0 1 2)")
    r.add_argument("--regime", choices=engine.REGIMES, help="label regime (config default low)")
    r.add_argument("--initial-budget", type=int, help="explicit initial labeled set size")
    r.add_argument("--val-size", type=int, help="explicit validation set size")
    r.add_argument("--acq-size", type=int, help="explicit acquisition batch size")
    r.add_argument("--iterations", type=int, help="explicit number of acquisition rounds")
    r.add_argument("--epochs", type=int, help="override training epochs")
    r.add_argument("--moddrop", action="store_true", help="train with modality dropout")
    r.add_argument("--desk", action="store_true",
                   help="desk preset: budgets / 10, 30 epochs, 16x16 inputs, pool capped at 5000")
    r.add_argument("--jobs", type=int, default=None, help="worker processes (config default 1)")
    r.add_argument("--out", help="runs output directory (config default runs)")
    r.add_argument("--quiet", action="store_true", help="suppress per-iteration progress lines")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("aggregate", help="summarise runs into CSV tables", formatter_class=fmt)
    a.add_argument("--runs", nargs="+", required=True, help="glob(s) of run directories or record.jsonl files")
    a.add_argument("--out", required=True, help="directory for aulc.csv, ranks.csv, curves.csv")
    a.set_defaults(fn=cmd_aggregate)

    rp = sub.add_parser("report", help="render learning-curve SVGs", formatter_class=fmt)
    rp.add_argument("--tables", required=True, help="directory written by 'aggregate'")
    rp.add_argument("--out", required=True, help="directory for the SVG figures")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mmal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, FileNotFoundError) as exc:
        print(f"mmal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

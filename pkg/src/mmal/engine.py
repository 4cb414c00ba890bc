"""Active-learning protocol: split, grid search, then train -> evaluate -> query -> label.

Each run writes ``<out>/<run_id>/config.json`` and streams
``<out>/<run_id>/record.jsonl`` (one JSON object per line, flushed as soon as
it is produced). Wall-clock timings go to ``timing.json`` so the record itself
is byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import query as q
from .evaluation import LearningCurve, aulc, subset_eval
from .ingest import read_bundle
from .model import FeatureSet, ModelConfig, MultimodalNet, grid_search, train_model
from .ndnet import LR_GRID, WD_GRID, NonFiniteError, TrainRecipe
from .seeding import mix_seed, rng_from

log = logging.getLogger(__name__)

REGIMES = ("low", "mid", "high")
ITERATIONS = 10
_REGIME_TABLE = {
    "missing": {"low": (50, 250, 50), "mid": (250, 1250, 250), "high": (1000, 5000, 1000)},
    "share": {"low": (50, 250, 50), "mid": (250, 1250, 250), "high": (1000, 5000, 1000)},
    "unique": {"low": (500, 2500, 500), "mid": (1000, 5000, 1000), "high": (5000, 5000, 5000)},
    "synergy": {"low": (500, 2500, 500), "mid": (1000, 5000, 1000), "high": (5000, 5000, 5000)},
}

DESK_DIVISOR = 10
DESK_EPOCHS = 30
DESK_WARMUP = 5
DESK_BATCH = 16
DESK_POOL_CAP = 5000
DEFAULT_GRID = {"lr": LR_GRID, "weight_decay": WD_GRID, "augmentation": ("none", "basic")}
# Desk models underfit in 30 epochs. Flips and crops hurt pixel-MLP encoders, and the
# strong decay stalls 100-class learning while the small initial set leaves the grid
# blind to it (every point scores at chance), so the desk preset searches neither.
DESK_GRID = {"lr": LR_GRID, "weight_decay": (min(WD_GRID),), "augmentation": ("none",)}


def regime_defaults(dataset_kind: str, regime: str) -> dict:
    if dataset_kind not in _REGIME_TABLE:
        raise ValueError(f"unknown dataset kind {dataset_kind!r}")
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    init, val, acq = _REGIME_TABLE[dataset_kind][regime]
    return {"initial_budget": init, "val_size": val, "acq_size": acq, "iterations": ITERATIONS}


@dataclass
class RunConfig:
    dataset: str
    strategy: str
    seed: int = 0
    regime: str | None = "low"
    initial_budget: int | None = None
    val_size: int | None = None
    acq_size: int | None = None
    iterations: int | None = None
    moddrop: bool = False
    desk: bool = False
    recipe: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    grid: dict | None = None
    side: int = 16
    pool_cap: int | None = None
    mc_passes: int = 10
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ResolvedRun:
    """Everything a run needs, fully determined by the RunConfig and the bundle manifest."""

    run_id: str
    dataset_kind: str
    n_classes: int
    n_modalities: int
    initial_budget: int
    val_size: int
    acq_size: int
    iterations: int
    recipe: TrainRecipe
    grid: dict
    pool_cap: int | None
    partial_subsets: list
    weak_subset: str | None
    subset_names: dict

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["recipe"] = dataclasses.asdict(self.recipe)
        d["grid"] = {k: list(v) for k, v in self.grid.items()}
        return d


def run_id_for(cfg: RunConfig, dataset_kind: str) -> str:
    tag = cfg.regime if cfg.regime else "custom"
    strat = cfg.strategy + ("+moddrop" if cfg.moddrop else "")
    return f"{dataset_kind}-{tag}-{strat}-s{cfg.seed}"


def resolve(cfg: RunConfig, manifest: dict) -> ResolvedRun:
    kind = manifest["dataset_kind"]
    k = int(manifest["n_classes"])
    if cfg.strategy not in q.known_strategies():
        raise ValueError(f"unknown strategy {cfg.strategy!r}; valid: {', '.join(q.known_strategies())}")
    sizes = regime_defaults(kind, cfg.regime) if cfg.regime else {}
    if cfg.desk and sizes:
        # the desk preset shrinks the regime table; explicit sizes below are taken as given
        for key in ("initial_budget", "val_size", "acq_size"):
            sizes[key] = max(1, round(sizes[key] / DESK_DIVISOR))
        sizes["initial_budget"] = max(sizes["initial_budget"], k)
    for key in ("initial_budget", "val_size", "acq_size", "iterations"):
        v = getattr(cfg, key)
        if v is not None:
            sizes[key] = int(v)
        elif key not in sizes:
            raise ValueError(f"{key} must be given when no regime is selected")
    recipe_kw = {}
    pool_cap = cfg.pool_cap
    if cfg.desk:
        recipe_kw = {"epochs": DESK_EPOCHS, "warmup_epochs": DESK_WARMUP, "batch_size": DESK_BATCH}
        pool_cap = DESK_POOL_CAP if pool_cap is None else pool_cap
    recipe_kw.update(cfg.recipe)
    recipe = TrainRecipe().with_(**recipe_kw)
    if sizes["initial_budget"] < k:
        raise ValueError(f"initial budget {sizes['initial_budget']} below the number of classes {k}")
    if sizes["iterations"] < 1 or sizes["acq_size"] < 1:
        raise ValueError("iterations and acq_size must be >= 1")
    if cfg.grid is not None:
        grid_src = cfg.grid
    else:
        grid_src = DESK_GRID if cfg.desk else DEFAULT_GRID
    grid = {key: tuple(v) for key, v in grid_src.items()}
    if set(grid) - set(DEFAULT_GRID):
        raise ValueError(f"unknown grid keys: {sorted(set(grid) - set(DEFAULT_GRID))}")
    return ResolvedRun(
        run_id=run_id_for(cfg, kind), dataset_kind=kind, n_classes=k,
        n_modalities=int(manifest["n_modalities"]), recipe=recipe, grid=grid, pool_cap=pool_cap,
        partial_subsets=list(manifest.get("partial_subsets", [])), weak_subset=manifest.get("weak_subset"),
        subset_names=dict(manifest.get("subset_names", {})), **sizes,
    )


# --------------------------------------------------------------------- seeds

def split_seed(seed: int) -> int:
    return mix_seed(seed, "split")


def init_seed(seed: int, iteration: int) -> int:
    return mix_seed(seed, "init", iteration)


def strategy_seed(seed: int, iteration: int) -> int:
    return mix_seed(seed, "query", iteration)


def grid_seed(seed: int) -> int:
    return mix_seed(seed, "grid")


def split_indices(n_train: int, initial_budget: int, val_size: int, seed: int,
                  pool_cap: int | None = None) -> tuple[list[int], list[int], list[int]]:
    """Validation, initial labeled and unlabeled pool positions within the train partition."""
    if initial_budget + val_size > n_train:
        raise ValueError(f"initial budget {initial_budget} + val {val_size} exceeds {n_train} train samples")
    perm = rng_from(split_seed(seed)).permutation(n_train)
    val = perm[:val_size]
    initial = perm[val_size:val_size + initial_budget]
    pool = perm[val_size + initial_budget:]
    if pool_cap is not None:
        pool = pool[:pool_cap]
    return [int(i) for i in val], [int(i) for i in initial], [int(i) for i in pool]


# ------------------------------------------------------------------- querying

@dataclass
class QueryContext:
    model: MultimodalNet
    pool: FeatureSet
    labeled: FeatureSet
    B: int
    rng: np.random.Generator
    mc_passes: int = 10


def run_query(strategy: str, ctx: QueryContext) -> q.Acquisition:
    """Dispatch a strategy; returned indices are positions into ``ctx.pool``."""
    if strategy == "random":
        return q.select_random(len(ctx.pool), ctx.B, ctx.rng)
    if strategy == "entropy":
        return q.select_entropy(ctx.model.predict_proba(ctx.pool), ctx.B)
    if strategy == "bald":
        return q.select_bald(ctx.model.mc_predict(ctx.pool, ctx.mc_passes, ctx.rng), ctx.B)
    if strategy == "kcg":
        return q.select_kcg(ctx.model.features(ctx.labeled), ctx.model.features(ctx.pool), ctx.B)
    if strategy == "badge":
        return q.select_badge(ctx.model.badge_embedding(ctx.pool)[0], ctx.B, ctx.rng)
    if strategy == "bmmal-interp":
        _, pool_blocks = ctx.model.badge_embedding(ctx.pool)
        _, lab_blocks = ctx.model.badge_embedding(ctx.labeled)
        return q.select_bmmal(pool_blocks, lab_blocks, ctx.B, ctx.rng)
    fn = q.plugin(strategy)
    if fn is None:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(q.known_strategies())}")
    return fn(ctx)


# ------------------------------------------------------------------------ runs

@dataclass
class RunRecord:
    run_id: str
    status: str
    path: Path | None
    config: dict = field(default_factory=dict)
    chosen: dict = field(default_factory=dict)
    iterations: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    error: str | None = None


@lru_cache(maxsize=4)
def _load_features(path: str, side: int):
    bundle = read_bundle(path)
    return (bundle.manifest, FeatureSet.from_partition(bundle.partitions["train"], side),
            FeatureSet.from_partition(bundle.partitions["test"], side))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _json_float(v: float) -> float | None:
    return float(v) if np.isfinite(v) else None


ProgressFn = Callable[[str, int, str, float], None]


def print_progress(run_id: str, iteration: int, subset: str, bacc: float) -> None:
    print(f"run={run_id} iter={iteration} subset={subset} bacc={bacc:.4f}", flush=True)


def run_experiment(cfg: RunConfig, progress: ProgressFn | None = None) -> RunRecord:
    t_start = time.perf_counter()
    timing: dict = {"load": 0.0, "grid": 0.0, "train": [], "eval": [], "query": []}
    t = time.perf_counter()
    manifest, train, test = _load_features(str(Path(cfg.dataset).resolve()), cfg.side)
    timing["load"] = time.perf_counter() - t
    res = resolve(cfg, manifest)
    run_dir = Path(cfg.out_dir) / res.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"run": cfg.to_dict(), "resolved": res.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    record = RunRecord(res.run_id, "running", run_dir / "record.jsonl", config=res.to_dict())
    model_cfg = ModelConfig(input_dims=tuple(x.shape[1] for x in train.xs), n_classes=res.n_classes,
                            **{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.model.items()})
    val_idx, init_idx, pool_idx = split_indices(len(train), res.initial_budget, res.val_size, cfg.seed,
                                                res.pool_cap)
    state = q.PoolState(labeled=list(init_idx), unlabeled=list(pool_idx))
    val = train.subset(val_idx)
    curves: dict[str, list[float]] = {}

    with open(record.path, "w", encoding="utf-8") as fh:
        def emit(obj):
            fh.write(_dumps(obj) + "\n")
            fh.flush()

        emit({"type": "run", "run_id": res.run_id, "dataset": res.dataset_kind, "strategy": cfg.strategy,
              "moddrop": cfg.moddrop, "seed": cfg.seed, "regime": cfg.regime or "custom",
              "resolved": res.to_dict(), "split": {"val": len(val_idx), "initial": len(init_idx),
                                                   "pool": len(pool_idx)}})

        def finish(status: str, error: str | None = None):
            summary = {"type": "summary", "run_id": res.run_id, "status": status,
                       "dataset": res.dataset_kind, "regime": cfg.regime or "custom",
                       "strategy": cfg.strategy, "moddrop": cfg.moddrop, "seed": cfg.seed,
                       "partial_subsets": res.partial_subsets, "weak_subset": res.weak_subset,
                       "subset_names": res.subset_names,
                       "iterations_completed": len(record.iterations)}
            if error:
                summary["error"] = error
            if record.iterations:
                summary["curves"] = curves
                summary["aulc"] = {s: aulc(LearningCurve.from_evaluations(s, v)) for s, v in curves.items()}
            emit(summary)
            record.status, record.error = status, error

        try:
            t = time.perf_counter()
            grid = grid_search(train.subset(init_idx), val, res.grid, res.recipe, model_cfg,
                               grid_seed(cfg.seed), cfg.moddrop)
            timing["grid"] = time.perf_counter() - t
            chosen = {"lr": grid.base_lr, "weight_decay": grid.weight_decay, "augmentation": grid.augmentation}
            record.chosen = chosen
            emit({"type": "grid", "chosen": chosen,
                  "trials": grid.trials})
            recipe = grid.recipe(res.recipe)
            status = "ok"
            for it in range(res.iterations + 1):
                labeled = train.subset(state.labeled)
                t = time.perf_counter()
                result = train_model(labeled, val, recipe, model_cfg, init_seed(cfg.seed, it), cfg.moddrop)
                timing["train"].append(time.perf_counter() - t)
                t = time.perf_counter()
                scores = subset_eval(result.model, test, res.n_modalities)
                timing["eval"].append(time.perf_counter() - t)
                for s, v in scores.items():
                    curves.setdefault(s, []).append(v)
                    if progress:
                        progress(res.run_id, it, s, v)
                entry = {"type": "iteration", "iteration": it, "labeled_size": len(state.labeled),
                         "best_epoch": result.best_epoch, "val_bacc": _json_float(result.best_val),
                         "bacc": scores}
                if it < res.iterations:
                    if not state.unlabeled:
                        emit(entry)
                        record.iterations.append(entry)
                        status = "truncated"
                        break
                    pool = train.subset(state.unlabeled)
                    ctx = QueryContext(result.model, pool, labeled, res.acq_size,
                                       rng_from(strategy_seed(cfg.seed, it)), cfg.mc_passes)
                    t = time.perf_counter()
                    acq = run_query(cfg.strategy, ctx)
                    timing["query"].append(time.perf_counter() - t)
                    picked = [state.unlabeled[i] for i in acq.indices]
                    state.acquire(picked)
                    entry["acquired"] = picked
                    entry["diagnostics"] = acq.diagnostics
                emit(entry)
                record.iterations.append(entry)
            finish(status)
        except NonFiniteError as exc:
            finish("failed", f"non-finite value: {exc}")
        except Exception as exc:  # keep a parseable record for anything else too
            log.exception("run %s failed", res.run_id)
            finish("failed", f"{type(exc).__name__}: {exc}")

    timing["total"] = time.perf_counter() - t_start
    record.timing = timing
    (run_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return record


def _run_isolated(cfg: RunConfig, show_progress: bool) -> RunRecord:
    try:
        return run_experiment(cfg, print_progress if show_progress else None)
    except Exception as exc:
        log.error("run failed: %s", exc)
        return RunRecord(f"{cfg.strategy}-s{cfg.seed}", "failed", None, error=f"{type(exc).__name__}: {exc}")


def run_matrix(configs: list[RunConfig], jobs: int = 1, show_progress: bool = False) -> list[RunRecord]:
    """Run independent experiments, optionally in worker processes.

    Failures are isolated: a crashing run yields a ``failed`` record and the
    others proceed. Results come back in the order of ``configs``.
    """
    if jobs <= 1 or len(configs) <= 1:
        return [_run_isolated(c, show_progress) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_isolated, c, show_progress) for c in configs]
        return [f.result() for f in futures]


def read_records(path) -> list[dict]:
    """Parse a record.jsonl, ignoring a torn final line from an interrupted writer."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for i, line in enumerate(lines):
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise
    return out


def summary_of(path) -> dict | None:
    recs = read_records(path)
    return next((r for r in reversed(recs) if r.get("type") == "summary"), None)

"""Learning-curve figures: mean balanced accuracy per iteration with a +-1 std band."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LINESTYLES = ("-", "--", ":", "-.", (0, (5, 1)), (0, (3, 1, 1, 1)), (0, (1, 3)))

# fixed ids and no timestamp so re-rendering gives identical bytes
_RC = {"svg.hashsalt": "mmal", "svg.fonttype": "none", "path.simplify": False}


def _series(rows: list[dict]) -> dict[tuple[str, str, str, str], list[dict]]:
    out: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        out[(r["dataset"], r["regime"], r["strategy"], r["subset"])].append(r)
    for v in out.values():
        v.sort(key=lambda r: int(r["iteration"]))
    return out


def plot_curves(rows: list[dict], out_dir, subset_names: dict | None = None) -> list[Path]:
    """Write one SVG per (dataset, regime) from ``curve_table`` rows; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = _series(rows)
    groups = sorted({k[:2] for k in series})
    paths = []
    for dataset, regime in groups:
        keys = sorted(k for k in series if k[:2] == (dataset, regime))
        strategies = sorted({k[2] for k in keys})
        subsets = sorted({k[3] for k in keys}, key=lambda s: (len(s), s))
        cmap = plt.get_cmap("tab10")
        with plt.rc_context(_RC):
            fig, ax = plt.subplots(figsize=(7, 4.5))
            for dataset_, regime_, strat, subset in keys:
                pts = series[(dataset_, regime_, strat, subset)]
                x = [int(p["iteration"]) for p in pts]
                mean = [float(p["mean"]) for p in pts]
                std = [float(p["std"]) for p in pts]
                color = cmap(strategies.index(strat) % 10)
                style = LINESTYLES[subsets.index(subset) % len(LINESTYLES)]
                names = (subset_names or {}).get(dataset_, {})
                label = f"{strat} / {names.get(subset, subset)}"
                band = ax.fill_between(x, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)],
                                       color=color, alpha=0.15, linewidth=0)
                band.set_gid(f"band:{strat}:{subset}")
                (line,) = ax.plot(x, mean, color=color, linestyle=style, linewidth=1.5, label=label)
                line.set_gid(f"curve:{strat}:{subset}")
            ax.set_xlabel("AL iteration")
            ax.set_ylabel("balanced test accuracy")
            ax.set_title(f"{dataset} / {regime}")
            ax.set_ylim(0, 1)
            ax.grid(alpha=0.3)
            ax.legend(fontsize=7, ncol=max(1, len(subsets)), loc="upper left")
            fig.tight_layout()
            path = out_dir / f"{dataset}_{regime}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
        paths.append(path)
    return paths

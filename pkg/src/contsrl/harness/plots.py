"""Reward-curve figures: mean and standard-error band per cell, one panel per task."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from .. import rlpolicy as rl

logger = logging.getLogger(__name__)

CURVE_RE = re.compile(r"^curve_(?P<extractor>.+)-(?P<task>[^-_]+)_(?P<seed>\d+)\.csv$")


def find_curves(run_dir) -> dict[tuple[str, str], dict[int, Path]]:
    """Map (extractor, task) -> {seed: curve file} for every curve CSV under ``run_dir``."""
    cells: dict[tuple[str, str], dict[int, Path]] = defaultdict(dict)
    for p in sorted(Path(run_dir).rglob("curve_*.csv")):
        m = CURVE_RE.match(p.name)
        if m is None:
            logger.warning("skipping unrecognised curve file %s", p)
            continue
        cells[(m["extractor"], m["task"])][int(m["seed"])] = p
    return dict(cells)


def band(curves: list[rl.RewardCurve]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(timesteps, mean, stderr) over seeds, on the timesteps every seed logged."""
    common = curves[0].timesteps
    for c in curves[1:]:
        common = np.intersect1d(common, c.timesteps)
    ys = np.array([c.mean_return[np.searchsorted(c.timesteps, common)] for c in curves])
    mean = ys.mean(axis=0)
    stderr = ys.std(axis=0, ddof=1) / np.sqrt(len(curves)) if len(curves) > 1 else np.zeros_like(mean)
    return common, mean, stderr


def emit_plots(run_dir, out_name: str = "reward_curves.png", expected_seeds: int | None = None) -> list[Path]:
    """Write one figure with a panel per task. Returns the written paths (empty
    if there are no curves)."""
    cells = find_curves(run_dir)
    if not cells:
        logger.warning("no curve files under %s; nothing to plot", run_dir)
        return []
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = sorted({t for _, t in cells})
    fig, axes = plt.subplots(1, len(tasks), figsize=(5 * len(tasks), 3.6), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        for (extractor, t), seeds in sorted(cells.items()):
            if t != task:
                continue
            if expected_seeds is not None and len(seeds) < expected_seeds:
                logger.warning("%s/%s: only %d of %d seeds present", extractor, task, len(seeds), expected_seeds)
            curves = [rl.RewardCurve.read_csv(p) for _, p in sorted(seeds.items())]
            curves = [c for c in curves if len(c.timesteps)]
            if not curves:
                continue
            x, m, se = band(curves)
            ax.plot(x, m, label=f"{extractor} (n={len(curves)})")
            ax.fill_between(x, m - se, m + se, alpha=0.25)
        ax.set_title(task)
        ax.set_xlabel("timesteps")
        ax.set_ylabel("mean episode return")
        ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(run_dir) / out_name
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return [out]

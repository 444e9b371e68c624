"""CSV outputs and reconstruction evaluation.

Schemas (all UTF-8 with a header row):

- ``mse_matrix.csv``: stage, environment, mse
- ``detections.csv``: transition, t, nu, p, changed
- ``rl_table.csv``: extractor, task, mean, stderr
- ``curve_<cell>_<seed>.csv``: timesteps, mean_return
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import vae as vae_mod

MSE_HEADER = ("stage", "environment", "mse")
DETECTION_HEADER = ("transition", "t", "nu", "p", "changed")
RL_TABLE_HEADER = ("extractor", "task", "mean", "stderr")
CURVE_HEADER = ("timesteps", "mean_return")


def append_row(path, header, row) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow([_fmt(v) for v in row])


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def eval_mse(params, dataset: np.ndarray, n: int = 500, seed: int = 0,
             csv_path=None, stage: str = "", environment: str = "") -> float:
    """Reconstruction MSE on the first ``n`` states of a seeded shuffle."""
    if n > len(dataset):
        raise ValueError(f"n={n} exceeds dataset size {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))[:n]
    mse = vae_mod.recon_mse(params, dataset[order], n)
    if csv_path is not None:
        append_row(csv_path, MSE_HEADER, (stage, environment, mse))
    return mse

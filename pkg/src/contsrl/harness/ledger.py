"""Append-only record of dataset file access."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import flatland as fl


@dataclass(frozen=True)
class LedgerEntry:
    operation: str
    path: str
    stage: str


@dataclass
class IoLedger:
    path: Path | None = None
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, operation: str, path, stage: str) -> None:
        entry = LedgerEntry(operation, str(Path(path)), stage)
        self.entries.append(entry)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(["operation", "path", "stage"])
                w.writerow([entry.operation, entry.path, entry.stage])

    def read_dataset(self, path, stage: str) -> np.ndarray:
        self.record("read", path, stage)
        return fl.load_dataset(path)

    def write_dataset(self, path, states: np.ndarray, stage: str) -> None:
        fl.save_dataset(path, states)
        self.record("write", path, stage)

    def reads(self, stage: str | None = None) -> list[str]:
        return [e.path for e in self.entries
                if e.operation == "read" and (stage is None or e.stage == stage)]

    @classmethod
    def load(cls, path) -> "IoLedger":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(None, [LedgerEntry(r["operation"], r["path"], r["stage"]) for r in rows])

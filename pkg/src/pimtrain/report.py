"""Run reports and sweep tables: canonical hashing, JSON and CSV output.

Reports are written deterministically (sorted keys, fixed float repr) so a
repeated run from the same (config, seed) produces byte-identical files.
Wall-clock and other volatile facts go to a separate sidecar file, never
into the deterministic report.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__


def _canonical(obj):
    """JSON-stable form: sorted keys, tuples as lists, numpy unwrapped."""
    if isinstance(obj, dict):
        return {str(k): _canonical(obj[k]) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Stable under key reordering; first 12 hex chars of sha256."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:12]


@dataclass
class RunReport:
    """One experiment's structured record."""

    config: dict
    seed: int
    command: str = "train"
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "command": self.command,
            "settings": _canonical(self.settings),
            "epochs": _canonical(self.epochs),
            "final": _canonical(self.final),
        }

    def write(self, out_dir):
        """report.json (deterministic) + report.meta.json (timing sidecar)
        + epochs.csv; returns the report path."""
        import os
        os.makedirs(out_dir, exist_ok=True)
        rp = os.path.join(out_dir, "report.json")
        with open(rp, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")
        with open(os.path.join(out_dir, "report.meta.json"), "w") as f:
            json.dump({"wall_clock_s": self.wall_clock_s}, f)
            f.write("\n")
        if self.epochs:
            cols = sorted({k for e in self.epochs for k in e})
            with open(os.path.join(out_dir, "epochs.csv"), "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=cols)
                w.writeheader()
                for e in self.epochs:
                    w.writerow({k: e.get(k, "") for k in cols})
        return rp

    @staticmethod
    def load(path) -> dict:
        with open(path) as f:
            return json.load(f)


@dataclass
class SweepTable:
    """Dense grid of study results: named axes, one cell matrix, meta."""

    axes: dict                     # name -> list of axis values
    cells: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        want = 1
        for vals in self.axes.values():
            want *= len(vals)
        if int(np.prod(self.cells.shape)) != want:
            raise ValueError(
                f"cell count {self.cells.shape} != axes product {want}")

    def to_json(self) -> str:
        return canonical_json({
            "axes": self.axes,
            "cells": self.cells,
            "meta": self.meta,
        })

    def write(self, out_dir, name):
        import os
        os.makedirs(out_dir, exist_ok=True)
        jp = os.path.join(out_dir, f"{name}.json")
        with open(jp, "w") as f:
            f.write(self.to_json())
            f.write("\n")
        axis_names = list(self.axes)
        axis_vals = [self.axes[a] for a in axis_names]
        shape = tuple(len(v) for v in axis_vals)
        cells = self.cells.reshape(shape)
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(axis_names + ["value"])
            for idx in np.ndindex(shape):
                w.writerow([axis_vals[d][i] for d, i in enumerate(idx)]
                           + [repr(float(cells[idx]))])
        return jp

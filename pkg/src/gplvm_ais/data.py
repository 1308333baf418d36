"""Dataset ingestion, standardization, missing-data masks, checkpoints,
and the JSON-lines metric stream.

Checkpoints are a versioned JSON container with an explicit shape table
and shortest-round-trip float encoding, so save -> load -> save is
byte-identical and a resumed run reproduces the uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (CorruptCheckpoint, DegenerateColumn, NoMaskedEntries,
                     ParseError, RaggedRows, ShapeMismatch, ShapeTableMismatch,
                     VersionMismatch)
from .linalg import RngStream

CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    """Observations with an observation mask (1 = observed) and, once
    standardized, the per-column statistics needed to invert it."""

    X: np.ndarray
    labels: Optional[np.ndarray] = None
    mask: np.ndarray = None
    standardized: bool = False
    col_mean: Optional[np.ndarray] = None
    col_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones_like(self.X)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != self.X.shape:
            raise ShapeMismatch(
                f"mask {self.mask.shape} does not match data {self.X.shape}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def X_model(self, want_standardized: bool) -> np.ndarray:
        """Data in model units; standardizes on demand."""
        if not want_standardized:
            return self.X
        if self.standardized:
            return self.X
        return standardize(self).X

    def to_original_units(self, values: np.ndarray) -> np.ndarray:
        if not self.standardized:
            return values
        return values * self.col_scale + self.col_mean


def load_csv(path, has_header: bool = False,
             label_column: Optional[int] = None) -> Dataset:
    """Rectangular numeric CSV -> Dataset with a full-ones mask."""
    rows = []
    labels = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for i, raw in enumerate(reader):
            if has_header and i == 0:
                continue
            if not raw:
                continue
            if width is None:
                width = len(raw)
            elif len(raw) != width:
                raise RaggedRows(
                    f"row {i} has {len(raw)} cells, expected {width}")
            vals = []
            for j, tok in enumerate(raw):
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise ParseError(
                        f"row {i}, column {j}: cannot parse {tok.strip()!r}") from None
            if label_column is not None:
                lab = vals.pop(label_column)
                if not float(lab).is_integer():
                    raise ParseError(
                        f"row {i}, column {label_column}: label {lab!r} is not "
                        "an integer")
                labels.append(int(lab))
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    return Dataset(X=x, labels=np.asarray(labels, dtype=np.int64)
                   if label_column is not None else None)


def load_mask_csv(path, n: int, d: int, has_header: bool = False) -> np.ndarray:
    """Mask CSV with entries in {0, 1}, same shape as the data."""
    ds = load_csv(path, has_header=has_header)
    m = ds.X
    if m.shape != (n, d):
        raise ShapeMismatch(f"mask shape {m.shape} does not match data ({n}, {d})")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ParseError("mask entries must be 0 or 1")
    return m


def standardize(ds: Dataset) -> Dataset:
    """Observed entries of each column to mean 0, variance 1."""
    if ds.standardized:
        return ds
    x, mask = ds.X, ds.mask
    counts = mask.sum(axis=0)
    if np.any(counts < 2):
        bad = int(np.argmin(counts))
        raise DegenerateColumn(
            f"column {bad} has {int(counts[bad])} observed values; need >= 2")
    mean = (x * mask).sum(axis=0) / counts
    var = (((x - mean) ** 2) * mask).sum(axis=0) / counts
    if np.any(var <= 0):
        bad = int(np.argmin(var))
        raise DegenerateColumn(f"column {bad} has zero variance")
    scale = np.sqrt(var)
    return Dataset(X=(x - mean) / scale, labels=ds.labels, mask=mask.copy(),
                   standardized=True, col_mean=mean, col_scale=scale)


def apply_missing(ds: Dataset, row_fraction: float, pixel_fraction: float,
                  rng: RngStream) -> Dataset:
    """Mask ceil(row_fraction*N) rows, hiding ceil(pixel_fraction*D)
    entries in each; selection is seeded and reproducible."""
    if not (0.0 <= row_fraction <= 1.0 and 0.0 <= pixel_fraction <= 1.0):
        raise ValueError("fractions must lie in [0, 1]")
    mask = ds.mask.copy()
    n, d = ds.X.shape
    n_rows = math.ceil(row_fraction * n)
    n_pix = math.ceil(pixel_fraction * d)
    if n_rows and n_pix:
        rows = rng.choice_without_replacement(n, n_rows)
        for r in rows:
            cols = rng.choice_without_replacement(d, n_pix)
            mask[r, cols] = 0.0
    return Dataset(X=ds.X.copy(), labels=ds.labels, mask=mask,
                   standardized=ds.standardized, col_mean=ds.col_mean,
                   col_scale=ds.col_scale)


def masked_indices(ds: Dataset) -> np.ndarray:
    """(n_cells, 2) array of (row, col) for every hidden entry."""
    rows, cols = np.nonzero(ds.mask == 0.0)
    if rows.size == 0:
        raise NoMaskedEntries("dataset has no masked entries")
    return np.stack([rows, cols], axis=1)


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    meta: dict                      # config, iteration, rng_state, opt meta
    arrays: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = {
        "format_version": ckpt.format_version,
        "meta": ckpt.meta,
        "arrays": {
            name: {"shape": list(np.asarray(arr).shape),
                   "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(ckpt.arrays.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptCheckpoint(f"{path}: missing format_version")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    arrays = {}
    try:
        for name, entry in payload["arrays"].items():
            shape = tuple(entry["shape"])
            data = entry["data"]
            if int(np.prod(shape)) != len(data):
                raise ShapeTableMismatch(
                    f"array {name!r}: shape {shape} expects "
                    f"{int(np.prod(shape))} values, found {len(data)}")
            arrays[name] = np.asarray(data, dtype=np.float64).reshape(shape)
        meta = payload["meta"]
    except ShapeTableMismatch:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed payload ({exc})") from exc
    return Checkpoint(meta=meta, arrays=arrays,
                      format_version=payload["format_version"])


# ---------------------------------------------------------------------
# metric stream
# ---------------------------------------------------------------------

METRIC_FIELDS = ("iter", "neg_elbo", "mse", "nell", "wall_ms", "skipped_flag")


class MetricsWriter:
    """One JSON object per line with a fixed field order."""

    def __init__(self, target):
        """target: a path or an open text stream."""
        if hasattr(target, "write"):
            self._fh = target
            self._owns = False
        else:
            self._fh = open(target, "w")
            self._owns = True

    def write(self, record: dict) -> None:
        row = {k: record.get(k) for k in METRIC_FIELDS}
        self._fh.write(json.dumps(row) + "\n")

    def close(self) -> None:
        self._fh.flush()
        if self._owns:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

"""Seeded synthetic benchmark datasets.

Real benchmark files are not bundled; these generators produce stand-ins
with matching shapes (a clustered nonlinear manifold for the
dimensionality-reduction runs, low-rank data for missing-value recovery)
so the training and acceptance harnesses are self-contained.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import Dataset
from .linalg import RngStream


def make_manifold(n: int = 1000, d: int = 12, latent_dim: int = 2,
                  n_classes: int = 3, noise_sd: float = 0.1,
                  seed: int = 0) -> Dataset:
    """Clustered low-dimensional latents pushed through a random smooth
    nonlinear map; mirrors the shape of the 3-phase pipeline-flow data."""
    rng = RngStream(seed)
    centers = 2.5 * rng.normal_matrix(n_classes, latent_dim)
    labels = np.arange(n) % n_classes
    h = centers[labels] + 0.6 * rng.normal_matrix(n, latent_dim)
    w1 = rng.normal_matrix(latent_dim, 3 * d) / np.sqrt(latent_dim)
    b1 = rng.normal_matrix(1, 3 * d)
    w2 = rng.normal_matrix(3 * d, d) / np.sqrt(3 * d)
    x = np.tanh(h @ w1 + b1) @ w2
    x = x / x.std(axis=0, keepdims=True)
    x += noise_sd * rng.normal_matrix(n, d)
    return Dataset(X=x, labels=labels)


def make_lowrank(n: int = 200, d: int = 20, rank: int = 2,
                 noise_sd: float = 0.05, seed: int = 0) -> Dataset:
    """X = U V^T + noise; recoverable structure for imputation tests."""
    rng = RngStream(seed)
    u = rng.normal_matrix(n, rank)
    v = rng.normal_matrix(d, rank)
    x = u @ v.T + noise_sd * rng.normal_matrix(n, d)
    return Dataset(X=x)


def write_csv(path, ds: Dataset, with_labels: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]]
            if with_labels and ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            writer.writerow(row)

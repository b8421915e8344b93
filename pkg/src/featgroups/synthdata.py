"""Synthetic benchmark with known ground-truth feature groups.

Each feature of the multivariate series is an independent draw from a
Gaussian process with an RBF kernel and its own length scale and amplitude.
Labels come from the feature products of the first two ground-truth pairs:
per sample, the products are summed over time, thresholded at the dataset
median, and combined with a logical AND. The last feature pair never touches
the label, which is exactly what makes it a group of its own.

The static baselines flatten or average the series into one vector per
feature (label values appended) and run plain K-means on those vectors.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import (
    ClusterState,
    hard_membership,
    init_kmeanspp,
    kmeans_assign_and_update,
    kmeans_sse,
    score_points,
)
from .serialization import read_tensors, write_tensors

STATIC_MODES = ("flat", "time_mean", "sample_mean", "full_mean")

DATASET_SCHEMA = "featgroups-dataset-v1"


@dataclass
class GpSpec:
    """Generator settings; defaults reproduce the benchmark corpus."""

    features: int = 6
    length: int = 20
    samples: int = 10000
    length_scales: tuple = (1.0, 2.0, 4.0, 8.0, 1.0, 2.0)
    amplitudes: tuple = (0.5, 1.0, 3.5, 0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.length_scales = tuple(float(v) for v in self.length_scales)
        self.amplitudes = tuple(float(v) for v in self.amplitudes)
        if len(self.length_scales) != self.features or len(self.amplitudes) != self.features:
            raise ValueError("length_scales and amplitudes must list one value per feature")
        if any(v <= 0 for v in self.length_scales) or any(v <= 0 for v in self.amplitudes):
            raise ValueError("length scales and amplitudes must be positive")
        if self.features < 4:
            raise ValueError("labeling needs at least 4 features")


@dataclass
class LabeledDataset:
    series: np.ndarray  # (N, T, F)
    labels: np.ndarray  # (N,), 0/1
    thresholds: tuple  # (kappa_12, kappa_34)
    truth_groups: list = field(default_factory=lambda: [[0, 1], [2, 3], [4, 5]])
    spec: GpSpec | None = None

    @property
    def truth_labels(self) -> np.ndarray:
        out = np.empty(self.series.shape[2], dtype=np.int64)
        for gid, members in enumerate(self.truth_groups):
            out[members] = gid
        return out


def rbf_kernel(length: int, scale: float, amplitude: float) -> np.ndarray:
    grid = np.arange(length, dtype=np.float64)
    gaps = grid[:, None] - grid[None, :]
    return amplitude**2 * np.exp(-(gaps**2) / (2.0 * scale**2))


def sample_gp(spec: GpSpec) -> np.ndarray:
    """Draw (samples, length, features): independent GP paths per feature."""
    rng = np.random.default_rng(spec.seed)
    series = np.empty((spec.samples, spec.length, spec.features))
    for f in range(spec.features):
        kernel = rbf_kernel(spec.length, spec.length_scales[f], spec.amplitudes[f])
        kernel[np.diag_indices_from(kernel)] += 1e-9
        try:
            chol = np.linalg.cholesky(kernel)
        except np.linalg.LinAlgError:
            raise ValueError(f"feature {f}: RBF kernel not positive definite despite jitter") from None
        series[:, :, f] = rng.standard_normal((spec.samples, spec.length)) @ chol.T
    return series


def lower_median(values: np.ndarray) -> float:
    """Median that is always an element of the sample (the lower one when the
    count is even), so strictly-greater splits an even count exactly in half."""
    ordered = np.sort(np.asarray(values))
    return float(ordered[(ordered.size - 1) // 2])


def assign_labels(series: np.ndarray, spec: GpSpec | None = None) -> LabeledDataset:
    """Label = (sum_t x1*x2 > median) AND (sum_t x3*x4 > median)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3 or series.shape[2] < 4:
        raise ValueError(f"series must be (N, T, F>=4), got {series.shape}")
    sum_12 = (series[:, :, 0] * series[:, :, 1]).sum(axis=1)
    sum_34 = (series[:, :, 2] * series[:, :, 3]).sum(axis=1)
    kappa_12 = lower_median(sum_12)
    kappa_34 = lower_median(sum_34)
    labels = ((sum_12 > kappa_12) & (sum_34 > kappa_34)).astype(np.int64)
    return LabeledDataset(
        series=series,
        labels=labels,
        thresholds=(kappa_12, kappa_34),
        spec=spec,
    )


def generate_dataset(spec: GpSpec) -> LabeledDataset:
    return assign_labels(sample_gp(spec), spec)


# ----------------------------------------------------------------------
# static-clustering inputs
# ----------------------------------------------------------------------


def static_transform(dataset: LabeledDataset, mode: str) -> np.ndarray:
    """Build one vector per feature for the static K-means baselines.

    flat          per sample: its T feature values then its label  -> N(T+1)
    time_mean     per sample: its time average then its label      -> 2N
    sample_mean   per step: the sample average; label mean appended -> T+1
    full_mean     the global average; label mean appended           -> 2

    Where the sample axis is averaged away the per-sample labels collapse to
    their mean; where samples are concatenated each block carries its label.
    """
    if mode not in STATIC_MODES:
        raise ValueError(f"unknown static transform {mode!r}, expected one of {STATIC_MODES}")
    x = dataset.series
    y = dataset.labels.astype(np.float64)
    n, t, f = x.shape
    if mode == "flat":
        blocks = np.concatenate([x, y[:, None, None] * np.ones((n, 1, f))], axis=1)  # (N, T+1, F)
        return blocks.transpose(2, 0, 1).reshape(f, n * (t + 1))
    if mode == "time_mean":
        means = x.mean(axis=1)  # (N, F)
        blocks = np.stack([means, y[:, None] * np.ones((n, f))], axis=2)  # (N, F, 2)
        return blocks.transpose(1, 0, 2).reshape(f, 2 * n)
    if mode == "sample_mean":
        means = x.mean(axis=0).T  # (F, T)
        return np.concatenate([means, np.full((f, 1), y.mean())], axis=1)
    return np.stack([x.mean(axis=(0, 1)), np.full(f, y.mean())], axis=1)  # (F, 2)


def static_kmeans_baseline(
    dataset: LabeledDataset, mode: str, k: int, seed: int
) -> np.ndarray:
    """k-means++-seeded Lloyd's to convergence on the static feature vectors.

    Guards against K above the ground-truth group count, where comparisons
    with the 3-group truth degenerate.
    """
    if k > len(dataset.truth_groups):
        raise ValueError(
            f"K={k} exceeds the {len(dataset.truth_groups)} ground-truth groups; "
            "the benchmark comparison would be degenerate"
        )
    vectors = static_transform(dataset, mode)
    state = init_kmeanspp(vectors, k, np.random.default_rng(seed))
    previous = np.inf
    for _ in range(300):
        _, centroids = kmeans_assign_and_update(vectors, state)
        state = ClusterState(kind="kmeans", centroids=centroids)
        sse = kmeans_sse(vectors, centroids)
        if previous - sse <= 1e-8 * max(previous, 1e-300):
            break
        previous = sse
    return hard_membership(score_points(vectors, state))


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, binary_path, sidecar_path):
    write_tensors(binary_path, {"series": dataset.series, "labels": dataset.labels.astype(np.float64)})
    spec = dataset.spec
    sidecar = {
        "schema": DATASET_SCHEMA,
        "binary_format": "FGT1 named tensors: series (N,T,F), labels (N,)",
        "samples": int(dataset.series.shape[0]),
        "length": int(dataset.series.shape[1]),
        "features": int(dataset.series.shape[2]),
        "thresholds": {"kappa_12": dataset.thresholds[0], "kappa_34": dataset.thresholds[1]},
        "truth_groups": dataset.truth_groups,
        "positive_rate": float(dataset.labels.mean()),
        "generator": None
        if spec is None
        else {
            "length_scales": list(spec.length_scales),
            "amplitudes": list(spec.amplitudes),
            "seed": spec.seed,
        },
    }
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(binary_path, sidecar_path) -> LabeledDataset:
    tensors = read_tensors(binary_path)
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    if sidecar.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"{sidecar_path}: unexpected schema {sidecar.get('schema')!r}")
    generator = sidecar.get("generator")
    spec = None
    if generator is not None:
        spec = GpSpec(
            features=sidecar["features"],
            length=sidecar["length"],
            samples=sidecar["samples"],
            length_scales=tuple(generator["length_scales"]),
            amplitudes=tuple(generator["amplitudes"]),
            seed=generator["seed"],
        )
    return LabeledDataset(
        series=tensors["series"],
        labels=tensors["labels"].astype(np.int64),
        thresholds=(sidecar["thresholds"]["kappa_12"], sidecar["thresholds"]["kappa_34"]),
        truth_groups=[list(g) for g in sidecar["truth_groups"]],
        spec=spec,
    )


def export_csv(dataset: LabeledDataset, path):
    """Row-per-timestep CSV for eyeballing the generated series."""
    n, t, f = dataset.series.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# schema", DATASET_SCHEMA])
        writer.writerow(["sample", "step"] + [f"x{j}" for j in range(f)] + ["label"])
        for i in range(n):
            for step in range(t):
                row = [i, step] + [repr(v) for v in dataset.series[i, step]] + [int(dataset.labels[i])]
                writer.writerow(row)

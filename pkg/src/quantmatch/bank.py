"""Snapshot cache and control-variate estimator for small-batch training.

The per-reference population average of unit vectors is estimated from a
batch as  batch_mean(theta_t) + [snapshot_mean - batch_mean(theta_snap)].
The bracketed correction has zero mean over batches, so the estimate stays
unbiased, and it cancels almost all of the sampling noise when the snapshot
parameters are close to the current ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import COINCIDENCE_EPS, DimensionMismatchError, PointCloud
from .loss import ReferenceSet
from .oracles import enumerate_batches
from .rng import SplitMix64


@dataclass
class MemoryBank:
    """Cached per-sample features and per-reference snapshot averages."""

    features: np.ndarray           # (n, d) adapted features at last touch
    snapshot_features: np.ndarray  # (n, d) adapted features at theta_snap
    snapshot_avgs: np.ndarray      # (R, d) per-reference mean unit vectors at theta_snap
    epoch_of_snapshot: int = 0


def per_sample_units(points: np.ndarray, ref_points: np.ndarray, eps: float = COINCIDENCE_EPS) -> np.ndarray:
    """(R, n, d) unit vectors from each point toward each reference.

    Coincident pairs contribute a zero vector without renormalization; this
    keeps every batch/population average linear in the per-sample terms, so
    the control-variate cancellation and unbiasedness hold exactly.
    """
    diff = ref_points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    mask = dist >= eps
    units = diff / np.where(mask, dist, 1.0)[:, :, None]
    units[~mask] = 0.0
    return units


def initialize_bank(adapted: PointCloud, refs: ReferenceSet) -> MemoryBank:
    units = per_sample_units(adapted.points, refs.quantiles)
    return MemoryBank(
        features=adapted.points.copy(),
        snapshot_features=adapted.points.copy(),
        snapshot_avgs=units.mean(axis=1),
        epoch_of_snapshot=0,
    )


def refresh_snapshot(bank: MemoryBank, adapted: PointCloud, refs: ReferenceSet) -> MemoryBank:
    """Recompute the snapshot at the current parameters."""
    if adapted.n != bank.features.shape[0]:
        raise DimensionMismatchError("bank size does not match the adapted cloud")
    units = per_sample_units(adapted.points, refs.quantiles)
    return MemoryBank(
        features=adapted.points.copy(),
        snapshot_features=adapted.points.copy(),
        snapshot_avgs=units.mean(axis=1),
        epoch_of_snapshot=bank.epoch_of_snapshot + 1,
    )


def control_variate_estimate(
    bank: MemoryBank,
    batch: np.ndarray,
    current_h: np.ndarray,
    snapshot_h: np.ndarray,
) -> np.ndarray:
    """Per-reference estimate of the population average at the current parameters."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch is empty")
    n = bank.snapshot_features.shape[0]
    if batch.min() < 0 or batch.max() >= n:
        raise IndexError("batch index out of range")
    if current_h.shape != bank.snapshot_avgs.shape or snapshot_h.shape != bank.snapshot_avgs.shape:
        raise DimensionMismatchError("per-reference batch averages have wrong shape")
    # associated so identical batch terms cancel exactly
    return (current_h - snapshot_h) + bank.snapshot_avgs


@dataclass(frozen=True)
class EstimatorDiagnostics:
    crude_variance: float
    control_variance: float
    beta_star: float


def population_moments(a_units: np.ndarray, s_units: np.ndarray):
    """Per-reference variances and cross-covariance of the unit-vector populations.

    Returns (sigma_a2, sigma_s2, sigma_as), each (R,), using the expected
    squared-norm convention.
    """
    a_mean = a_units.mean(axis=1)
    s_mean = s_units.mean(axis=1)
    da = a_units - a_mean[:, None, :]
    ds = s_units - s_mean[:, None, :]
    sigma_a2 = np.mean(np.sum(da**2, axis=2), axis=1)
    sigma_s2 = np.mean(np.sum(ds**2, axis=2), axis=1)
    sigma_as = np.mean(np.sum(da * ds, axis=2), axis=1)
    return sigma_a2, sigma_s2, sigma_as


def lemma_variance(sigma2: float, n: int, b: int) -> float:
    """Without-replacement sample-mean variance: (1/b) * (n-b)/(n-1) * sigma2."""
    return sigma2 * (n - b) / (b * (n - 1))


def _batch_iter(n: int, b: int, mode: str, draws: int, seed: int):
    if mode == "exhaustive":
        for combo in enumerate_batches(n, b):
            yield np.asarray(combo, dtype=int)
    elif mode == "monte_carlo":
        rng = SplitMix64.stream("estimator_variance", seed)
        for _ in range(draws):
            yield np.asarray(rng.sample_without_replacement(n, b), dtype=int)
    else:
        raise ValueError(f"unknown mode {mode!r}")


def estimator_variance(
    adapted_t: PointCloud,
    adapted_snap: PointCloud,
    refs: ReferenceSet,
    b: int,
    mode: str = "exhaustive",
    draws: int = 10_000,
    seed: int = 0,
    bank: MemoryBank | None = None,
) -> EstimatorDiagnostics:
    """Measured variance of the crude and control-variate estimators.

    Variances are expected squared norms of the estimate around the exact
    population average, averaged across references.  beta_star is the
    variance-optimal control coefficient sigma_as / sigma_s^2 computed from
    population sums; the estimator itself always uses beta = 1.
    """
    n = adapted_t.n
    if adapted_snap.n != n:
        raise DimensionMismatchError("current and snapshot clouds differ in size")
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} out of range [1, {n}]")
    if mode == "exhaustive" and math.comb(n, b) > 10**6:
        raise ValueError("exhaustive mode limited to C(n, b) <= 1e6")

    a_units = per_sample_units(adapted_t.points, refs.quantiles)
    s_units = per_sample_units(adapted_snap.points, refs.quantiles)
    a_mean = a_units.mean(axis=1)
    s_mean = s_units.mean(axis=1)

    crude_sq = 0.0
    control_sq = 0.0
    count = 0
    for batch in _batch_iter(n, b, mode, draws, seed):
        a_hat = a_units[:, batch, :].mean(axis=1)
        s_hat = s_units[:, batch, :].mean(axis=1)
        crude_sq += float(np.mean(np.sum((a_hat - a_mean) ** 2, axis=1)))
        est = a_hat + (s_mean - s_hat)
        control_sq += float(np.mean(np.sum((est - a_mean) ** 2, axis=1)))
        count += 1

    sigma_a2, sigma_s2, sigma_as = population_moments(a_units, s_units)
    total_s2 = float(sigma_s2.sum())
    beta_star = float(sigma_as.sum() / total_s2) if total_s2 > 0 else float("nan")
    return EstimatorDiagnostics(
        crude_variance=crude_sq / count,
        control_variance=control_sq / count,
        beta_star=beta_star,
    )

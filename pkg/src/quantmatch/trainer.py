"""Quantile-matching training loop with optional memory-bank minibatch SGD.

Reference indices are computed once against the source features before the
first epoch and never refreshed.  Full-batch mode takes one exact gradient
step per epoch; minibatch mode estimates the per-reference averages with the
snapshot control variate and refreshes the snapshot every `snapshot_every`
epochs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import Adapter, FeatureMap
from .bank import (
    MemoryBank,
    control_variate_estimate,
    initialize_bank,
    lemma_variance,
    per_sample_units,
    population_moments,
    refresh_snapshot,
)
from .geometry import PointCloud
from .loss import (
    ReferenceSet,
    batch_stat_penalty_grad,
    quantile_loss_on_points,
    select_references,
)
from .oracles import MAX_EXACT_SIZE, Pairing, paired_mse, wasserstein2
from .rng import SplitMix64

TRACE_COLUMNS = (
    "epoch",
    "quantile_loss",
    "paired_mse",
    "wasserstein2",
    "crude_var",
    "control_var",
    "grad_norm",
)


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    reference_count: int
    momentum: float = 0.9
    reg_weight: float = 0.0
    seed: int = 0
    snapshot_every: int = 1
    full_batch: bool = False
    wasserstein_every: int = 10
    wasserstein_max_size: int = MAX_EXACT_SIZE

    def validate(self, n_source: int, n_target: int) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.batch_size <= n_target:
            raise ConfigError(f"batch_size must be in [1, {n_target}]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 1 <= self.reference_count <= n_source:
            raise ConfigError(f"reference_count must be in [1, {n_source}]")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    quantile_loss: float
    paired_mse: float | None
    wasserstein2: float | None
    crude_var: float
    control_var: float
    grad_norm: float
    wall_time: float
    flag: str = ""


@dataclass
class RunTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def column(self, name: str, skip_none: bool = True) -> np.ndarray:
        vals = [getattr(r, name) for r in self.records]
        if skip_none:
            vals = [v for v in vals if v is not None]
        return np.asarray(vals, dtype=float)

    def to_csv(self, path) -> None:
        """Deterministic trace; wall times stay out so reruns are byte-identical."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.epoch,
                        repr(r.quantile_loss),
                        "" if r.paired_mse is None else repr(r.paired_mse),
                        "" if r.wasserstein2 is None else repr(r.wasserstein2),
                        repr(r.crude_var),
                        repr(r.control_var),
                        repr(r.grad_norm),
                    ]
                )


def sgd_step(
    adapter: Adapter,
    grads: np.ndarray,
    cfg: TrainConfig,
    velocity: np.ndarray | None = None,
) -> tuple[Adapter, np.ndarray]:
    """Classical momentum update: v <- mu*v + g, theta <- theta - lr*v."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != adapter.params.shape:
        raise ConfigError("gradient length does not match parameter count")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("non-finite gradient")
    if velocity is None:
        velocity = np.zeros_like(adapter.params)
    velocity = cfg.momentum * velocity + grads
    return adapter.with_params(adapter.params - cfg.learning_rate * velocity), velocity


def _adapted_points(adapter: Adapter, fmap: FeatureMap, target_pts: np.ndarray) -> np.ndarray:
    return fmap.forward_cloud(adapter.forward_cloud(target_pts))


def _chain_param_grad(
    adapter: Adapter,
    fmap: FeatureMap,
    target_pts: np.ndarray,
    transformed: np.ndarray,
    point_grads: np.ndarray,
) -> np.ndarray:
    upstream = fmap.backward_cloud(transformed, point_grads)
    param_grad, _ = adapter.backward_cloud(target_pts, upstream)
    return param_grad


def _variance_sample(adapted: np.ndarray, bank: MemoryBank | None, refs: ReferenceSet, b: int, n: int):
    """Closed-form crude/control variances at the current snapshot distance."""
    if bank is None or b >= n:
        return 0.0, 0.0
    a_units = per_sample_units(adapted, refs.quantiles)
    s_units = per_sample_units(bank.snapshot_features, refs.quantiles)
    sigma_a2, sigma_s2, sigma_as = population_moments(a_units, s_units)
    crude = lemma_variance(float(sigma_a2.mean()), n, b)
    control = lemma_variance(float((sigma_a2 + sigma_s2 - 2.0 * sigma_as).mean()), n, b)
    return crude, control


def evaluate_epoch(
    adapter: Adapter,
    fmap: FeatureMap,
    source_feats: PointCloud,
    target: PointCloud,
    refs: ReferenceSet,
    pairing: Pairing | None = None,
    epoch: int = 0,
    compute_wasserstein: bool = True,
    wasserstein_max_size: int = MAX_EXACT_SIZE,
    reg_weight: float = 0.0,
    source_mean=None,
    source_std=None,
) -> EpochRecord:
    """Full-data metrics for one epoch; the Wasserstein oracle runs on cadence."""
    adapted = _adapted_points(adapter, fmap, target.points)
    breakdown, _ = quantile_loss_on_points(
        adapted, refs, reg_weight, source_mean, source_std, want_grad=False
    )

    mse = None
    if pairing is not None:
        mse = paired_mse(adapted, source_feats.points, pairing)

    w2 = None
    flag = ""
    if compute_wasserstein:
        if adapted.shape[0] == source_feats.n and adapted.shape[0] <= wasserstein_max_size:
            w2 = wasserstein2(adapted, source_feats, max_size=wasserstein_max_size).distance
        else:
            flag = "wasserstein_skipped"

    return EpochRecord(
        epoch=epoch,
        quantile_loss=breakdown.total,
        paired_mse=mse,
        wasserstein2=w2,
        crude_var=0.0,
        control_var=0.0,
        grad_norm=0.0,
        wall_time=0.0,
        flag=flag,
    )


def train(
    source_feats: PointCloud,
    target: PointCloud,
    adapter: Adapter,
    fmap: FeatureMap,
    cfg: TrainConfig,
    pairing: Pairing | None = None,
    source_labels=None,
) -> tuple[Adapter, RunTrace]:
    """Run quantile matching and return the adapter plus the per-epoch trace.

    The trace carries one record per epoch plus a pre-training record at
    epoch 0, so initial/final metric ratios are well-defined.
    """
    cfg.validate(source_feats.n, target.n)
    if fmap.out_dim != source_feats.dim:
        raise ConfigError("source features must live in the feature-map output space")
    if fmap.in_dim != adapter.dim or adapter.dim != target.dim:
        raise ConfigError("adapter/feature-map/target dimensions are inconsistent")

    refs = select_references(source_feats, cfg.reference_count, cfg.seed, labels=source_labels)
    src_mean = source_feats.points.mean(axis=0)
    src_std = source_feats.points.std(axis=0, ddof=1)
    reg_args = (cfg.reg_weight, src_mean, src_std)

    n = target.n
    rng = SplitMix64.stream("trainer_batches", cfg.seed)
    velocity = np.zeros_like(adapter.params)
    bank: MemoryBank | None = None
    trace = RunTrace()

    def eval_record(epoch: int, adapted_pts: np.ndarray, grad_norm: float, wall: float, flag: str) -> EpochRecord:
        on_cadence = epoch == 0 or epoch == cfg.epochs or epoch % cfg.wasserstein_every == 0
        rec = evaluate_epoch(
            adapter,
            fmap,
            source_feats,
            target,
            refs,
            pairing,
            epoch=epoch,
            compute_wasserstein=on_cadence,
            wasserstein_max_size=cfg.wasserstein_max_size,
            reg_weight=cfg.reg_weight,
            source_mean=src_mean,
            source_std=src_std,
        )
        rec.crude_var, rec.control_var = _variance_sample(adapted_pts, bank, refs, cfg.batch_size, n)
        rec.grad_norm = grad_norm
        rec.wall_time = wall
        rec.flag = ";".join(x for x in (rec.flag, flag) if x)
        return rec

    trace.records.append(eval_record(0, _adapted_points(adapter, fmap, target.points), 0.0, 0.0, ""))

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        flag = ""
        grad_norm = 0.0

        if cfg.full_batch:
            transformed = adapter.forward_cloud(target.points)
            adapted = fmap.forward_cloud(transformed)
            _, point_grads = quantile_loss_on_points(adapted, refs, *reg_args)
            param_grad = _chain_param_grad(adapter, fmap, target.points, transformed, point_grads)
            grad_norm = float(np.linalg.norm(param_grad))
            try:
                adapter, velocity = sgd_step(adapter, param_grad, cfg, velocity)
            except NonFiniteGradientError:
                flag = "nonfinite_grad"
        else:
            if bank is None or (epoch - 1) % cfg.snapshot_every == 0:
                adapted_full = PointCloud(_adapted_points(adapter, fmap, target.points))
                bank = refresh_snapshot(bank, adapted_full, refs) if bank is not None else initialize_bank(adapted_full, refs)
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = np.asarray(order[start : start + cfg.batch_size], dtype=int)
                b = len(batch)
                xb = target.points[batch]
                transformed = adapter.forward_cloud(xb)
                yb = fmap.forward_cloud(transformed)

                cur_units = per_sample_units(yb, refs.quantiles)          # (R, b, d)
                snap_units = per_sample_units(bank.snapshot_features[batch], refs.quantiles)
                estimate = control_variate_estimate(
                    bank, batch, cur_units.mean(axis=1), snap_units.mean(axis=1)
                )
                resid = estimate - refs.target_indices                     # (R, d)

                # gradient of mean_r ||estimate_r - u_r||^2 through the batch term
                dist = np.linalg.norm(refs.quantiles[:, None, :] - yb[None, :, :], axis=2)
                mask = dist >= 1e-12
                dots = np.einsum("rjd,rd->rj", cur_units, resid)
                scale = np.where(mask, 2.0 / (refs.count * b * dist.clip(min=1e-300)), 0.0)
                point_grads = -((resid[:, None, :] - cur_units * dots[:, :, None]) * scale[:, :, None]).sum(axis=0)
                if cfg.reg_weight != 0.0 and b >= 2:
                    point_grads += cfg.reg_weight * batch_stat_penalty_grad(yb, src_mean, src_std)

                param_grad = _chain_param_grad(adapter, fmap, xb, transformed, point_grads)
                grad_norm = float(np.linalg.norm(param_grad))
                try:
                    adapter, velocity = sgd_step(adapter, param_grad, cfg, velocity)
                except NonFiniteGradientError:
                    flag = "nonfinite_grad"
                    continue
                bank.features[batch] = fmap.forward_cloud(adapter.forward_cloud(xb))

        wall = time.perf_counter() - t0
        trace.records.append(eval_record(epoch, _adapted_points(adapter, fmap, target.points), grad_norm, wall, flag))

    return adapter, trace

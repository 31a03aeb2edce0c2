"""Point clouds, the directional quantile objective, and the quantile solver.

A quantile of a cloud is indexed by a vector u in the open unit ball: the
quantile at u minimizes the convex loss (1/n) * sum_i phi(u, Z_i - Q) with
phi(u, t) = ||t|| + <u, t>.  The index function maps a probe point z to the
average unit vector (1/n) * sum_i (z - Z_i)/||z - Z_i||; it is the gradient
of the objective, so solving for a quantile and reading off an index are
inverse operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COINCIDENCE_EPS = 1e-12
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500


class DimensionMismatchError(ValueError):
    pass


class InvalidIndexError(ValueError):
    """Quantile index outside the closed unit ball."""


class DegenerateCloudError(ValueError):
    """Cloud (or probe) for which the requested quantity is undefined."""


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1 or v.size < 1:
        raise DimensionMismatchError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite coordinates")
    return v


@dataclass(frozen=True)
class PointCloud:
    """Finite multiset of d-dimensional points, stored as an (n, d) array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise DimensionMismatchError(f"points must be (n, d), got shape {pts.shape}")
        n, d = pts.shape
        if n < 2 or d < 1:
            raise DegenerateCloudError(f"need n >= 2 points of dimension >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud has non-finite coordinates")
        if np.all(pts == pts[0]):
            raise DegenerateCloudError("all cloud points are identical")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n


def _check_index(u: np.ndarray, open_ball: bool = False) -> None:
    norm = float(np.linalg.norm(u))
    if open_ball:
        if norm >= 1.0:
            raise InvalidIndexError(f"quantile index must satisfy ||u|| < 1, got {norm}")
    elif norm > 1.0 + 1e-9:
        raise InvalidIndexError(f"quantile index must satisfy ||u|| <= 1, got {norm}")


def phi(u, t) -> float:
    """||t|| + <u, t>; nonnegative whenever ||u|| <= 1."""
    u = as_vector(u)
    t = as_vector(t)
    if u.shape != t.shape:
        raise DimensionMismatchError(f"phi: dim {u.shape[0]} vs {t.shape[0]}")
    _check_index(u)
    return float(np.linalg.norm(t) + u @ t)


def phi_loss(cloud: PointCloud, u, q) -> float:
    """Quantile objective (1/n) * sum_i phi(u, Z_i - Q); convex in Q."""
    u = as_vector(u)
    q = as_vector(q)
    if u.shape[0] != cloud.dim or q.shape[0] != cloud.dim:
        raise DimensionMismatchError("phi_loss: dimension mismatch")
    _check_index(u)
    diff = cloud.points - q
    return float(np.mean(np.linalg.norm(diff, axis=1) + diff @ u))


def quantile_index(cloud: PointCloud, z, eps: float = COINCIDENCE_EPS) -> np.ndarray:
    """Average unit vector from the cloud toward z.

    Points within eps of z are excluded and the average renormalized by the
    remaining count, matching the on-support form of the inverse map.
    """
    z = as_vector(z)
    if z.shape[0] != cloud.dim:
        raise DimensionMismatchError("quantile_index: dimension mismatch")
    diff = z - cloud.points
    dist = np.linalg.norm(diff, axis=1)
    keep = dist >= eps
    m = int(keep.sum())
    if m == 0:
        raise DegenerateCloudError("probe coincides with every cloud point")
    return diff[keep].T.dot(1.0 / dist[keep]) / m


@dataclass(frozen=True)
class SolverReport:
    """Outcome of a geometric-quantile solve."""

    quantile: np.ndarray
    iterations: int
    residual: float
    converged: bool
    maybe_nonunique: bool = False
    on_support: bool = False
    loss_history: tuple[float, ...] | None = None


def _on_support_pull(pts: np.ndarray, r: int, u: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Pseudo-gradient at data point r: sum of unit vectors minus n*u.

    The point is the exact minimizer iff the pull has norm <= 1 (the dropped
    distance term contributes a unit subgradient ball).
    """
    mask = np.ones(len(pts), dtype=bool)
    mask[r] = False
    diff = pts[r] - pts[mask]
    dist = np.linalg.norm(diff, axis=1)
    inv = 1.0 / dist
    pull = diff.T.dot(inv) - len(pts) * u
    return pull, float(np.linalg.norm(pull)), float(inv.sum())


def geometric_quantile(
    cloud: PointCloud,
    u,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    track_losses: bool = False,
) -> SolverReport:
    """Solve for the quantile at index u by damped Weiszfeld iteration.

    The fixed-point map Q <- (sum_i Z_i/d_i + n*u) / (sum_i 1/d_i) comes from
    the stationarity condition index(Q) = u.  Steps that would increase the
    objective fall back to halving-step gradient descent, so accepted
    iterations never increase phi_loss.  Iterates landing on a data point are
    snapped there when the subgradient optimality test passes.
    """
    pts = cloud.points
    n, d = pts.shape
    u = as_vector(u)
    if u.shape[0] != d:
        raise DimensionMismatchError("geometric_quantile: dimension mismatch")
    _check_index(u, open_ball=True)

    centered = pts - pts.mean(axis=0)
    maybe_nonunique = np.linalg.matrix_rank(centered) < d

    q = pts.mean(axis=0)
    loss = phi_loss(cloud, u, q)
    losses = [loss] if track_losses else None
    on_support = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        diff = q - pts
        dist = np.linalg.norm(diff, axis=1)
        nearest = int(np.argmin(dist))

        if dist[nearest] < COINCIDENCE_EPS:
            pull, pull_norm, inv_sum = _on_support_pull(pts, nearest, u)
            if pull_norm <= 1.0:
                q = pts[nearest].copy()
                on_support = True
                break
            # not optimal: step off the point along the descent direction
            step = (pull_norm - 1.0) / inv_sum
            candidate = pts[nearest] - step * pull / pull_norm
            cand_loss = phi_loss(cloud, u, candidate)
            while cand_loss > loss and step > 1e-18:
                step *= 0.5
                candidate = pts[nearest] - step * pull / pull_norm
                cand_loss = phi_loss(cloud, u, candidate)
            q, loss = candidate, cand_loss
            if losses is not None:
                losses.append(loss)
            continue

        grad = diff.T.dot(1.0 / dist) / n - u  # = index(q) - u
        if np.linalg.norm(grad) <= tol:
            break

        weights = 1.0 / dist
        candidate = (pts.T.dot(weights) + n * u) / weights.sum()
        cand_loss = phi_loss(cloud, u, candidate)
        slack = 4.0 * np.finfo(float).eps * max(1.0, abs(loss))  # absorb ulp noise only
        if cand_loss > loss + slack:
            # halving-step gradient descent fallback
            step = float(np.linalg.norm(candidate - q))
            candidate = q - step * grad
            cand_loss = phi_loss(cloud, u, candidate)
            while cand_loss > loss + slack and step > 1e-18:
                step *= 0.5
                candidate = q - step * grad
                cand_loss = phi_loss(cloud, u, candidate)
            if cand_loss > loss + slack:
                break  # stalled at numerical precision
        q, loss = candidate, cand_loss
        if losses is not None:
            losses.append(loss)

    residual = float(np.linalg.norm(quantile_index(cloud, q) - u))
    return SolverReport(
        quantile=q,
        iterations=iterations,
        residual=residual,
        converged=residual <= tol,
        maybe_nonunique=bool(maybe_nonunique),
        on_support=on_support,
        loss_history=tuple(losses) if losses is not None else None,
    )

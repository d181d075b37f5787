"""Balanced soft clustering of point features via entropic optimal transport.

Each cluster is represented by two prototypes: a score-weighted centroid of
the 3D coordinates and one of the per-point features. Points are softly
assigned to clusters by solving a transport problem whose marginals force
every cluster to receive the same total mass (N/J points' worth), so no
cluster can swallow the whole cloud. The plain softmax-over-distance
assignment is kept as a baseline; it carries no such guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import NumericalError, ShapeError

EMPTY_CLUSTER_EPS = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    """Assignment solver settings."""

    epsilon: float = 1e-3
    iters: int = 20
    tol: float = 1e-6
    lam: float = 0.5
    learn_lambda: bool = False
    num_clusters: int = 64

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.num_clusters < 2:
            raise ValueError(f"need at least 2 clusters, got {self.num_clusters}")


@dataclass
class Prototypes:
    """Per-cluster centroids: geo is (J, 3), feat is (J, d)."""

    geo: np.ndarray
    feat: np.ndarray


@dataclass
class CostMatrix:
    """Blended squared-distance cost, values (N, J), lam in [0, 1]."""

    values: np.ndarray
    lam: float


@dataclass
class TransportPlan:
    """Coupling matrix (N, J) with total mass 1."""

    matrix: np.ndarray

    def marginal_residual(self) -> float:
        """Max deviation of row sums from 1/N and column sums from 1/J."""
        n, j = self.matrix.shape
        row = np.abs(self.matrix.sum(axis=1) - 1.0 / n).max()
        col = np.abs(self.matrix.sum(axis=0) - 1.0 / j).max()
        return float(max(row, col))


@dataclass
class SoftLabels:
    """Per-point cluster distribution (N, J); rows sum to 1."""

    matrix: np.ndarray

    def hard(self) -> np.ndarray:
        return self.matrix.argmax(axis=1)


def _points_of(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def compute_prototypes(cloud, features: np.ndarray, scores: np.ndarray) -> Prototypes:
    """Score-weighted centroids of coordinates and features.

    Column j of the score matrix weights point i by scores[i, j]. A cluster
    whose score column sums below 1e-12 falls back to the unweighted mean,
    so downstream costs stay finite while scores are near-degenerate.
    """
    points = _points_of(cloud)
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = points.shape[0]
    if features.shape[0] != n or scores.shape[0] != n:
        raise ShapeError(
            f"points ({n}), features ({features.shape[0]}) and scores "
            f"({scores.shape[0]}) must agree on N"
        )
    weights = scores.sum(axis=0)  # (J,)
    empty = weights < EMPTY_CLUSTER_EPS
    safe = np.where(empty, 1.0, weights)
    geo = (scores.T @ points) / safe[:, None]
    feat = (scores.T @ features) / safe[:, None]
    if empty.any():
        geo[empty] = points.mean(axis=0)
        feat[empty] = features.mean(axis=0)
    return Prototypes(geo=geo, feat=feat)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def compute_cost(cloud, features: np.ndarray, protos: Prototypes, lam: float) -> CostMatrix:
    """Blend geometric and feature squared distances: lam*geo + (1-lam)*feat."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    points = _points_of(cloud)
    features = np.asarray(features, dtype=np.float64)
    d_geo = _sq_dists(points, protos.geo)
    d_feat = _sq_dists(features, protos.feat)
    return CostMatrix(values=lam * d_geo + (1.0 - lam) * d_feat, lam=lam)


def _cost_values(cost) -> np.ndarray:
    values = getattr(cost, "values", cost)
    return np.asarray(values, dtype=np.float64)


def sinkhorn(cost, epsilon: float = 1e-3, iters: int = 20,
             tol: float | None = None) -> TransportPlan:
    """Entropically regularized balanced transport via alternating scaling.

    The plan is initialized proportional to exp(-cost/epsilon) (stabilized
    by shifting cost/epsilon so its minimum is zero before exponentiation,
    then normalized to total mass 1). Each iteration rescales rows to sum
    to 1/N and then columns to sum to 1/J. When `tol` is given, iteration
    stops early once the max marginal residual drops below it.

    Raises NumericalError when a scaling denominator underflows to zero,
    which signals that epsilon is too small for the spread of the costs.
    """
    d = _cost_values(cost)
    if d.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {d.shape}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    n, m = d.shape

    scaled = d / epsilon
    gamma = np.exp(-(scaled - scaled.min()))
    total = gamma.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise NumericalError("transport kernel collapsed; epsilon too small for cost scale")
    gamma /= total

    row_target = 1.0 / n
    col_target = 1.0 / m
    with np.errstate(divide="ignore", over="ignore"):
        for _ in range(iters):
            row_scale = row_target / gamma.sum(axis=1)
            if not np.all(np.isfinite(row_scale)):
                raise NumericalError("row scaling underflowed; epsilon too small for cost scale")
            gamma *= row_scale[:, None]
            col_scale = col_target / gamma.sum(axis=0)
            if not np.all(np.isfinite(col_scale)):
                raise NumericalError("column scaling underflowed; epsilon too small for cost scale")
            gamma *= col_scale[None, :]
            if tol is not None:
                residual = np.abs(gamma.sum(axis=1) - row_target).max()
                if residual < tol:
                    break
    if not np.all(np.isfinite(gamma)):
        raise NumericalError("transport plan became non-finite")
    return TransportPlan(matrix=gamma)


def assign_soft_labels(plan: TransportPlan, n: int) -> SoftLabels:
    """Scale a transport plan to per-point distributions: labels = N * plan."""
    matrix = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
    return SoftLabels(matrix=float(n) * matrix)


def assign_l2_labels(cost, temperature: float) -> SoftLabels:
    """Per-row softmax over negative cost: the unconstrained baseline.

    Rows sum to 1, but column sums are unconstrained, so clusters may
    receive arbitrarily unbalanced mass.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    d = _cost_values(cost)
    logits = -d / temperature
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return SoftLabels(matrix=expd / expd.sum(axis=1, keepdims=True))


def prototypes_backward(cloud, features: np.ndarray, scores: np.ndarray,
                        protos: Prototypes, d_geo: np.ndarray,
                        d_feat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain loss gradients at the prototypes back to scores and features.

    For a weighted centroid c_j = sum_i s_ij x_i / sum_i s_ij:
      dL/ds_ij += dL/dc_j . (x_i - c_j) / w_j
      dL/df_i  += s_ij * dL/dc_j / w_j          (feature prototypes only)
    Clusters that hit the empty-cluster fallback (mean of all inputs) pass
    gradient to every feature equally and none to the scores.
    """
    points = _points_of(cloud)
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = points.shape[0]
    weights = scores.sum(axis=0)
    empty = weights < EMPTY_CLUSTER_EPS
    safe = np.where(empty, 1.0, weights)

    live = ~empty
    d_scores = np.zeros_like(scores)
    d_features = np.zeros_like(features)
    if live.any():
        # geometric side: (N,J) contributions of each prototype's gradient
        geo_term = np.einsum("ik,jk->ij", points, d_geo) - np.einsum("jk,jk->j", protos.geo, d_geo)[None, :]
        feat_term = np.einsum("ik,jk->ij", features, d_feat) - np.einsum("jk,jk->j", protos.feat, d_feat)[None, :]
        contrib = (geo_term + feat_term) / safe[None, :]
        d_scores[:, live] = contrib[:, live]
        d_features += scores[:, live] @ (d_feat[live] / safe[live, None])
    if empty.any():
        d_features += d_feat[empty].sum(axis=0) / n
    return d_scores, d_features

"""Self-verification suite backing the CLI `verify` command.

Each check cross-validates a production code path against an independent
oracle (exact LP, exhaustive balanced assignment, finite differences) or
asserts a structural invariant on seeded random instances. `fast` runs a
reduced instance count; `full` runs everything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import cloud as pc
from . import encoder as enc
from . import oracle
from .clustering import (SolverConfig, assign_l2_labels, assign_soft_labels,
                         compute_cost, compute_prototypes, prototypes_backward, sinkhorn)
from .losses import total_loss
from .trainer import TrainConfig, e_step, pretrain


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def random_cost(rng, n: int, m: int, scale: float = 0.5) -> np.ndarray:
    """Random nonnegative cost with spread compatible with epsilon=1e-3."""
    return rng.uniform(0.0, scale, size=(n, m))


def ball_cloud(rng, n: int):
    """n points uniform in the unit ball.

    Keeps the cost spread seen by the transport solver well inside what
    epsilon=1e-3 tolerates before exp() underflow, unlike heavy-tailed
    Gaussian clouds.
    """
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return pc.PointCloud(dirs * rng.uniform(size=(n, 1)) ** (1.0 / 3.0))


def blob_cloud(rng, n_blobs: int, per_blob: int, radius: float = 0.04,
               separation: float = 1.0):
    """Well-separated equal-size blobs; separation >= 10x radius by default."""
    centers = separation * _simplex_directions(n_blobs)
    points, membership = [], []
    for k in range(n_blobs):
        offsets = rng.normal(scale=radius / 2.0, size=(per_blob, 3))
        offsets = np.clip(offsets, -radius, radius)
        points.append(centers[k] + offsets)
        membership.extend([k] * per_blob)
    return pc.PointCloud(np.concatenate(points)), np.asarray(membership)


def _simplex_directions(k: int) -> np.ndarray:
    """k well-spread unit-scale directions in R^3."""
    base = np.array([
        [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0], [0.0, 0.0, -1.0],
        [0.577, 0.577, 0.577], [-0.577, -0.577, 0.577],
    ])
    if k > len(base):
        raise ValueError(f"at most {len(base)} blobs supported, got {k}")
    return base[:k]


def purity(labels: np.ndarray, membership: np.ndarray) -> float:
    """Fraction of points whose cluster maps to their true group under the
    best cluster-to-group assignment (greedy on the contingency table)."""
    labels = np.asarray(labels)
    membership = np.asarray(membership)
    clusters = np.unique(labels)
    correct = 0
    for c in clusters:
        groups, counts = np.unique(membership[labels == c], return_counts=True)
        correct += counts.max()
    return correct / len(labels)


def convergent_sinkhorn(cost, epsilon: float, tol: float = 1e-7,
                        max_iters: int = 200_000):
    """Sinkhorn iterated until the marginal residual beats `tol`."""
    return sinkhorn(cost, epsilon=epsilon, iters=max_iters, tol=tol)


def plan_residual(matrix: np.ndarray) -> float:
    n, m = matrix.shape
    row = np.abs(matrix.sum(axis=1) - 1.0 / n).max()
    col = np.abs(matrix.sum(axis=0) - 1.0 / m).max()
    return float(max(row, col))


# ---------------------------------------------------------------------------
# end-to-end gradient path (shared with the acceptance suite)

def toy_problem(seed: int = 7, n: int = 16, num_clusters: int = 4, dim: int = 8):
    """A seeded cloud, params, and constant soft labels for gradient checks."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, 3))
    cloud = pc.normalize(pc.PointCloud(raw))
    cfg = enc.EncoderConfig(hidden_sizes=(12,), feature_dim=dim,
                            num_clusters=num_clusters, global_context=True)
    params = enc.init_params(cfg, seed)
    solver = SolverConfig(num_clusters=num_clusters, epsilon=1e-2, iters=200, tol=1e-9)
    result = e_step(params, cloud, solver)
    return cloud, params, solver, result


def total_loss_of_params(params: enc.EncoderParams, cloud, gamma, eta: float = 0.01) -> float:
    """L_tot as a function of the parameters with labels held constant."""
    trace = enc.forward(params, cloud)
    protos = compute_prototypes(cloud, trace.features, trace.scores)
    report, _, _, _ = total_loss(gamma, trace.scores, protos, eta=eta)
    return report.l_total


def analytic_param_grads(params: enc.EncoderParams, cloud, gamma, eta: float = 0.01):
    """Exact dL_tot/dtheta along the same stop-gradient convention."""
    trace = enc.forward(params, cloud)
    protos = compute_prototypes(cloud, trace.features, trace.scores)
    _, d_scores, d_geo, d_feat = total_loss(gamma, trace.scores, protos, eta=eta)
    ds_p, df_p = prototypes_backward(trace.inputs, trace.features, trace.scores,
                                     protos, d_geo, d_feat)
    return enc.backward(trace, params, d_scores + ds_p, df_p)


def end_to_end_grad_report(seed: int = 7, n: int = 16, num_clusters: int = 4,
                           dim: int = 8, h: float = 1e-5,
                           rel_tol: float = 1e-4) -> oracle.GradCheckReport:
    cloud, params, _, result = toy_problem(seed, n, num_clusters, dim)
    gamma = result.gamma
    grads = analytic_param_grads(params, cloud, gamma)

    def closure(tensors):
        return total_loss_of_params(
            enc.EncoderParams(params.config, tensors), cloud, gamma)

    return oracle.grad_check(closure, params.tensors, grads, h=h, rel_tol=rel_tol)


# ---------------------------------------------------------------------------
# individual checks

def check_sinkhorn_feasibility(fast: bool) -> tuple[bool, str]:
    # Cost spread a few multiples of epsilon: fixed-iteration feasibility
    # degrades as spread/epsilon grows, which is what the convergent mode
    # is for. 5x epsilon keeps 20 iterations within the 1e-3 contract.
    rng = np.random.default_rng(11)
    grid = [(8, 2), (8, 8), (64, 8), (64, 64)] if fast else \
        [(n, j) for n in (8, 64, 512) for j in (2, 8, 64)]
    count = 3 if fast else 12
    worst_conv, worst_20 = 0.0, 0.0
    for n, m in grid:
        for _ in range(count):
            d = random_cost(rng, n, m, scale=5e-3)
            conv = convergent_sinkhorn(d, 1e-3).matrix
            worst_conv = max(worst_conv, plan_residual(conv))
            fixed = sinkhorn(d, epsilon=1e-3, iters=20).matrix
            worst_20 = max(worst_20, plan_residual(fixed))
    ok = worst_conv < 1e-6 and worst_20 < 1e-3
    return ok, f"converged residual {worst_conv:.2e} (<1e-6), 20-iter {worst_20:.2e} (<1e-3)"


def check_lp_gap(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(23)
    trials = 10 if fast else 50
    worst_excess = -np.inf
    monotone = True
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(2, 5))
        d = random_cost(rng, n, m, scale=0.05)
        best = oracle.exact_ot(d)
        gaps = []
        for eps in (1e-1, 1e-2, 1e-3):
            plan = convergent_sinkhorn(d, eps).matrix
            gaps.append(float((plan * d).sum()) - best.objective)
        if gaps[2] > 1e-3 * np.log(n * m) + 1e-6:
            worst_excess = max(worst_excess, gaps[2])
        if not (gaps[0] + 1e-9 >= gaps[1] >= gaps[2] - 1e-9):
            monotone = False
    ok = worst_excess == -np.inf and monotone
    return ok, f"gap bound {'ok' if worst_excess == -np.inf else 'violated'}, monotone={monotone}"


def check_gradients(fast: bool) -> tuple[bool, str]:
    report = end_to_end_grad_report()
    return report.passed, f"max rel error {report.max_rel_error:.2e} at {report.worst_param}"


def check_equipartition(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(37)
    cfg = enc.EncoderConfig(hidden_sizes=(16,), feature_dim=16, num_clusters=8)
    # epsilon 2e-3: random untrained-encoder costs on generic clouds can
    # spread past what exp(-cost/1e-3) survives; the equipartition contract
    # itself is epsilon-independent.
    solver = SolverConfig(num_clusters=8, epsilon=2e-3)
    worst = 0.0
    for trial in range(5 if fast else 20):
        params = enc.init_params(cfg, 100 + trial)
        cloud = pc.normalize(ball_cloud(rng, 96))
        result = e_step(params, cloud, solver)
        g = result.gamma.matrix
        n, m = g.shape
        worst = max(worst, np.abs(g.sum(axis=0) - n / m).max() / n)
    return worst < 1e-5, f"max |colsum(labels) - N/J| / N = {worst:.2e} (<1e-5)"


def check_blob_purity(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(41)
    details = []
    ok = True
    for j in (2, 4):
        cloud, membership = blob_cloud(rng, j, 12 // j)
        cloud = pc.normalize(cloud)
        cfg = enc.EncoderConfig(hidden_sizes=(8,), feature_dim=8, num_clusters=j)
        params = enc.init_params(cfg, 3)
        solver = SolverConfig(num_clusters=j, lam=1.0, iters=500, tol=1e-9)
        result = e_step(params, cloud, solver)
        hard = result.gamma.hard()
        p = purity(hard, membership)
        trace = enc.forward(params, cloud)
        protos = compute_prototypes(cloud, trace.features, trace.scores)
        cost = compute_cost(cloud, trace.features, protos, 1.0)
        ref = oracle.balanced_hard_assign(cost.values)
        agree = bool(np.array_equal(hard, ref))
        ok = ok and p == 1.0 and agree
        details.append(f"J={j}: purity {p:.2f}, matches oracle: {agree}")
    return ok, "; ".join(details)


def check_l2_vs_ot(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(53)
    n, m = 60, 4
    # one cheap cluster: the unconstrained assignment dumps everything there
    d = rng.uniform(0.2, 0.4, size=(n, m))
    d[:, 0] = rng.uniform(0.0, 0.02, size=n)
    l2 = assign_l2_labels(d, temperature=1e-3).matrix
    ot = assign_soft_labels(convergent_sinkhorn(d, 1e-3), n).matrix
    l2_dev = np.abs(l2.sum(axis=0) - n / m).max() / n
    ot_dev = np.abs(ot.sum(axis=0) - n / m).max() / n
    ok = l2_dev > 10 * 1e-6 and ot_dev < 1e-5
    return ok, f"L2 colsum deviation {l2_dev:.2e} (>1e-5), OT {ot_dev:.2e} (<1e-5)"


def check_cost_shift(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(61)
    d = random_cost(rng, 12, 5)
    base = sinkhorn(d, 1e-2, iters=200).matrix
    shifted = sinkhorn(d + 0.17, 1e-2, iters=200).matrix
    diff = np.abs(base - shifted).max()
    return diff < 1e-9, f"max plan change under constant cost shift: {diff:.2e}"


def check_lambda_endpoints(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(67)
    n, d_feat = 24, 6
    points = rng.normal(size=(n, 3))
    feats = rng.normal(size=(n, d_feat))
    scores = rng.dirichlet(np.ones(4), size=n)

    def solve(lam, p, f):
        protos = compute_prototypes(p, f, scores)
        return sinkhorn(compute_cost(p, f, protos, lam), 5e-2, iters=300).matrix

    geo_only = np.abs(solve(1.0, points, feats)
                      - solve(1.0, points, rng.normal(size=(n, d_feat)))).max()
    feat_only = np.abs(solve(0.0, points, feats)
                       - solve(0.0, rng.normal(size=(n, 3)), feats)).max()
    ok = geo_only == 0.0 and feat_only == 0.0
    return ok, f"feature perturbation at lam=1: {geo_only:.1e}; point perturbation at lam=0: {feat_only:.1e}"


def check_permutation_equivariance(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(71)
    cfg = enc.EncoderConfig(hidden_sizes=(10,), feature_dim=6, num_clusters=4)
    params = enc.init_params(cfg, 5)
    x = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    straight = enc.forward(params, x)
    permuted = enc.forward(params, x[perm])
    df = np.abs(straight.features[perm] - permuted.features).max()
    ds = np.abs(straight.scores[perm] - permuted.scores).max()
    return df < 1e-12 and ds < 1e-12, f"feature mismatch {df:.1e}, score mismatch {ds:.1e}"


def check_io_round_trip(fast: bool, tmp_dir=None) -> tuple[bool, str]:
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(73)
    cloud = pc.PointCloud(rng.uniform(-1, 1, size=(50, 3)))
    worst = 0.0
    with tempfile.TemporaryDirectory() as tmp:
        for fmt, suffix in (("OFF", ".off"), ("PLY_ASCII", ".ply"), ("XYZ", ".xyz")):
            path = Path(tmp) / f"cloud{suffix}"
            pc.save_cloud(cloud, path, fmt)
            back = pc.load_cloud(path, fmt)
            worst = max(worst, np.abs(back.points - cloud.points).max())
        labeled = pc.LabeledCloud(cloud, rng.integers(0, 4, size=50), rng.uniform(size=50))
        ply = Path(tmp) / "labeled.ply"
        pc.export_labeled_ply(labeled, ply, pc.default_palette(4))
        back = pc.load_cloud(ply)
        worst = max(worst, np.abs(back.points - cloud.points).max())
    return worst < 1e-6, f"max round-trip coordinate error {worst:.2e} (<1e-6)"


def check_normalize(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(79)
    cloud = pc.PointCloud(rng.normal(size=(100, 3)) * 4 + 2)
    once = pc.normalize(cloud)
    twice = pc.normalize(once)
    centroid = np.abs(once.points.mean(axis=0)).max()
    max_norm = np.linalg.norm(once.points, axis=1).max()
    idem = np.abs(twice.points - once.points).max()
    ok = centroid < 1e-9 and abs(max_norm - 1.0) < 1e-9 and idem < 1e-9
    return ok, f"centroid {centroid:.1e}, max norm err {abs(max_norm-1):.1e}, idempotence {idem:.1e}"


def check_determinism(fast: bool) -> tuple[bool, str]:
    rng = np.random.default_rng(83)
    cloud = pc.PointCloud(rng.normal(size=(64, 3)))
    a = pc.downsample_random(cloud, 32, seed=9).points
    b = pc.downsample_random(cloud, 32, seed=9).points
    cfg = enc.EncoderConfig(hidden_sizes=(8,), feature_dim=8, num_clusters=4)
    pa = enc.init_params(cfg, 1)
    pb = enc.init_params(cfg, 1)
    same_params = all(np.array_equal(pa.tensors[k], pb.tensors[k]) for k in pa.tensors)
    clouds = [pc.normalize(ball_cloud(rng, 32)) for _ in range(4)]
    config = TrainConfig(epochs=2, batch_size=2, seed=4,
                         solver=SolverConfig(num_clusters=4),
                         encoder=cfg)
    s1 = pretrain(clouds, config)
    s2 = pretrain(clouds, config)
    same_train = all(np.array_equal(s1.params.tensors[k], s2.params.tensors[k])
                     for k in s1.params.tensors)
    ok = np.array_equal(a, b) and same_params and same_train
    return ok, f"downsample={np.array_equal(a, b)}, init={same_params}, pretrain={same_train}"


_FAST_CHECKS = [
    ("sinkhorn-feasibility", check_sinkhorn_feasibility),
    ("sinkhorn-vs-lp", check_lp_gap),
    ("gradient-exactness", check_gradients),
    ("equipartition", check_equipartition),
    ("blob-purity", check_blob_purity),
    ("l2-vs-ot", check_l2_vs_ot),
]

_FULL_CHECKS = _FAST_CHECKS + [
    ("cost-shift-invariance", check_cost_shift),
    ("lambda-endpoints", check_lambda_endpoints),
    ("permutation-equivariance", check_permutation_equivariance),
    ("io-round-trip", check_io_round_trip),
    ("normalize", check_normalize),
    ("determinism", check_determinism),
]


def run_checks(level: str = "fast") -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    checks = _FAST_CHECKS if level == "fast" else _FULL_CHECKS
    results = []
    for name, fn in checks:
        start = time.perf_counter()
        try:
            passed, detail = fn(level == "fast")
        except Exception as exc:  # a crashed check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - start))
    return results

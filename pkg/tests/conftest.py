import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ball_points(rng, n):
    """Uniform points in the unit ball."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def two_blob_points(rng, per_blob, radius=0.05):
    """Two well-separated equal blobs on the x axis; returns (points, membership)."""
    centers = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    pts = np.concatenate([
        centers[k] + np.clip(rng.normal(scale=radius / 2, size=(per_blob, 3)), -radius, radius)
        for k in range(2)
    ])
    membership = np.repeat([0, 1], per_blob)
    return pts, membership

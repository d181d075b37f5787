"""Per-point feature encoder and segmentation head with exact gradients.

The encoder is a weight-shared MLP applied to every point (PointNet-style),
optionally concatenated with a max-pooled global feature before a single
linear head that produces per-cluster logits. Forward retains every
intermediate needed for an analytic backward pass; no autodiff framework
is involved, which keeps gradients exact and runs bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import CheckpointError, ConfigError, ShapeError

CHECKPOINT_MAGIC = b"OTCLUCKP"
CHECKPOINT_VERSION = 1

IN_DIM = 3


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the point MLP and segmentation head."""

    hidden_sizes: tuple[int, ...] = (64, 128)
    feature_dim: int = 128
    num_clusters: int = 64
    global_context: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.hidden_sizes)
        object.__setattr__(self, "hidden_sizes", sizes)
        if any(s <= 0 for s in sizes) or self.feature_dim <= 0:
            raise ConfigError(f"layer sizes must be positive, got {sizes} -> {self.feature_dim}")
        if self.num_clusters < 2:
            raise ConfigError(f"need at least 2 clusters, got {self.num_clusters}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (IN_DIM, *self.hidden_sizes, self.feature_dim)

    @property
    def head_in_dim(self) -> int:
        return self.feature_dim * (2 if self.global_context else 1)


@dataclass
class EncoderParams:
    """Named parameter tensors plus the architecture they belong to.

    `lambda_raw` is the pre-sigmoid value of the geometry/feature blending
    weight; it only participates in training when the solver config asks
    for a learned blend.
    """

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @property
    def lam(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.tensors["lambda_raw"])))


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, kept for backward."""

    inputs: np.ndarray                 # (N, 3)
    pre_acts: list                     # per MLP layer, (N, out)
    acts: list                         # per MLP layer after activation
    features: np.ndarray               # (N, d)
    pooled: np.ndarray | None          # (d,) max over points, if context on
    pool_rows: np.ndarray | None       # argmax row per feature dim
    head_input: np.ndarray             # (N, d) or (N, 2d)
    logits: np.ndarray                 # (N, J)
    scores: np.ndarray                 # (N, J), rows sum to 1


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    sizes = config.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"mlp{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"mlp{i}.b"] = np.zeros(fan_out)
    bound = 1.0 / np.sqrt(config.head_in_dim)
    tensors["head.w"] = rng.uniform(-bound, bound, size=(config.head_in_dim, config.num_clusters))
    tensors["head.b"] = np.zeros(config.num_clusters)
    tensors["lambda_raw"] = np.asarray(0.0)
    return EncoderParams(config=config, tensors=tensors)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def forward(params: EncoderParams, cloud) -> ForwardTrace:
    """Run the encoder and head; returns scores with rows summing to 1.

    Hidden layers use ReLU; the final feature layer is linear. With global
    context on, the head sees each point's feature concatenated with the
    per-dimension max over all points (ties at the max resolve to the
    lowest row index when gradients are routed back).
    """
    x = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != IN_DIM:
        raise ShapeError(f"expected (N, {IN_DIM}) input, got {x.shape}")
    cfg = params.config
    t = params.tensors

    pre_acts, acts = [], []
    a = x
    n_layers = len(cfg.layer_sizes) - 1
    for i in range(n_layers):
        z = a @ t[f"mlp{i}.w"] + t[f"mlp{i}.b"]
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(a)
    features = a

    if cfg.global_context:
        pool_rows = features.argmax(axis=0)
        pooled = features[pool_rows, np.arange(features.shape[1])]
        head_input = np.concatenate(
            [features, np.broadcast_to(pooled, features.shape)], axis=1
        )
    else:
        pool_rows = None
        pooled = None
        head_input = features

    logits = head_input @ t["head.w"] + t["head.b"]
    scores = _softmax_rows(logits)
    return ForwardTrace(
        inputs=x, pre_acts=pre_acts, acts=acts, features=features,
        pooled=pooled, pool_rows=pool_rows, head_input=head_input,
        logits=logits, scores=scores,
    )


def backward(trace: ForwardTrace, params: EncoderParams, d_scores: np.ndarray,
             d_features: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. every parameter.

    d_scores and d_features are the loss gradients at the score matrix and
    the feature matrix. The max-pool subgradient routes each pooled
    dimension's gradient to the argmax row recorded in the trace.
    """
    cfg = params.config
    t = params.tensors
    n, d = trace.features.shape
    if d_scores.shape != trace.scores.shape:
        raise ShapeError(f"d_scores shape {d_scores.shape} != scores shape {trace.scores.shape}")
    if d_features.shape != trace.features.shape:
        raise ShapeError(f"d_features shape {d_features.shape} != features shape {trace.features.shape}")

    grads = params.zeros_like()
    s = trace.scores
    d_logits = s * (d_scores - (d_scores * s).sum(axis=1, keepdims=True))

    grads["head.w"] = trace.head_input.T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0)
    d_head_input = d_logits @ t["head.w"].T

    if cfg.global_context:
        d_feat = d_head_input[:, :d].copy()
        d_pooled = d_head_input[:, d:].sum(axis=0)
        d_feat[trace.pool_rows, np.arange(d)] += d_pooled
    else:
        d_feat = d_head_input.copy()
    d_feat += d_features

    n_layers = len(cfg.layer_sizes) - 1
    d_a = d_feat
    for i in reversed(range(n_layers)):
        d_z = d_a if i == n_layers - 1 else d_a * (trace.pre_acts[i] > 0.0)
        below = trace.inputs if i == 0 else trace.acts[i - 1]
        grads[f"mlp{i}.w"] = below.T @ d_z
        grads[f"mlp{i}.b"] = d_z.sum(axis=0)
        d_a = d_z @ t[f"mlp{i}.w"].T
    return grads


def save_checkpoint(params: EncoderParams, path, meta: dict | None = None) -> None:
    """Write parameters to a flat, byte-deterministic container.

    Layout: 8-byte magic, uint32 format version, uint64 header length, a
    canonical-JSON header describing config/meta and every tensor's dtype,
    shape and offset, then the raw little-endian tensor bytes.
    """
    names = sorted(params.tensors)
    blobs, entries, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "hidden_sizes": list(params.config.hidden_sizes),
            "feature_dim": params.config.feature_dim,
            "num_clusters": params.config.num_clusters,
            "global_context": params.config.global_context,
        },
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    """Read a checkpoint written by save_checkpoint; returns (params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        data = fh.read()
    cfg = header["config"]
    config = EncoderConfig(
        hidden_sizes=tuple(cfg["hidden_sizes"]),
        feature_dim=cfg["feature_dim"],
        num_clusters=cfg["num_clusters"],
        global_context=cfg["global_context"],
    )
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    expected = {f"mlp{i}.{p}" for i in range(len(config.layer_sizes) - 1) for p in ("w", "b")}
    expected |= {"head.w", "head.b", "lambda_raw"}
    if set(tensors) != expected:
        raise CheckpointError(f"{path}: tensor set does not match architecture")
    return EncoderParams(config=config, tensors=tensors), header["meta"]

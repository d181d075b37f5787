"""EM-style self-training loop.

E-step: run the encoder, build prototypes and the blended cost, and solve
the balanced transport problem for soft labels (on a constant copy of the
cost; no gradient flows through the solver or the labels). M-step: average
the loss gradients over a batch of clouds and apply one AdamW update with
decoupled weight decay. Learning rate follows a step-decay schedule.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .clustering import (SolverConfig, SoftLabels, Prototypes, assign_soft_labels,
                         compute_cost, compute_prototypes, prototypes_backward, sinkhorn)
from .encoder import EncoderConfig, EncoderParams, ForwardTrace
from .errors import ConfigError, NumericalError
from .losses import total_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    lr_decay: float = 0.7
    decay_every: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eta: float = 0.01
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    solver: SolverConfig = field(default_factory=SolverConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr", "lr_decay", "beta1", "beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.weight_decay < 0 or self.eta < 0:
            raise ConfigError("weight_decay and eta must be non-negative")


@dataclass
class EStepResult:
    """Everything one E-step produces for a single cloud."""

    trace: ForwardTrace
    protos: Prototypes
    gamma: SoftLabels
    marginal_residual: float


@dataclass
class TrainState:
    config: TrainConfig
    params: EncoderParams
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    lr: float = 0.0
    history: list = field(default_factory=list)
    epoch_reports: list = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        params = enc.init_params(config.encoder, config.seed)
        return cls(config=config, params=params, m=params.zeros_like(),
                   v=params.zeros_like(), lr=config.lr)


def e_step(params: EncoderParams, cloud, solver: SolverConfig) -> EStepResult:
    """Forward pass, prototypes, cost, and balanced soft-label assignment.

    The cost matrix handed to the transport solver is a constant: the
    returned labels carry no gradient information.
    """
    trace = enc.forward(params, cloud)
    protos = compute_prototypes(cloud, trace.features, trace.scores)
    lam = params.lam if solver.learn_lambda else solver.lam
    cost = compute_cost(cloud, trace.features, protos, lam)
    plan = sinkhorn(cost, epsilon=solver.epsilon, iters=solver.iters, tol=solver.tol)
    gamma = assign_soft_labels(plan, trace.scores.shape[0])
    return EStepResult(trace=trace, protos=protos, gamma=gamma,
                       marginal_residual=plan.marginal_residual())


def m_step(state: TrainState, batch: list[EStepResult]) -> TrainState:
    """One AdamW update from the batch-mean loss gradient."""
    if not batch:
        raise ValueError("m_step needs a non-empty batch")
    cfg = state.config
    grads = state.params.zeros_like()
    scale = 1.0 / len(batch)
    for item in batch:
        report, d_scores, d_geo, d_feat = total_loss(
            item.gamma, item.trace.scores, item.protos, eta=cfg.eta)
        if not np.isfinite(report.l_total):
            raise NumericalError(
                f"non-finite loss at step {state.step}, epoch {state.epoch}: "
                f"l_soft={report.l_soft} l_orth={report.l_orth}")
        ds_proto, df_proto = prototypes_backward(
            item.trace.inputs, item.trace.features, item.trace.scores,
            item.protos, d_geo, d_feat)
        cloud_grads = enc.backward(item.trace, state.params,
                                   d_scores + ds_proto, df_proto)
        for name, g in cloud_grads.items():
            grads[name] += scale * g
        state.epoch_reports.append(report)

    _adamw_update(state, grads)
    state.step += 1
    return state


def _adamw_update(state: TrainState, grads: dict) -> None:
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, theta in state.params.tensors.items():
        if name == "lambda_raw" and not cfg.solver.learn_lambda:
            continue
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + cfg.adam_eps)
        decay = 0.0 if name == "lambda_raw" else cfg.weight_decay * theta
        state.params.tensors[name] = theta - state.lr * (update + decay)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: lr * decay^(epoch // decay_every), 0-indexed."""
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


def pretrain(clouds: list, config: TrainConfig, checkpoint_dir=None,
             checkpoint_meta: dict | None = None, on_epoch=None,
             threads: int = 1) -> TrainState:
    """Run the full EM loop over a dataset of prepared point clouds.

    Clouds are shuffled every epoch under the run seed. E-steps within a
    batch may run on `threads` workers (results are ordered, and identical
    to the single-threaded run); the M-step update is sequential. With
    threads=1 the whole run is bit-reproducible for a fixed seed.

    `on_epoch` is called with the metrics dict after each epoch. When
    `checkpoint_dir` is set, checkpoints are written every
    `config.checkpoint_every` epochs (if nonzero) and at the end.
    """
    if not clouds:
        raise ValueError("pretrain needs at least one cloud")
    state = TrainState.initial(config)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lr = lr_at_epoch(config, epoch)
        state.epoch_reports = []
        order = shuffle_rng.permutation(len(clouds))
        residuals = []
        for start in range(0, len(order), config.batch_size):
            chunk = [clouds[i] for i in order[start:start + config.batch_size]]
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    batch = list(pool.map(
                        lambda c: e_step(state.params, c, config.solver), chunk))
            else:
                batch = [e_step(state.params, c, config.solver) for c in chunk]
            residuals.extend(item.marginal_residual for item in batch)
            m_step(state, batch)

        reports = state.epoch_reports
        metrics = {
            "epoch": epoch,
            "l_soft": float(np.mean([r.l_soft for r in reports])),
            "l_orth": float(np.mean([r.l_orth for r in reports])),
            "l_total": float(np.mean([r.l_total for r in reports])),
            "lr": state.lr,
            "max_marginal_residual": float(max(residuals)),
        }
        state.history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        if checkpoint_dir is not None and config.checkpoint_every > 0 \
                and (epoch + 1) % config.checkpoint_every == 0:
            _write_checkpoint(state, checkpoint_dir,
                              f"checkpoint_epoch{epoch:04d}.otck", checkpoint_meta)

    if checkpoint_dir is not None:
        _write_checkpoint(state, checkpoint_dir, "checkpoint_final.otck", checkpoint_meta)
    return state


def _write_checkpoint(state: TrainState, directory, filename: str,
                      meta: dict | None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / filename
    tmp = directory / (filename + ".tmp")
    full_meta = dict(meta or {})
    full_meta.update({"epoch": state.epoch, "step": state.step})
    enc.save_checkpoint(state.params, tmp, meta=full_meta)
    os.replace(tmp, target)
    return target

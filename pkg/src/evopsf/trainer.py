"""Offline pretraining of the driving model on source-domain scenes."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import N_MODES, BatchOutput, ModelParameters, forward_batch
from .worldsim import PLAN_HORIZON, Scene, SceneFrame, SensorFrame

log = logging.getLogger(__name__)

CONFIDENCE_RADIUS = 1.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_finite_step: int):
        super().__init__(f"{message} (last finite step {last_finite_step})")
        self.last_finite_step = last_finite_step


@dataclass
class LossWeights:
    detection: float = 1.0
    confidence: float = 1.0
    prediction: float = 1.0
    plan_reg: float = 1.0
    plan_score: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 2
    lr_pretrain: float = 1e-3
    momentum: float = 0.9
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    clip_norm: float = 5.0
    teacher_forcing: float = 1.0  # share of batches whose planner reads true futures

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.lr_pretrain <= 0:
            raise ValueError("lr_pretrain must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def _targets(sensors: Sequence[SensorFrame], frames: Sequence[SceneFrame]):
    states, futures = [], []
    for sensor, frame in zip(sensors, frames):
        index = {a.id: k for k, a in enumerate(frame.agents)}
        for agent_id in sensor.agent_ids:
            a = frame.agents[index[agent_id]]
            states.append((*a.position, *a.velocity))
            futures.append(frame.agent_future_gt[index[agent_id]])
    n = len(states)
    return np.array(states, dtype=np.float64).reshape(n, 4), np.array(futures, dtype=np.float64).reshape(n, -1, 2)


def closest_modes(plan: np.ndarray, ego_future: np.ndarray) -> np.ndarray:
    """Index of the mode nearest (summed squared error) to the ground truth, per frame."""
    err = ((plan - ego_future[:, None]) ** 2).sum(axis=(2, 3))
    return np.argmin(err, axis=1)


def training_losses(outputs: BatchOutput, frames: Sequence[SceneFrame],
                    weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the five pretraining terms for a batch of frames."""
    states, futures = _targets(outputs.sensors, frames)
    parts: dict[str, Tensor] = {}
    if len(states):
        det = ad.concatenate([outputs.det_xy, outputs.det_vel], axis=1)
        parts["detection"] = ad.mse(det, states)
        err = np.linalg.norm(outputs.det_xy.data - states[:, :2], axis=1)
        labels = (err < CONFIDENCE_RADIUS).astype(np.float64)[:, None]
        parts["confidence"] = ad.binary_cross_entropy(outputs.conf_logit, labels)
        parts["prediction"] = ad.mse(outputs.pred, futures)
    ego_future = np.array([f.ego_future_gt for f in frames])
    n_frames = len(frames)
    winners = closest_modes(outputs.plan.data, ego_future)
    onehot = np.zeros((n_frames, N_MODES))
    onehot[np.arange(n_frames), winners] = 1.0
    mask = np.broadcast_to(onehot[:, :, None, None], outputs.plan.shape).copy()
    target = np.broadcast_to(ego_future[:, None], outputs.plan.shape).copy()
    sq = ad.square(ad.sub(outputs.plan, ad.tensor(target)))
    parts["plan_reg"] = ad.mul(ad.tsum(ad.mul(sq, ad.tensor(mask))), 1.0 / (n_frames * PLAN_HORIZON * 2))
    logp = ad.log_softmax_rows(outputs.scores)
    parts["plan_score"] = ad.mul(ad.tsum(ad.mul(logp, ad.tensor(onehot))), -1.0 / n_frames)

    total = None
    for name, term in parts.items():
        w = getattr(weights, name)
        if w == 0:
            continue
        weighted = ad.mul(term, w)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        total = ad.tensor(0.0)
    return total, {name: term.item() for name, term in parts.items()}


def _clip(params: list[Tensor], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


@dataclass
class PretrainResult:
    params: ModelParameters
    loss_curve: list[float]
    component_curve: list[dict[str, float]]
    config: TrainConfig


def pretrain(config: TrainConfig, scenes: Sequence[Scene], init: ModelParameters | None = None) -> PretrainResult:
    """Momentum gradient descent over shuffled scene mini-batches.

    The recorded curve holds the mean total loss of each epoch.
    """
    if not scenes:
        raise ValueError("pretrain: empty scene collection")
    params = init.copy() if init is not None else ModelParameters.initialize(config.seed)
    tensors = params.params()
    velocity = [np.zeros_like(p.data) for p in tensors]
    rng = np.random.default_rng(config.seed + 1)
    curve, components = [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        totals, parts_acc = [], {}
        for start in range(0, len(order), config.batch_size):
            batch = [scenes[i] for i in order[start:start + config.batch_size]]
            frames = [f for scene in batch for f, _ in scene.frames]
            sensors = [s for scene in batch for _, s in scene.frames]
            teacher = None
            if config.teacher_forcing and rng.random() < config.teacher_forcing:
                teacher = _targets(sensors, frames)[1]
            out = forward_batch(params, sensors, teacher)
            loss, parts = training_losses(out, frames, config.loss_weights)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", step - 1)
            params.zero_grads()
            ad.backward(loss)
            _clip(tensors, config.clip_norm)
            for p, v in zip(tensors, velocity):
                v *= config.momentum
                v -= config.lr_pretrain * p.grad
                p.data += v
            params.zero_grads()
            if not params.all_finite():
                raise TrainingError(f"parameters diverged at epoch {epoch}", step - 1)
            step += 1
            totals.append(value)
            for k, v in parts.items():
                parts_acc.setdefault(k, []).append(v)
        curve.append(float(np.mean(totals)))
        components.append({k: float(np.mean(v)) for k, v in parts_acc.items()})
        log.debug("epoch %d loss %.4f", epoch, curve[-1])
    return PretrainResult(params, curve, components, config)

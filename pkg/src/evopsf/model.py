"""Toy modular driving model: shared encoder, perception, prediction, planning.

Every agent (and the ego) is encoded independently from its flattened
observation window. Perception regresses the agent's current centre and
velocity plus a confidence logit. Prediction lets agents attend to each other
before decoding cumulative waypoint offsets. Planning uses the ego embedding
as the single attention query over the agents; its weight row is what
top-k selection consumes.

Frames are processed in batches: rows of all frames are stacked and
attention is restricted to rows of the same frame with a block mask, so one
graph serves a whole mini-batch during pretraining.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .worldsim import DT, HISTORY, PLAN_HORIZON, PRED_HORIZON, SensorFrame, VEHICLE_LENGTH, VEHICLE_WIDTH

WIDTH = 64
N_MODES = 6
INPUT_DIM = HISTORY * 4
POS_SCALE = 40.0
SHAPE_SCALE = 1.0
DET_SCALE = 2.0
VEL_SCALE = 10.0
STEP_SCALE = 5.0
LANE_SCALE = 3.5
N_POSE = 7  # relative pose features seen by the planner keys
RESIDUAL_SCALE = 1.0
_REPEAT_STEPS = np.tile(np.eye(2), (1, PRED_HORIZON))
_MODE_TILE = np.kron(np.eye(N_MODES), np.ones((1, PLAN_HORIZON * 2)))
_STEP_TILE = np.tile(np.eye(PLAN_HORIZON * 2), (1, N_MODES))
NOMINAL_HEIGHT = 1.5

GROUPS = ("shared_encoder", "perception_head", "prediction_head", "planner_head")

# track = observed history followed by the forecast; the mix starts as a copy of the forecast
TRACK = HISTORY + PRED_HORIZON
_INITIAL = {
    "plan.mix": np.vstack([np.zeros((HISTORY * 2, PLAN_HORIZON * 2)), np.eye(PRED_HORIZON * 2, PLAN_HORIZON * 2)]),
    # near, in lane, same speed, ahead
    "plan.pose": np.array([[-5.0], [0.0], [-4.0], [0.0], [0.0], [-10.0], [-6.0]]),
}


_SHAPES = {
    "shared_encoder": {
        "enc.w1": (INPUT_DIM, WIDTH), "enc.b1": (WIDTH,),
        "enc.w2": (WIDTH, WIDTH), "enc.b2": (WIDTH,),
    },
    "perception_head": {
        "det.w": (WIDTH, 5), "det.b": (5,),
    },
    "prediction_head": {
        "pred.wq": (WIDTH, WIDTH), "pred.wk": (WIDTH, WIDTH), "pred.wv": (WIDTH, WIDTH),
        "pred.w1": (WIDTH, WIDTH), "pred.b1": (WIDTH,),
        "pred.w2": (WIDTH, 2 + PRED_HORIZON * 2), "pred.b2": (2 + PRED_HORIZON * 2,),
    },
    "planner_head": {
        "plan.ego1": (INPUT_DIM, WIDTH), "plan.ego_b1": (WIDTH,),
        "plan.ego2": (WIDTH, WIDTH), "plan.ego_b2": (WIDTH,),
        "plan.wq": (WIDTH, WIDTH), "plan.mix": (TRACK * 2, PLAN_HORIZON * 2), "plan.pose": (N_POSE, 1), "plan.wk": (WIDTH + N_POSE, WIDTH),
        "plan.wv": (PRED_HORIZON * 2, WIDTH),
        "plan.w1": (2 * WIDTH, WIDTH), "plan.b1": (WIDTH,),
        "plan.w2": (WIDTH, N_MODES * (PLAN_HORIZON * 2 + 2)), "plan.b2": (N_MODES * (PLAN_HORIZON * 2 + 2),),
    },
}

UPDATE_SCOPES = {
    "prediction_path": ("shared_encoder", "prediction_head"),
    "all_params": GROUPS,
}


@dataclass
class ModelParameters:
    tensors: dict[str, Tensor]
    step_count: int = 0

    @classmethod
    def initialize(cls, seed: int) -> ModelParameters:
        rng = np.random.default_rng(seed)
        tensors = {}
        for group in GROUPS:
            for name, shape in _SHAPES[group].items():
                if name in _INITIAL:
                    data = _INITIAL[name].copy()
                elif len(shape) == 1:
                    data = np.zeros(shape)
                else:
                    data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
                tensors[name] = ad.parameter(data)
        return cls(tensors)

    @staticmethod
    def group_of(name: str) -> str:
        for group in GROUPS:
            if name in _SHAPES[group]:
                return group
        raise KeyError(name)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, groups: Sequence[str] = GROUPS) -> list[str]:
        return [n for n in self.tensors if self.group_of(n) in groups]

    def params(self, groups: Sequence[str] = GROUPS) -> list[Tensor]:
        return [self.tensors[n] for n in self.names(groups)]

    def scope(self, update_scope: str) -> list[Tensor]:
        return self.params(UPDATE_SCOPES[update_scope])

    def counts(self) -> dict[str, int]:
        return {g: sum(t.size for t in self.params((g,))) for g in GROUPS}

    def copy(self) -> ModelParameters:
        return ModelParameters({n: ad.parameter(t.data.copy()) for n, t in self.tensors.items()}, self.step_count)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def zero_grads(self) -> None:
        ad.zero_grads(self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def save(self, path: str | Path) -> None:
        payload = dict(self.tensors)
        payload["__step_count__"] = np.array([float(self.step_count)])
        ad.save_tensors(path, payload)

    @classmethod
    def load(cls, path: str | Path) -> ModelParameters:
        raw = ad.load_tensors(path)
        step = int(raw.pop("__step_count__", np.zeros(1))[0])
        expected = {n for g in GROUPS for n in _SHAPES[g]}
        if set(raw) != expected:
            raise ValueError(f"checkpoint tensors {sorted(set(raw) ^ expected)} do not match the model")
        return cls({n: ad.parameter(raw[n]) for n in sorted(expected, key=_order)}, step)


def _order(name: str) -> int:
    flat = [n for g in GROUPS for n in _SHAPES[g]]
    return flat.index(name)


# module outputs -------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    agent_id: int
    bbox: np.ndarray  # (x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz)
    confidence: float

    @property
    def center(self) -> np.ndarray:
        return self.bbox[:2]


@dataclass(frozen=True)
class DetectionSet:
    t: int
    detections: tuple[Detection, ...]

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.detections)

    @property
    def agent_ids(self) -> list[int]:
        return [d.agent_id for d in self.detections]

    def get(self, agent_id: int) -> Detection | None:
        for d in self.detections:
            if d.agent_id == agent_id:
                return d
        return None

    def centers(self) -> np.ndarray:
        return np.array([d.center for d in self.detections], dtype=np.float64).reshape(-1, 2)


@dataclass
class PredictionOutput:
    """Per-agent future waypoints in world coordinates; still attached to the graph."""

    agent_ids: tuple[int, ...]
    waypoints: Tensor  # [n, Q, 2]

    def trajectories(self) -> np.ndarray:
        return self.waypoints.data.copy()

    def index(self, agent_id: int) -> int:
        return self.agent_ids.index(agent_id)

    def first_waypoint(self, agent_id: int) -> Tensor:
        return self.waypoints[self.index(agent_id), 0]


@dataclass
class PlanOutput:
    candidates: np.ndarray  # [M, P, 2] world
    raw_scores: np.ndarray  # [M]
    attention_row: np.ndarray  # [N] detached ego->agent weights
    agent_ids: tuple[int, ...]
    scores: Tensor | None = field(default=None, repr=False)  # graph node behind raw_scores

    @property
    def n_modes(self) -> int:
        return int(self.raw_scores.shape[0])


@dataclass
class FrameOutput:
    detections: DetectionSet
    prediction: PredictionOutput
    plan: PlanOutput
    no_agents: bool


def chosen_plan(plan: PlanOutput) -> np.ndarray:
    """Candidate with the highest raw score; ties go to the lowest mode index."""
    if plan.n_modes < 1:
        raise ValueError("chosen_plan: no candidates")
    return plan.candidates[int(np.argmax(plan.raw_scores))]


# forward ---------------------------------------------------------------------


def _window_features(window: np.ndarray) -> np.ndarray:
    """Flatten ``[n, H, 4]`` windows whose positions are relative to the ego.

    The newest sample keeps its ego-relative position. Each older position is
    replaced by its deviation from a constant-velocity back-extrapolation of
    the newest sample. This is a linear reparametrisation of the same window
    that keeps smooth motion near zero and makes jitter stand out.
    """
    pos, vel = window[..., :2], window[..., 2:]
    last = pos[:, -1:, :]
    lags = np.arange(HISTORY - 1, 0, -1, dtype=np.float64)[None, :, None] * DT
    deviation = pos[:, :-1] - (last - vel[:, -1:, :] * lags)
    shape = np.concatenate([deviation / SHAPE_SCALE, last / POS_SCALE], axis=1)
    feats = np.concatenate([shape, vel / VEL_SCALE], axis=-1)
    return feats.reshape(len(window), INPUT_DIM)


def agent_features(sensor: SensorFrame) -> np.ndarray:
    return _window_features(sensor.observations.reshape(-1, HISTORY, 4))


def ego_features(sensor: SensorFrame) -> np.ndarray:
    hist = sensor.ego_history.copy()
    hist[:, :2] -= sensor.ego_position
    return _window_features(hist[None])


@dataclass
class BatchOutput:
    """Stacked outputs of several frames; row ranges are recorded in ``spans``."""

    sensors: list[SensorFrame]
    spans: list[tuple[int, int]]
    det_xy: Tensor  # [A, 2] world
    det_vel: Tensor  # [A, 2]
    conf_logit: Tensor  # [A, 1]
    pred: Tensor  # [A, Q, 2] world
    plan: Tensor  # [B, M, P, 2] world
    scores: Tensor  # [B, M]
    attention: np.ndarray  # [B, A]

    def frame(self, b: int) -> FrameOutput:
        lo, hi = self.spans[b]
        sensor = self.sensors[b]
        ids = tuple(sensor.agent_ids)
        detections = _detections(sensor.t, ids, self.det_xy.data[lo:hi], self.det_vel.data[lo:hi],
                                 self.conf_logit.data[lo:hi, 0])
        pred = PredictionOutput(ids, self.pred[lo:hi] if len(self.spans) > 1 else self.pred)
        scores = self.scores[b]
        plan = PlanOutput(self.plan.data[b].copy(), scores.data.copy(), self.attention[b, lo:hi].copy(), ids, scores)
        return FrameOutput(detections, pred, plan, no_agents=hi == lo)


def _detections(t: int, ids: Sequence[int], xy: np.ndarray, vel: np.ndarray, logits: np.ndarray) -> DetectionSet:
    out = []
    for k, agent_id in enumerate(ids):
        vx, vy = vel[k]
        speed = math.hypot(vx, vy)
        sin_yaw, cos_yaw = (vy / speed, vx / speed) if speed > 1e-6 else (0.0, 1.0)
        bbox = np.array([xy[k, 0], xy[k, 1], 0.0, VEHICLE_WIDTH, VEHICLE_LENGTH, NOMINAL_HEIGHT,
                         sin_yaw, cos_yaw, vx, vy, 0.0])
        conf = 0.5 * (1.0 + math.tanh(0.5 * float(logits[k])))
        out.append(Detection(int(agent_id), bbox, conf))
    return DetectionSet(t, tuple(out))


def _planner_encode(params: ModelParameters, features: np.ndarray) -> Tensor:
    x = ad.tanh(ad.linear(ad.tensor(features), params["plan.ego1"], params["plan.ego_b1"]))
    return ad.tanh(ad.linear(x, params["plan.ego2"], params["plan.ego_b2"]))


def _encode(params: ModelParameters, sensors: Sequence[SensorFrame]):
    """Agent embeddings from the shared encoder stacked above ego embeddings from the planner's own encoder."""
    n_agents = sum(s.n_visible for s in sensors)
    ego = _planner_encode(params, np.concatenate([ego_features(s) for s in sensors], axis=0))
    if not n_agents:
        return ego, 0
    x = ad.tensor(np.concatenate([agent_features(s) for s in sensors if s.n_visible], axis=0))
    h = ad.tanh(ad.linear(x, params["enc.w1"], params["enc.b1"]))
    h = ad.tanh(ad.linear(h, params["enc.w2"], params["enc.b2"]))
    return ad.concatenate([h, ego], axis=0), n_agents


def _spans(sensors: Sequence[SensorFrame]) -> list[tuple[int, int]]:
    spans, lo = [], 0
    for s in sensors:
        spans.append((lo, lo + s.n_visible))
        lo += s.n_visible
    return spans


def _relative_pose(sensors: Sequence[SensorFrame]) -> np.ndarray:
    """Planner key features: each agent's pose and motion relative to the ego, with squared terms.

    Columns: longitudinal distance, lateral offset and its square, relative
    velocity and its squared norm, and a flag for agents behind the ego.
    """
    rows = []
    for s in sensors:
        if not s.n_visible:
            continue
        last = s.observations[:, -1]
        lateral = last[:, 1] / LANE_SCALE
        dv = (last[:, 2:] - s.ego_history[-1, 2:]) / VEL_SCALE
        rows.append(np.column_stack([np.abs(last[:, 0]) / POS_SCALE, lateral, lateral ** 2,
                                     dv, (dv ** 2).sum(axis=1), (last[:, 0] < 0).astype(np.float64)]))
    return np.concatenate(rows) if rows else np.zeros((0, N_POSE))


def _world_offsets(sensors: Sequence[SensorFrame], spans, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent last observed world position and per-frame ego position, tiled over the horizon."""
    n = spans[-1][1] if spans else 0
    base = np.zeros((n, horizon, 2))
    ego = np.zeros((len(sensors), horizon, 2))
    for b, (s, (lo, hi)) in enumerate(zip(sensors, spans)):
        ego[b] = s.ego_position
        if hi > lo:
            base[lo:hi] = (s.observations[:, -1, :2] + s.ego_position)[:, None, :]
    return base, ego


def detect_batch(params: ModelParameters, sensors: Sequence[SensorFrame]):
    h, n_agents = _encode(params, sensors)
    spans = _spans(sensors)
    agents = h[:n_agents] if n_agents else None
    if agents is None:
        empty = ad.tensor(np.zeros((0, 2)))
        return spans, empty, empty, ad.tensor(np.zeros((0, 1))), h, n_agents
    raw = ad.linear(agents, params["det.w"], params["det.b"])
    last = np.concatenate([s.observations[:, -1, :] for s in sensors if s.n_visible])
    ego_pos = np.concatenate([np.repeat(s.ego_position[None], s.n_visible, axis=0) for s in sensors if s.n_visible])
    det_xy = ad.add(ad.mul(raw[:, 0:2], DET_SCALE), ad.tensor(last[:, :2] + ego_pos))
    det_vel = ad.add(ad.mul(raw[:, 2:4], DET_SCALE), ad.tensor(last[:, 2:]))
    return spans, det_xy, det_vel, raw[:, 4:5], h, n_agents


def forward_batch(params: ModelParameters, sensors: Sequence[SensorFrame],
                  teacher: np.ndarray | None = None) -> BatchOutput:
    """Batched forward pass.

    ``teacher`` optionally supplies world-frame futures [A, Q, 2] that the
    planner reads in place of the forecasts (used when pretraining).
    """
    sensors = list(sensors)
    spans, det_xy, det_vel, conf_logit, h, n_agents = detect_batch(params, sensors)
    n_frames = len(sensors)
    ego = h[n_agents:]
    frame_of = np.concatenate([np.full(s.n_visible, b) for b, s in enumerate(sensors)]).astype(int)
    base, ego_tile = _world_offsets(sensors, spans, PRED_HORIZON)
    steps_ahead = np.arange(1, PLAN_HORIZON + 1)[None, :, None]
    ego_cv = np.array([s.ego_history[-1, 2:] * DT for s in sensors])[:, None, :] * steps_ahead

    if n_agents:
        agents = h[:n_agents]
        same_frame = frame_of[:, None] == frame_of[None, :]
        q = ad.matmul(agents, params["pred.wq"])
        k = ad.matmul(agents, params["pred.wk"])
        v = ad.matmul(agents, params["pred.wv"])
        mixed, _ = ad.attention(q, k, v, same_frame)
        z = ad.add(agents, mixed)
        d = ad.tanh(ad.linear(z, params["pred.w1"], params["pred.b1"]))
        raw = ad.linear(d, params["pred.w2"], params["pred.b2"])
        # one shared velocity per agent plus small per-step residuals
        drift = ad.matmul(ad.mul(raw[:, 0:2], VEL_SCALE * DT), ad.tensor(_REPEAT_STEPS))
        steps = ad.add(drift, ad.mul(raw[:, 2:], RESIDUAL_SCALE))
        steps = ad.reshape(steps, (n_agents, PRED_HORIZON, 2))
        pred = ad.add(ad.cumsum(steps, axis=1), ad.tensor(base))
        seen = pred if teacher is None else ad.tensor(np.asarray(teacher, dtype=np.float64))

        ego_rows = np.concatenate([np.repeat(s.ego_position[None, None], s.n_visible, axis=0)
                                   for s in sensors if s.n_visible])
        rel_future = ad.mul(ad.sub(seen, ad.tensor(np.broadcast_to(ego_rows, pred.shape).copy())), 1.0 / POS_SCALE)
        forecast = ad.reshape(rel_future, (n_agents, PRED_HORIZON * 2))
        # each agent's observed and forecast displacement from its current position
        history = np.concatenate([s.observations[:, :, :2] - s.observations[:, -1:, :2] for s in sensors if s.n_visible])
        track = ad.concatenate([ad.tensor(history.reshape(n_agents, HISTORY * 2)),
                                ad.reshape(ad.sub(seen, ad.tensor(base)), (n_agents, PRED_HORIZON * 2))], axis=1)
        pq = ad.matmul(ego, params["plan.wq"])
        pose = _relative_pose(sensors)
        # keys come from the planner's own encoding, so adapting the prediction path moves the plan only via forecasts
        own_view = _planner_encode(params, np.concatenate([agent_features(s) for s in sensors if s.n_visible], axis=0))
        pk = ad.matmul(ad.concatenate([own_view, ad.tensor(pose)], axis=1), params["plan.wk"])
        pv = ad.concatenate([ad.matmul(forecast, params["plan.wv"]), track], axis=1)
        own = frame_of[None, :] == np.arange(n_frames)[:, None]
        # content logits plus a learned preference over relative pose
        logits = ad.mul(ad.matmul(pq, ad.transpose(pk)), 1.0 / math.sqrt(WIDTH))
        prior = ad.matmul(ad.tensor(np.ones((n_frames, 1))), ad.transpose(ad.matmul(ad.tensor(pose), params["plan.pose"])))
        attn = ad.softmax_rows(ad.add(logits, prior), own)
        attended, weights = ad.matmul(attn, pv), attn.data.copy()
        context = attended[:, :WIDTH]
        follow = ad.sub(ad.matmul(attended[:, WIDTH:], params["plan.mix"]),
                        ad.tensor(ego_cv.reshape(n_frames, PLAN_HORIZON * 2)))
    else:
        pred = ad.tensor(np.zeros((0, PRED_HORIZON, 2)))
        context = ad.tensor(np.zeros((n_frames, WIDTH)))
        follow = ad.tensor(np.zeros((n_frames, PLAN_HORIZON * 2)))
        weights = np.zeros((n_frames, 0))

    hidden = ad.tanh(ad.linear(ad.concatenate([ego, context], axis=1), params["plan.w1"], params["plan.b1"]))
    out = ad.linear(hidden, params["plan.w2"], params["plan.b2"])
    n_traj = N_MODES * PLAN_HORIZON * 2
    residual = ad.cumsum(ad.reshape(ad.mul(out[:, :n_traj], STEP_SCALE), (n_frames, N_MODES, PLAN_HORIZON, 2)), axis=2)
    scores = out[:, n_traj:n_traj + N_MODES]
    # each mode blends in the attended agent displacement with its own gate
    gate = ad.matmul(ad.sigmoid(out[:, n_traj + N_MODES:]), ad.tensor(_MODE_TILE))
    follow = ad.matmul(follow, ad.tensor(_STEP_TILE))
    blended = ad.reshape(ad.mul(gate, follow), (n_frames, N_MODES, PLAN_HORIZON, 2))
    anchor = np.array([s.ego_position for s in sensors])[:, None, None, :] + ego_cv[:, None]
    plan = ad.add(ad.add(residual, blended), ad.tensor(np.broadcast_to(anchor, residual.shape).copy()))
    return BatchOutput(sensors, spans, det_xy, det_vel, conf_logit, pred, plan, scores, weights)


def forward(params: ModelParameters, sensor: SensorFrame) -> FrameOutput:
    """Run all three modules on one frame.

    Detections and predictions share the visible-agent ordering. With no
    visible agent the outputs are empty, ``no_agents`` is set, and the plan
    comes from ego features alone.
    """
    return forward_batch(params, [sensor]).frame(0)


def detect_only(params: ModelParameters, sensor: SensorFrame) -> DetectionSet:
    """Encoder plus perception head; the returned values carry no graph."""
    _, det_xy, det_vel, logits, _, _ = detect_batch(params, [sensor])
    return _detections(sensor.t, sensor.agent_ids, det_xy.data, det_vel.data, logits.data[:, 0])

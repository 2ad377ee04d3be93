"""Deterministic 2-D kinematic multi-agent scenes with distribution-shift knobs.

The world is a straight multi-lane road running along +x. Vehicles follow
their lane leader with the intelligent driver model (IDM); pedestrians walk
along the sidewalks. Each agent carries an open-loop intent (cruise,
decelerate-at-junction, turn, stationary) layered on top of the car-following
rule. Region profiles shift the behaviour statistics; corruption levels shift
the observation model only.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

SCHEMA_VERSION = 1

DT = 0.5
PLAN_HORIZON = 6  # P
PRED_HORIZON = 6  # Q
HISTORY = 4  # H_obs

LANES = (-3.5, 0.0, 3.5)
LANE_HALF_WIDTH = 1.75
SIDEWALKS = (-6.5, 6.5)
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.9
PEDESTRIAN_SIZE = 0.7
DEGRADED_NOISE_SIGMA = 2.0
FOLLOW_DELAY = 2  # frames
FOLLOW_GAP = 4.0  # metres

KINDS = ("vehicle", "pedestrian")
BEHAVIORS = ("cruise", "decelerate-at-junction", "turn", "stationary")
EGO_ID = -1


class ConfigurationError(ValueError):
    """Scene or suite parameters are invalid."""


@dataclass(frozen=True)
class RegionProfile:
    name: str
    speed_mean: float
    speed_std: float
    turn_rate_mean: float
    pedestrian_fraction: float
    junction_density: int
    agent_count_range: tuple[int, int]

    def __post_init__(self):
        if self.speed_mean <= 0:
            raise ConfigurationError(f"profile {self.name}: speed_mean must be positive")
        if not 0.0 <= self.pedestrian_fraction <= 1.0:
            raise ConfigurationError(f"profile {self.name}: pedestrian_fraction outside [0, 1]")
        lo, hi = self.agent_count_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"profile {self.name}: bad agent_count_range {self.agent_count_range} (the lead makes at least one agent)")
        object.__setattr__(self, "agent_count_range", (int(lo), int(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> RegionProfile:
        d = dict(d)
        d["agent_count_range"] = tuple(d["agent_count_range"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent_count_range"] = list(self.agent_count_range)
        return d


@dataclass(frozen=True)
class CorruptionLevel:
    """Observation-model severity.

    ``confidence_degradation`` is the probability that an agent's whole
    observation window at a frame is degraded (occlusion, clutter), which adds
    :data:`DEGRADED_NOISE_SIGMA` of extra noise.
    """

    name: str
    obs_noise_sigma: float
    dropout_prob: float
    confidence_degradation: float

    def __post_init__(self):
        if self.obs_noise_sigma < 0:
            raise ConfigurationError(f"corruption {self.name}: negative noise")
        for attr in ("dropout_prob", "confidence_degradation"):
            if not 0.0 <= getattr(self, attr) <= 1.0:
                raise ConfigurationError(f"corruption {self.name}: {attr} outside [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> CorruptionLevel:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


REGION_A = RegionProfile("region_a", speed_mean=6.0, speed_std=1.2, turn_rate_mean=0.45,
                         pedestrian_fraction=0.2, junction_density=1, agent_count_range=(4, 8))
REGION_B = RegionProfile("region_b", speed_mean=10.0, speed_std=1.8, turn_rate_mean=0.1,
                         pedestrian_fraction=0.35, junction_density=2, agent_count_range=(5, 9))

CORRUPTIONS = {
    "none": CorruptionLevel("none", obs_noise_sigma=0.05, dropout_prob=0.0, confidence_degradation=0.1),
    "rain": CorruptionLevel("rain", obs_noise_sigma=0.15, dropout_prob=0.05, confidence_degradation=0.25),
    "fog": CorruptionLevel("fog", obs_noise_sigma=0.25, dropout_prob=0.1, confidence_degradation=0.35),
    "snow": CorruptionLevel("snow", obs_noise_sigma=0.4, dropout_prob=0.15, confidence_degradation=0.45),
}
NOISELESS = CorruptionLevel("noiseless", obs_noise_sigma=0.0, dropout_prob=0.0, confidence_degradation=0.0)


@dataclass(frozen=True)
class AgentState:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float]
    heading: float
    kind: str
    behavior: str

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True, eq=False)
class SceneFrame:
    t: int
    dt: float
    ego: AgentState
    agents: tuple[AgentState, ...]
    ego_future_gt: np.ndarray  # [P, 2]
    agent_future_gt: np.ndarray  # [n_agents, Q, 2], rows aligned with agents

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.agents]

    def future_of(self, agent_id: int) -> np.ndarray:
        return self.agent_future_gt[self.agent_ids.index(agent_id)]

    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.agents], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class SensorFrame:
    """Noisy agent histories relative to the ego plus exact ego odometry."""

    t: int
    agent_ids: tuple[int, ...]  # visible agents, ascending id
    observations: np.ndarray  # [n_visible, HISTORY, 4] of (x, y, vx, vy), positions relative to ego
    visible: np.ndarray  # bool [n_agents] aligned with the scene's agent list
    ego_position: np.ndarray  # [2] world
    ego_history: np.ndarray  # [HISTORY, 4] world (x, y, vx, vy)

    @property
    def n_visible(self) -> int:
        return len(self.agent_ids)


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: int
    profile: RegionProfile
    corruption: CorruptionLevel
    seed: int
    frames: tuple[tuple[SceneFrame, SensorFrame], ...]

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


# randomness --------------------------------------------------------------


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def keyed_rng(seed: int, scene: int, frame: int, agent: int, purpose: str) -> np.random.Generator:
    """Counter-style generator keyed by the full tuple, independent of call order."""
    key = [int(seed) & 0xFFFFFFFF, int(scene) & 0xFFFFFFFF, int(frame) + 1, int(agent) + 2, _purpose_code(purpose)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# dynamics ----------------------------------------------------------------

IDM_ACCEL = 1.5
IDM_DECEL = 2.0
IDM_HEADWAY = 1.2
IDM_MIN_GAP = 2.0
ACCEL_BOUNDS = (-6.0, 2.0)


def idm_acceleration(speed: float, desired: float, gap: float | None, closing: float) -> float:
    desired = max(desired, 0.1)
    free = 1.0 - (speed / desired) ** 4
    if gap is None:
        acc = IDM_ACCEL * free
    else:
        s_star = IDM_MIN_GAP + speed * IDM_HEADWAY + speed * closing / (2.0 * math.sqrt(IDM_ACCEL * IDM_DECEL))
        s_star = max(s_star, IDM_MIN_GAP)
        acc = IDM_ACCEL * (free - (s_star / max(gap, 0.1)) ** 2)
    return float(np.clip(acc, *ACCEL_BOUNDS))


@dataclass
class _Body:
    id: int
    kind: str
    behavior: str
    x: float
    y: float
    speed: float
    heading: float
    desired: float
    turn_rate: float = 0.0
    turn_onset: int = -1
    turn_frames: int = 0


def _leader(body: _Body, others: list[_Body]):
    best, best_dx = None, math.inf
    for o in others:
        if o is body or o.kind != "vehicle":
            continue
        dx = o.x - body.x
        if 0.0 < dx < best_dx and abs(o.y - body.y) < LANE_HALF_WIDTH:
            best, best_dx = o, dx
    return best, best_dx


def _next_junction(x: float, junctions: list[float]) -> float | None:
    ahead = [j - x for j in junctions if j - x >= 0.0]
    return min(ahead) if ahead else None


def _controls(body: _Body, bodies: list[_Body], junctions: list[float], step: int) -> tuple[float, float]:
    """(acceleration, yaw rate) for one body at one step."""
    if body.behavior == "stationary":
        return 0.0, 0.0
    omega = 0.0
    if body.behavior == "turn" and body.turn_onset <= step < body.turn_onset + body.turn_frames:
        if body.kind == "vehicle":
            half = body.turn_frames // 2
            omega = body.turn_rate if step < body.turn_onset + half else -body.turn_rate
        else:
            omega = body.turn_rate
    desired = body.desired
    if body.behavior == "decelerate-at-junction":
        dist = _next_junction(body.x, junctions)
        if dist is not None and dist < 25.0:
            desired = 0.3 * body.desired
    if body.kind == "pedestrian":
        return float(np.clip(desired - body.speed, -1.0, 1.0)), omega
    lead, dx = _leader(body, bodies)
    if lead is None:
        return idm_acceleration(body.speed, desired, None, 0.0), omega
    gap = dx - VEHICLE_LENGTH
    closing = body.speed * math.cos(body.heading) - lead.speed * math.cos(lead.heading)
    return idm_acceleration(body.speed, desired, gap, closing), omega


def _spawn(profile: RegionProfile, seed: int, scene_id: int, length: int) -> tuple[_Body, list[_Body], list[float]]:
    rng = keyed_rng(seed, scene_id, -1, -1, "init")
    m, s = profile.speed_mean, profile.speed_std
    ego = _Body(EGO_ID, "vehicle", "cruise", 0.0, 0.0, 0.0, 0.0, 0.0)
    lo, hi = profile.agent_count_range
    n = int(rng.integers(lo, hi + 1))
    junctions = sorted(float(v) for v in rng.uniform(15.0, 120.0, size=profile.junction_density))
    occupied: dict[float, list[float]] = {lane: [0.0] for lane in LANES}
    bodies = []
    for j in range(n):
        arng = keyed_rng(seed, scene_id, -1, j, "spawn")
        lead = j == 0
        if not lead and arng.random() < profile.pedestrian_fraction:
            behavior = str(arng.choice(BEHAVIORS, p=[0.5, 0.15, 0.2, 0.15]))
            y = float(arng.choice(SIDEWALKS))
            x = float(arng.uniform(-10.0, 50.0))
            direction = 0.0 if arng.random() < 0.7 else math.pi
            speed = float(np.clip(arng.normal(1.3, 0.3), 0.5, 2.2))
            rate = math.copysign(abs(arng.normal(2.0 * profile.turn_rate_mean, 0.1)), -y)
            if direction != 0.0:
                rate = -rate
            body = _Body(j, "pedestrian", behavior, x, y, speed, direction, speed, rate,
                         int(arng.integers(0, length)), 6)
        else:
            if lead:
                behavior = str(arng.choice(BEHAVIORS[:3], p=[0.5, 0.3, 0.2]))
            else:
                behavior = str(arng.choice(BEHAVIORS, p=[0.45, 0.25, 0.15, 0.15]))
            if behavior == "stationary":
                lane = float(arng.choice((-5.0, 5.0)))
            else:
                lane = 0.0 if lead else float(arng.choice(LANES))
            for _ in range(50):
                if lead:
                    x = 14.0
                elif lane == 0.0:
                    x = float(arng.uniform(15.0, 80.0))
                else:
                    x = float(arng.uniform(-40.0, 80.0))
                taken = occupied.setdefault(lane, [])
                if all(abs(x - o) >= 18.0 for o in taken):
                    break
            else:
                x = max(occupied[lane]) + 18.0
            occupied[lane].append(x)
            speed = float(np.clip(arng.normal(m, s), 0.3 * m, 1.8 * m))
            if lead:
                x = FOLLOW_GAP + FOLLOW_DELAY * DT * speed
            rate = abs(float(arng.normal(profile.turn_rate_mean, 0.3 * profile.turn_rate_mean)))
            toward_ego_lane = -math.copysign(1.0, lane) if lane != 0.0 else None
            if toward_ego_lane is None:
                rate = rate if arng.random() < 0.5 else -rate
            else:
                rate = rate * toward_ego_lane
            body = _Body(j, "vehicle", behavior, x, lane, speed, 0.0, speed, rate,
                         int(arng.integers(0, length)), 6)
        if body.behavior == "stationary":
            body.speed = 0.0
            body.desired = 0.0
        bodies.append(body)
    return ego, bodies, junctions


def _velocity(b: _Body) -> tuple[float, float]:
    if b.speed == 0.0:
        return 0.0, 0.0
    return b.speed * math.cos(b.heading), b.speed * math.sin(b.heading)


def simulate(profile: RegionProfile, seed: int, scene_id: int, length: int) -> tuple[np.ndarray, dict]:
    """Roll out ground truth. Returns states [length, 1 + n, 5] (x, y, vx, vy, heading) and metadata."""
    ego, bodies, junctions = _spawn(profile, seed, scene_id, length)
    everyone = [ego] + bodies
    lead = bodies[0]
    trail = []  # lead poses the ego will replay
    states = np.zeros((length, len(everyone), 5), dtype=np.float64)
    for step in range(length):
        controls = [_controls(b, everyone, junctions, step) if b is not ego else (0.0, 0.0) for b in everyone]
        trail.append((lead.x, lead.y, lead.speed, lead.heading))
        # the ego drives the lead's path FOLLOW_DELAY frames late, FOLLOW_GAP metres further back
        if step >= FOLLOW_DELAY:
            x, y, ego.speed, ego.heading = trail[step - FOLLOW_DELAY]
            ego.x, ego.y = x - FOLLOW_GAP, y
        else:
            x0, y0, ego.speed, ego.heading = trail[0]
            ego.x = x0 - FOLLOW_GAP - (FOLLOW_DELAY - step) * DT * ego.speed
            ego.y = y0
        for i, b in enumerate(everyone):
            vx, vy = _velocity(b)
            states[step, i] = (b.x, b.y, vx, vy, b.heading)
        for b, (acc, omega) in zip(everyone, controls):
            vx, vy = _velocity(b)
            b.x = b.x + vx * DT
            b.y = b.y + vy * DT
            if b.behavior != "stationary":
                b.speed = max(0.0, b.speed + acc * DT)
                b.heading = b.heading + omega * DT
    meta = {
        "ids": [b.id for b in bodies],
        "kinds": [b.kind for b in bodies],
        "behaviors": [b.behavior for b in bodies],
        "junctions": junctions,
    }
    return states, meta


def _agent_state(row: np.ndarray, agent_id: int, kind: str, behavior: str) -> AgentState:
    return AgentState(agent_id, (float(row[0]), float(row[1])), (float(row[2]), float(row[3])),
                      float(row[4]), kind, behavior)


def _observe(states: np.ndarray, meta: dict, corruption: CorruptionLevel, seed: int, scene_id: int,
             t: int) -> SensorFrame:
    ego_now = states[t, 0, :2]
    ids, windows, visible = [], [], []
    for k, agent_id in enumerate(meta["ids"]):
        drop_rng = keyed_rng(seed, scene_id, t, agent_id, "dropout")
        if corruption.dropout_prob > 0 and drop_rng.random() < corruption.dropout_prob:
            visible.append(False)
            continue
        visible.append(True)
        rng = keyed_rng(seed, scene_id, t, agent_id, "observation")
        sigma = corruption.obs_noise_sigma
        if corruption.confidence_degradation > 0 and rng.random() < corruption.confidence_degradation:
            sigma += DEGRADED_NOISE_SIGMA
        window = states[t - HISTORY + 1:t + 1, k + 1, :4].copy()
        window[:, :2] -= ego_now
        if sigma > 0:
            window += rng.normal(0.0, sigma, size=window.shape)
        ids.append(agent_id)
        windows.append(window)
    obs = np.array(windows, dtype=np.float64).reshape(len(ids), HISTORY, 4)
    return SensorFrame(t=t, agent_ids=tuple(ids), observations=obs, visible=np.array(visible, dtype=bool),
                       ego_position=ego_now.copy(), ego_history=states[t - HISTORY + 1:t + 1, 0, :4].copy())


def min_length() -> int:
    return HISTORY + max(PLAN_HORIZON, PRED_HORIZON) + 2


def generate_scene(profile: RegionProfile, corruption: CorruptionLevel, seed: int, length_frames: int,
                   scene_id: int = 0) -> Scene:
    """Simulate one scene and pair every usable frame with its noisy observation.

    Frames are emitted for every ``t`` that has a full history window behind
    it and full ground-truth futures ahead of it.
    """
    if length_frames < min_length():
        raise ConfigurationError(f"length_frames={length_frames} is below the minimum {min_length()}")
    states, meta = simulate(profile, seed, scene_id, length_frames)
    horizon = max(PLAN_HORIZON, PRED_HORIZON)
    frames = []
    for t in range(HISTORY - 1, length_frames - horizon):
        ego = _agent_state(states[t, 0], EGO_ID, "vehicle", "cruise")
        agents = tuple(_agent_state(states[t, k + 1], aid, meta["kinds"][k], meta["behaviors"][k])
                       for k, aid in enumerate(meta["ids"]))
        ego_future = states[t + 1:t + 1 + PLAN_HORIZON, 0, :2].copy()
        agent_future = np.transpose(states[t + 1:t + 1 + PRED_HORIZON, 1:, :2], (1, 0, 2)).copy()
        scene_frame = SceneFrame(t, DT, ego, agents, ego_future, agent_future)
        frames.append((scene_frame, _observe(states, meta, corruption, seed, scene_id, t)))
    return Scene(scene_id, profile, corruption, seed, tuple(frames))


def generate_scenes(profile: RegionProfile, corruption: CorruptionLevel, seed: int, count: int,
                    length_frames: int, first_id: int = 0) -> list[Scene]:
    return [generate_scene(profile, corruption, seed, length_frames, first_id + i) for i in range(count)]


# suites ------------------------------------------------------------------

SUITE_KINDS = ("in_domain", "cross_region", "corruption")
EVAL_ID_OFFSET = 1_000_000
CALIBRATION_ID_OFFSET = 2_000_000


@dataclass(frozen=True)
class SuiteSplit:
    """One train/eval pairing. Scene collections are generated on first access."""

    name: str
    train_profile: RegionProfile
    train_corruption: CorruptionLevel
    eval_profile: RegionProfile
    eval_corruption: CorruptionLevel
    seed: int
    n_train: int
    n_eval: int
    length_frames: int
    train_seed: int | None = None  # defaults to ``seed``; lets many eval seeds share one training set

    @property
    def train_key(self) -> str:
        return f"{self.train_profile.name}-{self.train_corruption.name}"

    @cached_property
    def train(self) -> list[Scene]:
        return generate_scenes(self.train_profile, self.train_corruption, self._train_seed, self.n_train,
                               self.length_frames)

    @cached_property
    def eval(self) -> list[Scene]:
        return generate_scenes(self.eval_profile, self.eval_corruption, self.seed, self.n_eval,
                               self.length_frames, EVAL_ID_OFFSET)

    def calibration(self, count: int) -> list[Scene]:
        """Held-out source-domain scenes, disjoint from train and eval ids."""
        return generate_scenes(self.train_profile, self.train_corruption, self._train_seed, count,
                               self.length_frames, CALIBRATION_ID_OFFSET)

    @property
    def _train_seed(self) -> int:
        return self.seed if self.train_seed is None else self.train_seed


@dataclass(frozen=True)
class SceneSuite:
    kind: str
    seed: int
    splits: tuple[SuiteSplit, ...] = field(default_factory=tuple)


def scene_suite(kind: str, seed: int, *, n_train: int = 100, n_eval: int = 12, length_frames: int = 30,
                train_seed: int | None = None,
                profiles: tuple[RegionProfile, RegionProfile] = (REGION_A, REGION_B),
                corruptions: dict[str, CorruptionLevel] | None = None) -> SceneSuite:
    """Build the train/eval pairings for one experimental protocol.

    in_domain: one split, same profile on both sides. cross_region: A->B and
    B->A. corruption: clean training, one split per severity (rain, fog, snow).
    """
    if kind not in SUITE_KINDS:
        raise ConfigurationError(f"unknown suite kind {kind!r}; expected one of {SUITE_KINDS}")
    if length_frames < min_length():
        raise ConfigurationError(f"length_frames={length_frames} is below the minimum {min_length()}")
    levels = dict(CORRUPTIONS if corruptions is None else corruptions)
    clean = levels["none"]
    a, b = profiles
    common = dict(seed=seed, n_train=n_train, n_eval=n_eval, length_frames=length_frames, train_seed=train_seed)
    if kind == "in_domain":
        splits = (SuiteSplit(f"{a.name}->{a.name}", a, clean, a, clean, **common),)
    elif kind == "cross_region":
        splits = (SuiteSplit(f"{a.name}->{b.name}", a, clean, b, clean, **common),
                  SuiteSplit(f"{b.name}->{a.name}", b, clean, a, clean, **common))
    else:
        splits = tuple(SuiteSplit(f"{a.name}:none->{name}", a, clean, a, levels[name], **common)
                       for name in ("rain", "fog", "snow"))
    return SceneSuite(kind, seed, splits)


# JSON-lines export -------------------------------------------------------


def _agent_dict(a: AgentState) -> dict:
    return {"id": a.id, "position": list(a.position), "velocity": list(a.velocity), "heading": a.heading,
            "kind": a.kind, "behavior": a.behavior}


def frame_record(scene: Scene, scene_frame: SceneFrame, sensor: SensorFrame) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "profile": scene.profile.name,
        "corruption": scene.corruption.name,
        "t": scene_frame.t,
        "dt": scene_frame.dt,
        "ego": _agent_dict(scene_frame.ego),
        "agents": [_agent_dict(a) for a in scene_frame.agents],
        "ego_future_gt": scene_frame.ego_future_gt.tolist(),
        "agent_future_gt": scene_frame.agent_future_gt.tolist(),
        "sensor": {
            "agent_ids": list(sensor.agent_ids),
            "observations": sensor.observations.tolist(),
            "visible": sensor.visible.tolist(),
            "ego_position": sensor.ego_position.tolist(),
            "ego_history": sensor.ego_history.tolist(),
        },
    }


def export_jsonl(scenes: Iterable[Scene], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            for scene_frame, sensor in scene.frames:
                fh.write(json.dumps(frame_record(scene, scene_frame, sensor), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise ConfigurationError(f"unsupported scene schema_version {rec.get('schema_version')!r}")
            records.append(rec)
    return records


def scale_speed(profile: RegionProfile, factor: float) -> RegionProfile:
    return replace(profile, name=f"{profile.name}x{factor:g}", speed_mean=profile.speed_mean * factor)

"""Online evolution loop: entropy trigger, top-k selection, targeted update.

One call to :func:`run_stream` plays a temporally ordered list of scenes
through the model while (depending on the strategy) adapting the parameters
in place. For every frame after the first of a scene the order is:

1. perception on the new frame with the current, not yet updated, parameters
   gives the supervision targets;
2. if the previous frame left a pending trigger, the targeted loss between
   that frame's first predicted waypoints and these targets is minimised by
   one gradient step;
3. the full model runs on the new frame with the possibly updated
   parameters, producing the plan that is scored and the next trigger.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .metrics import MetricsAccumulator, MetricsReport
from .model import UPDATE_SCOPES, DetectionSet, ModelParameters, PlanOutput, PredictionOutput, chosen_plan, detect_only, forward
from .worldsim import Scene

log = logging.getLogger(__name__)

REFERENCE_TAU = 1.7779
REFERENCE_TAU_TILDE = 0.5
REFERENCE_K = 35
REFERENCE_ETA = 3e-7
# Desk-scale defaults: scenes hold a handful of agents, and the toy model's
# parameters sit at a very different scale from a full driving stack.
DESK_K = 1
DESK_ETA = 3e-5

STRATEGIES = ("frozen", "tta_entropy", "evopsf", "evopsf_no_trigger", "evopsf_no_topk", "evopsf_no_conf")
EVOPSF_FAMILY = ("evopsf", "evopsf_no_trigger", "evopsf_no_topk", "evopsf_no_conf")
THRESHOLD_MODES = ("fixed", "quantile")


@dataclass
class AdaptationConfig:
    tau: float = REFERENCE_TAU
    tau_tilde: float = REFERENCE_TAU_TILDE
    k: int = DESK_K
    eta: float = DESK_ETA
    threshold_mode: str = "quantile"
    quantile: float = 0.9
    calibration_scenes: int = 8
    update_scope: str = "prediction_path"

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0.0 <= self.tau_tilde <= 1.0:
            raise ValueError("tau_tilde must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if not 0.0 <= self.quantile <= 1.0:
            raise ValueError("quantile must lie in [0, 1]")
        if self.update_scope not in UPDATE_SCOPES:
            raise ValueError(f"update_scope must be one of {tuple(UPDATE_SCOPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AdaptationConfig:
        return cls(**d)


@dataclass(frozen=True)
class TriggerDecision:
    entropy_value: float
    fired: bool
    tau: float


@dataclass(frozen=True)
class SelectionResult:
    selected_ids: tuple[int, ...]
    attention_weights: tuple[float, ...]


@dataclass
class AdaptationStepRecord:
    scene_id: int
    t: int
    strategy: str
    trigger: TriggerDecision | None  # decision that governed this frame's update
    selection: SelectionResult | None
    contributing_ids: tuple[int, ...]
    loss_value: float
    grad_norm: float
    params_updated: bool
    entropy: float  # plan entropy emitted by this frame
    n_visible: int
    skipped_nonfinite: bool = False
    pool_size: int = 0  # agents the selection was drawn from
    loss_inputs: dict | None = None  # {"waypoints": {id: [x, y]}, "detections": {id: [x, y, conf]}}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contributing_ids"] = list(self.contributing_ids)
        if self.selection is not None:
            d["selection"] = {"selected_ids": list(self.selection.selected_ids),
                              "attention_weights": list(self.selection.attention_weights)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AdaptationStepRecord:
        d = dict(d)
        if d.get("trigger") is not None:
            d["trigger"] = TriggerDecision(**d["trigger"])
        if d.get("selection") is not None:
            sel = d["selection"]
            d["selection"] = SelectionResult(tuple(sel["selected_ids"]), tuple(sel["attention_weights"]))
        d["contributing_ids"] = tuple(d["contributing_ids"])
        return cls(**d)


class InvariantViolation(RuntimeError):
    """A step record breaks one of the loop's invariants."""


# trigger / selection / loss -------------------------------------------------


def plan_entropy(scores: Tensor) -> Tensor:
    return ad.entropy(ad.softmax(scores))


def compute_trigger(plan: PlanOutput, tau: float) -> TriggerDecision:
    """Entropy (nats) of the softmaxed mode scores; fires when it reaches ``tau``."""
    scores = np.asarray(plan.raw_scores, dtype=np.float64)
    if scores.shape[0] < 2:
        raise ContractError(f"compute_trigger: need at least 2 modes, got {scores.shape[0]}")
    if not np.all(np.isfinite(scores)):
        raise ContractError("compute_trigger: non-finite scores")
    h = plan_entropy(ad.tensor(scores)).item()
    return TriggerDecision(h, h >= tau, tau)


def select_topk(plan: PlanOutput, k: int) -> SelectionResult:
    """The ``k`` agents with the largest ego attention, ties to the lower id.

    ``k`` is clamped to the number of agents in the attention row.
    """
    weights = np.asarray(plan.attention_row, dtype=np.float64)
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], plan.agent_ids[i]))[:k]
    return SelectionResult(tuple(int(plan.agent_ids[i]) for i in order), tuple(float(weights[i]) for i in order))


def select_all(plan: PlanOutput) -> SelectionResult:
    return select_topk(plan, max(1, len(plan.agent_ids)))


def targeted_loss(pred: PredictionOutput, next_detections: DetectionSet, selection: SelectionResult,
                  tau_tilde: float, use_confidence: bool = True) -> tuple[Tensor, tuple[int, ...]]:
    """Summed L1 gap between first predicted waypoints and next-frame detected centres.

    Selected agents absent from ``next_detections`` are skipped; with
    ``use_confidence`` only detections with confidence strictly above
    ``tau_tilde`` contribute.
    """
    terms, contributing = [], []
    for agent_id in selection.selected_ids:
        det = next_detections.get(agent_id)
        if det is None or agent_id not in pred.agent_ids:
            continue
        if use_confidence and not det.confidence > tau_tilde:
            continue
        terms.append(ad.l1_distance(pred.first_waypoint(agent_id), det.center.copy()))
        contributing.append(agent_id)
    if not terms:
        return ad.tensor(0.0), ()
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total, tuple(contributing)


def targeted_loss_reference(first_waypoints: dict[int, np.ndarray], detections: dict[int, tuple[np.ndarray, float]],
                            selected: Sequence[int], tau_tilde: float, use_confidence: bool = True) -> float:
    """Plain-float evaluation of the same loss, used to audit traces."""
    total = 0.0
    for j in selected:
        if j not in detections or j not in first_waypoints:
            continue
        center, conf = detections[j]
        if use_confidence and not conf > tau_tilde:
            continue
        w = first_waypoints[j]
        total += abs(w[0] - center[0]) + abs(w[1] - center[1])
    return total


@dataclass
class UpdateResult:
    updated: bool
    grad_norm: float
    skipped_nonfinite: bool = False


def apply_update(params: ModelParameters, loss: Tensor, eta: float, update_scope: str) -> UpdateResult:
    """One plain gradient step on the parameters of ``update_scope``.

    Gradients are cleared afterwards. Non-finite gradients leave the
    parameters untouched.
    """
    params.zero_grads()
    if not loss.requires_grad:
        return UpdateResult(False, 0.0)
    ad.backward(loss)
    scoped = params.scope(update_scope)
    sq = sum(float(np.sum(p.grad ** 2)) for p in scoped if p.grad is not None)
    grad_norm = math.sqrt(sq) if np.isfinite(sq) else math.inf
    if not np.isfinite(grad_norm):
        log.warning("non-finite gradient; update skipped")
        params.zero_grads()
        return UpdateResult(False, grad_norm, skipped_nonfinite=True)
    ad.sgd_step(scoped, eta)
    params.zero_grads()
    params.step_count += 1
    return UpdateResult(True, grad_norm)


def calibrate_tau(params: ModelParameters, scenes: Sequence[Scene], quantile: float) -> float:
    """``quantile`` of plan entropies of the given (held-out source) scenes."""
    values = [compute_trigger(forward(params, sensor).plan, math.inf).entropy_value
              for scene in scenes for _, sensor in scene.frames]
    return float(np.quantile(values, quantile))


# stream ------------------------------------------------------------------------


def _loss_inputs(pred: PredictionOutput, targets: DetectionSet, selection: SelectionResult) -> dict:
    waypoints, detections = {}, {}
    for j in selection.selected_ids:
        if j in pred.agent_ids:
            waypoints[str(j)] = [float(v) for v in pred.first_waypoint(j).data]
        det = targets.get(j)
        if det is not None:
            detections[str(j)] = [float(det.center[0]), float(det.center[1]), float(det.confidence)]
    return {"waypoints": waypoints, "detections": detections}


@dataclass
class StreamResult:
    strategy: str
    records: list[AdaptationStepRecord]
    report: MetricsReport
    update_count: int
    tau: float


def validate_record(record: AdaptationStepRecord, tau_tilde: float | None = None, k: int | None = None) -> None:
    """Raise :class:`InvariantViolation` naming the frame and the broken rule.

    With ``tau_tilde`` the recorded loss is recomputed from its stored
    inputs; with ``k`` the selection size is checked against the pool.
    """
    where = f"scene {record.scene_id} frame {record.t} ({record.strategy})"
    if record.loss_value < 0 or not math.isfinite(record.loss_value):
        raise InvariantViolation(f"{where}: loss_value must be finite and >= 0, got {record.loss_value}")
    if record.strategy == "frozen" and record.params_updated:
        raise InvariantViolation(f"{where}: frozen strategy updated parameters")
    if record.strategy in EVOPSF_FAMILY and record.params_updated:
        if record.strategy != "evopsf_no_trigger" and (record.trigger is None or not record.trigger.fired):
            raise InvariantViolation(f"{where}: update without a fired trigger on the previous frame")
        if not record.contributing_ids:
            raise InvariantViolation(f"{where}: update without contributing objects")
    if record.trigger is not None and record.trigger.fired != (record.trigger.entropy_value >= record.trigger.tau):
        raise InvariantViolation(f"{where}: trigger flag disagrees with entropy >= tau")
    if record.selection is not None:
        ids = record.selection.selected_ids
        if len(set(ids)) != len(ids):
            raise InvariantViolation(f"{where}: duplicate selected ids")
        if not set(record.contributing_ids) <= set(ids):
            raise InvariantViolation(f"{where}: contributing ids outside the selection")
        if k is not None:
            expected = record.pool_size if record.strategy == "evopsf_no_topk" else min(k, record.pool_size)
            if len(ids) != expected:
                raise InvariantViolation(f"{where}: selected {len(ids)} agents, expected {expected}")
    if tau_tilde is not None and record.loss_inputs is not None:
        inputs = record.loss_inputs
        waypoints = {int(j): np.asarray(w, dtype=np.float64) for j, w in inputs["waypoints"].items()}
        detections = {int(j): (np.asarray(v[:2], dtype=np.float64), float(v[2])) for j, v in inputs["detections"].items()}
        selected = record.selection.selected_ids if record.selection is not None else ()
        use_conf = record.strategy != "evopsf_no_conf"
        expected = targeted_loss_reference(waypoints, detections, selected, tau_tilde, use_conf)
        if abs(expected - record.loss_value) > 1e-12:
            raise InvariantViolation(f"{where}: loss {record.loss_value!r} differs from recomputation {expected!r}")
        passing = tuple(j for j in selected if j in detections and j in waypoints
                        and (not use_conf or detections[j][1] > tau_tilde))
        if passing != tuple(record.contributing_ids):
            raise InvariantViolation(f"{where}: contributing ids {record.contributing_ids} should be {passing}")


def run_stream(params: ModelParameters, scenes: Sequence[Scene], strategy: str, config: AdaptationConfig,
               tau: float | None = None, check: bool = True) -> StreamResult:
    """Play ``scenes`` in order, adapting ``params`` in place per ``strategy``.

    Parameters persist across scenes; a trigger pending at the end of a scene
    is dropped because its next frame does not exist.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    tau = config.tau if tau is None else tau
    started = time.perf_counter()
    acc = MetricsAccumulator()
    records: list[AdaptationStepRecord] = []
    updates = 0
    for scene in scenes:
        pending = None
        for frame, sensor in scene.frames:
            trig_used, sel_used, contributing = None, None, ()
            loss_value, grad_norm, updated, skipped = 0.0, 0.0, False, False
            pool, loss_inputs = 0, None
            if strategy in EVOPSF_FAMILY and pending is not None:
                trig_used, sel_used, pred = pending
                pool = len(pred.agent_ids)
                if trig_used.fired or strategy == "evopsf_no_trigger":
                    targets = detect_only(params, sensor)
                    loss, contributing = targeted_loss(pred, targets, sel_used, config.tau_tilde,
                                                       use_confidence=strategy != "evopsf_no_conf")
                    loss_value = loss.item()
                    loss_inputs = _loss_inputs(pred, targets, sel_used)
                    if contributing:
                        res = apply_update(params, loss, config.eta, config.update_scope)
                        updated, grad_norm, skipped = res.updated, res.grad_norm, res.skipped_nonfinite
            out = forward(params, sensor)
            acc.add_frame(frame, chosen_plan(out.plan), out.prediction.agent_ids,
                          out.prediction.trajectories(), out.detections)
            trigger = compute_trigger(out.plan, tau)
            if strategy == "tta_entropy":
                trig_used = trigger
                h = plan_entropy(out.plan.scores)
                loss_value = h.item()
                res = apply_update(params, h, config.eta, "all_params")
                updated, grad_norm, skipped = res.updated, res.grad_norm, res.skipped_nonfinite
            if strategy in EVOPSF_FAMILY:
                selection = None
                if trigger.fired or strategy == "evopsf_no_trigger":
                    selection = select_all(out.plan) if strategy == "evopsf_no_topk" else select_topk(out.plan, config.k)
                pending = (trigger, selection, out.prediction)
            updates += int(updated)
            record = AdaptationStepRecord(scene.scene_id, frame.t, strategy, trig_used, sel_used, contributing,
                                          loss_value, grad_norm, updated, trigger.entropy_value, sensor.n_visible,
                                          skipped, pool, loss_inputs)
            if check:
                validate_record(record, config.tau_tilde, config.k)
            records.append(record)
    report = acc.report(updates, time.perf_counter() - started)
    return StreamResult(strategy, records, report, updates, tau)

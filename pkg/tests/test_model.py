import dataclasses

import numpy as np
import pytest

from evopsf import autodiff as ad
from evopsf import model as md
from evopsf.adaptation import select_all, targeted_loss
from evopsf.trainer import LossWeights, training_losses
from evopsf.worldsim import CORRUPTIONS, NOISELESS, REGION_A, generate_scene, generate_scenes, min_length
from conftest import FD_TOL, rel_err
from pretrained import source_model

L = min_length() + 2


@pytest.fixture(scope="module")
def scene():
    return generate_scene(REGION_A, CORRUPTIONS["rain"], 5, L)


@pytest.fixture(scope="module")
def params():
    return md.ModelParameters.initialize(0)


def _sampled_fd(params, loss_fn, rng, per_tensor=2, h=1e-5):
    """Autodiff vs central differences on a random subset of every tensor's coordinates."""
    params.zero_grads()
    loss = loss_fn()
    ad.backward(loss)
    analytic, numeric = [], []
    for name in params.names():
        t = params[name]
        grad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        for flat in rng.choice(t.size, size=min(per_tensor, t.size), replace=False):
            idx = np.unravel_index(flat, t.shape)
            old = t.data[idx]
            t.data[idx] = old + h
            up = loss_fn().item()
            t.data[idx] = old - h
            down = loss_fn().item()
            t.data[idx] = old
            analytic.append(grad[idx])
            numeric.append((up - down) / (2 * h))
    params.zero_grads()
    return rel_err(analytic, numeric)


@pytest.mark.parametrize("seed", range(20))
def test_full_training_loss_matches_finite_differences(seed):
    params = md.ModelParameters.initialize(seed)
    sc = generate_scene(REGION_A, CORRUPTIONS["fog"], seed, min_length(), seed)
    frames = [f for f, _ in sc.frames[:2]]
    sensors = [s for _, s in sc.frames[:2]]

    def loss_fn():
        return training_losses(md.forward_batch(params, sensors), frames, LossWeights())[0]

    assert _sampled_fd(params, loss_fn, np.random.default_rng(seed)) < FD_TOL


@pytest.mark.parametrize("seed", range(20))
def test_targeted_loss_matches_finite_differences(seed):
    params = md.ModelParameters.initialize(seed)
    sc = generate_scene(REGION_A, CORRUPTIONS["none"], seed, min_length(), seed)
    (_, s0), (_, s1) = sc.frames[0], sc.frames[1]
    targets = md.detect_only(params, s1)
    plan = md.forward(params, s0).plan

    def loss_fn():
        pred = md.forward(params, s0).prediction
        return targeted_loss(pred, targets, select_all(plan), 0.0, use_confidence=False)[0]

    assert _sampled_fd(params, loss_fn, np.random.default_rng(100 + seed)) < FD_TOL


def test_forward_is_deterministic(params, scene):
    _, sensor = scene.frames[0]
    a, b = md.forward(params, sensor), md.forward(params, sensor)
    assert a.plan.candidates.tobytes() == b.plan.candidates.tobytes()
    assert a.plan.raw_scores.tobytes() == b.plan.raw_scores.tobytes()
    assert a.prediction.trajectories().tobytes() == b.prediction.trajectories().tobytes()


def test_output_shapes_and_alignment(params, scene):
    for _, sensor in scene.frames:
        out = md.forward(params, sensor)
        n = sensor.n_visible
        assert out.plan.candidates.shape == (md.N_MODES, md.PLAN_HORIZON, 2)
        assert out.plan.n_modes >= 2
        assert out.prediction.trajectories().shape == (n, md.PRED_HORIZON, 2)
        assert tuple(out.detections.agent_ids) == out.prediction.agent_ids == out.plan.agent_ids == sensor.agent_ids
        assert len(out.plan.attention_row) == n
        assert abs(out.plan.attention_row.sum() - 1.0) <= 1e-9
        assert np.all(out.plan.attention_row >= 0)
        for det in out.detections:
            assert det.bbox.shape == (11,)
            assert abs(det.bbox[6] ** 2 + det.bbox[7] ** 2 - 1.0) <= 1e-6
            assert 0.0 <= det.confidence <= 1.0


def test_batched_forward_matches_single(params, scene):
    sensors = [s for _, s in scene.frames[:3]]
    batch = md.forward_batch(params, sensors)
    for b, sensor in enumerate(sensors):
        single = md.forward(params, sensor)
        np.testing.assert_allclose(batch.frame(b).plan.candidates, single.plan.candidates, atol=1e-12)
        np.testing.assert_allclose(batch.frame(b).prediction.trajectories(), single.prediction.trajectories(),
                                   atol=1e-12)


def test_detect_only_equals_forward(params, scene):
    for _, sensor in scene.frames:
        full = md.forward(params, sensor).detections
        alone = md.detect_only(params, sensor)
        assert full.agent_ids == alone.agent_ids
        for a, b in zip(full, alone):
            assert np.array_equal(a.bbox, b.bbox) and a.confidence == b.confidence


def test_dropout_hidden_agent_absent(params):
    heavy = dataclasses.replace(CORRUPTIONS["snow"], dropout_prob=0.6)
    sc = generate_scene(REGION_A, heavy, 2, L)
    hidden_seen = False
    for frame, sensor in sc.frames:
        ids = set(md.detect_only(params, sensor).agent_ids)
        for agent, vis in zip(frame.agents, sensor.visible):
            if not vis:
                hidden_seen = True
                assert agent.id not in ids
    assert hidden_seen


def test_no_visible_agents(params, scene):
    _, sensor = scene.frames[0]
    empty = dataclasses.replace(sensor, agent_ids=(), observations=np.zeros((0, md.HISTORY, 4)),
                                visible=np.zeros_like(sensor.visible))
    out = md.forward(params, empty)
    assert out.no_agents
    assert len(out.detections) == 0 and out.prediction.trajectories().shape == (0, md.PRED_HORIZON, 2)
    assert out.plan.candidates.shape == (md.N_MODES, md.PLAN_HORIZON, 2)
    assert np.all(np.isfinite(out.plan.candidates))


def _plan(scores):
    scores = np.asarray(scores, dtype=np.float64)
    cands = np.arange(len(scores), dtype=np.float64)[:, None, None] * np.ones((1, md.PLAN_HORIZON, 2))
    return md.PlanOutput(cands, scores, np.zeros(0), ())


def test_chosen_plan_argmax_and_ties():
    assert md.chosen_plan(_plan([1, 3, 2]))[0, 0] == 1
    assert md.chosen_plan(_plan([5, 5, 5]))[0, 0] == 0
    assert md.chosen_plan(_plan(np.array([1, 3, 2]) + 17.25))[0, 0] == 1


def test_checkpoint_roundtrip_exact(tmp_path, params):
    p = params.copy()
    p.step_count = 7
    p.save(tmp_path / "m.json")
    q = md.ModelParameters.load(tmp_path / "m.json")
    assert q.step_count == 7
    assert q.names() == p.names()
    for n in p.names():
        assert np.array_equal(p[n].data, q[n].data)
        assert q[n].requires_grad
    q.save(tmp_path / "n.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_parameter_groups():
    p = md.ModelParameters.initialize(0)
    counts = p.counts()
    assert set(counts) == set(md.GROUPS) and all(v > 0 for v in counts.values())
    assert sum(counts.values()) == sum(t.size for t in p.params())
    assert len(set(p.names())) == len(p.names())


def test_targeted_loss_gradient_flow(scene):
    params = md.ModelParameters.initialize(3)
    (_, s0), (_, s1) = scene.frames[0], scene.frames[1]
    out = md.forward(params, s0)
    targets = md.detect_only(params, s1)
    loss, contributing = targeted_loss(out.prediction, targets, select_all(out.plan), 0.0)
    assert contributing
    params.zero_grads()
    ad.backward(loss)

    def norm(group):
        return sum(float(np.abs(t.grad).sum()) for t in params.params((group,)) if t.grad is not None)

    assert norm("perception_head") == 0.0
    assert norm("planner_head") == 0.0
    assert norm("shared_encoder") > 0.0
    assert norm("prediction_head") > 0.0


# after pretraining ---------------------------------------------------------

def test_noiseless_center_error_in_domain():
    params = source_model("a")
    errors = []
    for sc in generate_scenes(REGION_A, NOISELESS, 99, 20, 20, 500):
        for frame, sensor in sc.frames:
            dets = md.detect_only(params, sensor)
            truth = {a.id: np.array(a.position) for a in frame.agents}
            errors += [float(np.linalg.norm(d.center - truth[d.agent_id])) for d in dets]
    assert np.mean(errors) < 0.3


def test_snow_lowers_confidence():
    params = source_model("a")

    def mean_conf(level):
        confs = []
        for sc in generate_scenes(REGION_A, CORRUPTIONS[level], 42, 20, 20, 700):
            for _, sensor in sc.frames:
                confs += [d.confidence for d in md.detect_only(params, sensor)]
        return float(np.mean(confs))

    assert mean_conf("snow") < mean_conf("none")


def test_on_path_agent_gets_more_attention_than_one_behind():
    """An agent on the ego's path ahead outranks a copy of it 50 m behind the ego."""
    params = source_model("a")
    on_path, far = [], []
    for sc in generate_scenes(REGION_A, NOISELESS, 7, 100, min_length(), 900):
        _, sensor = sc.frames[0]
        ego_v = sensor.ego_history[:, 2:]
        ahead = np.zeros((md.HISTORY, 4))
        behind = np.zeros((md.HISTORY, 4))
        lags = np.arange(md.HISTORY - 1, -1, -1) * md.DT
        for window, x0 in ((ahead, 12.0), (behind, -50.0)):
            window[:, 2:] = ego_v
            window[:, 0] = x0 - lags * (ego_v[-1, 0] - ego_v[:, 0])
        probe = dataclasses.replace(sensor, agent_ids=(0, 1), observations=np.stack([ahead, behind]),
                                    visible=np.ones(2, dtype=bool))
        row = md.forward(params, probe).plan.attention_row
        on_path.append(row[0])
        far.append(row[1])
    assert len(on_path) == 100
    assert np.mean(on_path) > np.mean(far)

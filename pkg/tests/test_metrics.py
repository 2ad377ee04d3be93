import math

import numpy as np
import pytest

from evopsf import metrics as mt
from evopsf.model import Detection, DetectionSet
from evopsf.worldsim import AgentState, SceneFrame


def test_plan_l2_examples():
    gt = np.cumsum(np.ones((6, 2)), axis=0)
    assert mt.plan_l2(gt, gt) == 0.0
    assert mt.plan_l2(gt + [0.3, 0.4], gt) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_plan_l2_oracle_and_translation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    expected = sum(math.hypot(*(a[i] - b[i])) for i in (1, 3, 5)) / 3
    assert abs(mt.plan_l2(a, b) - expected) <= 1e-12
    shift = rng.normal(size=2) * 10
    assert mt.plan_l2(a + shift, b + shift) == pytest.approx(expected, abs=1e-12)


def test_plan_l2_shape_mismatch():
    with pytest.raises(ValueError):
        mt.plan_l2(np.zeros((6, 2)), np.zeros((5, 2)))


def test_collision_examples():
    plan = np.zeros((6, 2))
    assert mt.collision_rate([plan], [np.zeros((0, 6, 2))]) == 0.0
    assert mt.plan_collides(plan, np.zeros((1, 6, 2)))


def test_collision_near_miss_stream():
    plans, futures = [], []
    for i in range(10):
        plan = np.column_stack([np.arange(1, 7, dtype=float), np.zeros(6)])
        agent = plan + [0.0, 1.49 if i in (2, 5, 7) else 1.6]
        plans.append(plan)
        futures.append(agent[None])
    assert mt.collision_rate(plans, futures) == pytest.approx(0.3)


def test_collision_uses_matching_timestep():
    plan = np.column_stack([np.arange(6, dtype=float), np.zeros(6)])
    agent = np.roll(plan, 2, axis=0)[None]  # same path, different times
    agent[0, :2] = [[100, 100], [100, 100]]
    assert not mt.plan_collides(plan, agent)


def test_ade_fde_examples():
    gt = np.random.default_rng(0).normal(size=(3, 6, 2))
    assert mt.ade_fde_mr(gt, gt) == (0.0, 0.0, 0.0)
    ade, fde, mr = mt.ade_fde_mr(gt + [0.6, 0.8], gt)
    assert ade == pytest.approx(1.0) and fde == pytest.approx(1.0) and mr == 0.0


def test_ade_fde_mixed_oracle_and_permutation():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(4, 6, 2))
    pred = gt + rng.normal(scale=1.5, size=gt.shape)
    errs = [[math.hypot(*(pred[a, q] - gt[a, q])) for q in range(6)] for a in range(4)]
    ade = sum(sum(e) / 6 for e in errs) / 4
    fde = sum(e[-1] for e in errs) / 4
    mr = sum(e[-1] > 2.0 for e in errs) / 4
    got = mt.ade_fde_mr(pred, gt)
    assert abs(got[0] - ade) <= 1e-12 and abs(got[1] - fde) <= 1e-12 and got[2] == mr
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(mt.ade_fde_mr(pred[perm], gt[perm]), got, atol=1e-15)


def _frame(positions):
    agents = tuple(AgentState(i, tuple(p), (0.0, 0.0), 0.0, "vehicle", "cruise") for i, p in enumerate(positions))
    ego = AgentState(-1, (0.0, 0.0), (0.0, 0.0), 0.0, "vehicle", "cruise")
    return SceneFrame(0, 0.5, ego, agents, np.zeros((6, 2)), np.zeros((len(agents), 6, 2)))


def _dets(centers):
    return DetectionSet(0, tuple(Detection(i, np.array([x, y, 0, 1, 1, 1, 0, 1, 0, 0, 0.0]), 0.9)
                                 for i, (x, y) in enumerate(centers)))


def test_detection_exact():
    pos = [(0, 5), (10, 0), (20, 3.5)]
    assert mt.detection_quality(_dets(pos), _frame(pos)) == (0.0, 1.0, 1.0)


def test_detection_empty_has_zero_recall():
    err, precision, recall = mt.detection_quality(_dets([]), _frame([(1, 1)]))
    assert recall == 0.0 and math.isnan(err) and precision == 1.0


def test_detection_one_spurious_one_missed():
    truth = [(0, 0), (10, 0), (20, 0), (30, 0), (40, 0)]
    dets = [(0.5, 0), (10, 0.3), (20, 0), (30.1, 0), (70, 0)]  # last is spurious; (40, 0) missed
    m = mt.match_detections(np.array(dets), np.array(truth))
    assert (m.true_positives, m.false_positives, m.false_negatives) == (4, 1, 1)
    _, precision, recall = mt.detection_quality(_dets(dets), _frame(truth))
    assert precision == pytest.approx(4 / 5) and recall == pytest.approx(4 / 5)


def test_greedy_matching_prefers_nearest_pair():
    m = mt.match_detections(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.9, 0.0]]))
    assert m.errors == (pytest.approx(0.1),) and m.false_positives == 1


def _report(**kw):
    base = dict(plan_l2_mean=0.5, collision_rate=0.1, ade=1.0, fde=2.0, miss_rate=0.2, det_center_err=0.3,
                det_precision=0.9, det_recall=0.8, update_count=3, wall_time_s=0.1)
    base.update(kw)
    return mt.MetricsReport(**base)


def test_report_validation():
    _report().validate()
    for bad in (dict(collision_rate=1.5), dict(ade=-1.0), dict(det_recall=-0.1)):
        with pytest.raises(ValueError):
            _report(**bad).validate()


def test_csv_roundtrip(tmp_path):
    rows = [mt.metrics_row("cross_region", "a->b", s, seed, _report(plan_l2_mean=0.1 * seed + 1 / 3))
            for s in ("frozen", "evopsf") for seed in range(3)]
    mt.write_csv(rows, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(mt.CSV_HEADER)
    assert mt.read_csv(tmp_path / "m.csv") == rows
    mt.append_csv_row(rows[0], tmp_path / "n.csv")
    mt.append_csv_row(rows[1], tmp_path / "n.csv")
    assert mt.read_csv(tmp_path / "n.csv") == rows[:2]


def test_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        mt.read_csv(tmp_path / "missing.csv")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        mt.read_csv(tmp_path / "bad.csv")


def test_accumulator_matches_direct_metrics():
    acc = mt.MetricsAccumulator()
    frame = _frame([(3.0, 0.0)])
    frame.agent_future_gt[:] = [[3.0 + q, 0.0] for q in range(1, 7)]
    plan = np.column_stack([np.arange(1, 7, dtype=float), np.zeros(6)])
    pred = frame.agent_future_gt + [0.0, 1.0]
    acc.add_frame(frame, plan, [0], pred, _dets([(3.0, 0.5)]))
    rep = acc.report(0, 0.0)
    assert rep.plan_l2_mean == mt.plan_l2(plan, frame.ego_future_gt)
    assert rep.collision_rate == float(mt.plan_collides(plan, frame.agent_future_gt)) == 0.0  # 3 m gap throughout
    assert rep.ade == 1.0 and rep.fde == 1.0 and rep.miss_rate == 0.0
    assert rep.det_center_err == 0.5 and rep.det_precision == 1.0 and rep.det_recall == 1.0
    rep.validate()

import numpy as np
import pytest

from conftest import SMALL_PIDM
from pidm_warmstart.data import build_windows
from pidm_warmstart.explore import (Ensemble, ExploreConfig, bootstrap_resample, collect_exploration_data,
                                    intrinsic_from_predictions, train_ensemble)
from pidm_warmstart.ppo import PpoConfig
from test_data_pidm import rollout_records


def test_identical_members_give_zero_reward(rng):
    p = rng.standard_normal((1, 6, 2))
    assert not np.any(intrinsic_from_predictions(np.repeat(p, 5, axis=0)))


def test_two_member_hand_value():
    preds = np.array([np.zeros((1, 2)), np.full((1, 2), 2.0)])
    assert intrinsic_from_predictions(preds)[0] == 10.0


def test_clipped_at_threshold():
    preds = np.array([np.zeros((1, 2)), np.full((1, 2), 10.0)])  # sigma 5
    assert intrinsic_from_predictions(preds)[0] == 30.0


def test_permutation_invariant(rng):
    preds = rng.standard_normal((5, 7, 2))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(intrinsic_from_predictions(preds), intrinsic_from_predictions(preds[perm]))


def test_table_constants():
    c = ExploreConfig()
    assert (c.ensemble_size, c.iterations, c.retrain_interval, c.retrain_epochs) == (5, 800, 10, 5)
    assert (c.intrinsic_scale, c.intrinsic_clip) == (10.0, 30.0)


def test_bootstrap_edge_cases(rng):
    assert bootstrap_resample(5, 0, rng).size == 0
    np.testing.assert_array_equal(bootstrap_resample(1, 5, rng), np.zeros(5))


def test_bootstrap_distinct_fraction(rng):
    n = 2000
    frac = np.mean([np.unique(bootstrap_resample(n, n, rng)).size / n for _ in range(50)])
    assert frac == pytest.approx(1 - np.exp(-1), abs=0.01)


def test_members_diverge_and_losses_fall():
    ws, _ = build_windows(rollout_records(steps=40, n=4), 4)
    ens = Ensemble(SMALL_PIDM, 2, 0)
    cfg = ExploreConfig(retrain_epochs=5, batch_size=16, weight_decay=0.0)
    losses = train_ensemble(ens, ws, cfg, np.random.default_rng(0))
    a, b = ens.members[0].parameters(), ens.members[1].parameters()
    assert any(not np.array_equal(x, y) for x, y in zip(a, b))
    for member_losses in losses:
        assert all(l1 >= l2 for l1, l2 in zip(member_losses, member_losses[1:]))


def tiny_explore(iterations, min_buffer, retrain_interval=2, snapshot=False):
    cfg = ExploreConfig(iterations=iterations, min_buffer=min_buffer, retrain_interval=retrain_interval,
                        retrain_epochs=1, batch_size=32, ensemble_size=2)
    ppo = PpoConfig(num_envs=4, steps_per_iter=6)
    return collect_exploration_data(cfg, ppo, 0, arch=SMALL_PIDM, snapshot_actor=snapshot), cfg, ppo


def test_actor_frozen_until_buffer_full():
    res, cfg, ppo = tiny_explore(iterations=8, min_buffer=10**6, snapshot=True)
    first = res.actor_snapshots[0]
    for snap in res.actor_snapshots[1:]:
        for a, b in zip(first, snap):
            assert a.tobytes() == b.tobytes()
    assert all(row["mean_intrinsic"] == 0.0 for row in res.log)
    assert res.retrain_iterations == []


def test_retrain_schedule_and_row_count():
    res, cfg, ppo = tiny_explore(iterations=9, min_buffer=30, retrain_interval=2)
    ready = [row["iteration"] for row in res.log if row["buffer_size"] >= cfg.min_buffer]
    assert res.retrain_iterations == [i for i in ready if i % cfg.retrain_interval == 0]
    assert len(res.buffer) == cfg.iterations * ppo.steps_per_iter * ppo.num_envs
    assert any(row["mean_intrinsic"] > 0 for row in res.log)

import numpy as np
import pytest

from conftest import SMALL_PIDM, SMALL_WARM
from pidm_warmstart.envsim import TaskSpec, VecEnv
from pidm_warmstart.nn_core import ConfigurationError
from pidm_warmstart.pidm import Pidm
from pidm_warmstart.warmstart import (INIT_MODES, PRETRAINED_MODULES, assemble, forward_policy,
                                      initial_action_distribution_check, load_net, normalize_mode, save_net)

OBS = TaskSpec("reach").obs_dim


@pytest.fixture(scope="module")
def pidm_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("pidm") / "p.ckpt"
    Pidm.init(SMALL_PIDM, np.random.default_rng(5)).save(path)
    return path


def build(mode, head, ckpt, seed=0):
    return assemble(ckpt, OBS, head, mode, seed, SMALL_PIDM, SMALL_WARM)


def same(a, b):
    return all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))


def test_mode_names():
    assert normalize_mode("pretrained-both") == "pretrained_both"
    with pytest.raises(ConfigurationError):
        normalize_mode("warm")
    assert len(INIT_MODES) == 5


def test_pretrained_both_copies_pidm_modules(pidm_ckpt):
    pidm = Pidm.load(pidm_ckpt, SMALL_PIDM)
    for head in ("actor", "critic"):
        net = build("pretrained_both", head, pidm_ckpt)
        for name in PRETRAINED_MODULES:
            assert same(net.modules[name], pidm.modules[name])


@pytest.mark.parametrize("mode,loaded", [("pretrained_actor_only", {"actor"}),
                                         ("pretrained_critic_only", {"critic"}),
                                         ("random_pidm", set())])
def test_partial_modes(pidm_ckpt, mode, loaded):
    pidm = Pidm.load(pidm_ckpt, SMALL_PIDM)
    for head in ("actor", "critic"):
        net = build(mode, head, pidm_ckpt)
        assert same(net.modules["backbone"], pidm.modules["backbone"]) == (head in loaded)


def test_random_pidm_same_shapes_different_values(pidm_ckpt):
    a = build("pretrained_both", "actor", pidm_ckpt)
    b = build("random_pidm", "actor", pidm_ckpt)
    assert [p.shape for p in a.parameters()] == [p.shape for p in b.parameters()]
    assert not same(a.modules["backbone"], b.modules["backbone"])


def test_pretrained_mode_needs_checkpoint():
    with pytest.raises(ConfigurationError):
        build("pretrained_both", "actor", None)


def test_parameter_ratio_default_architecture():
    vanilla = assemble(None, OBS, "actor", "vanilla_mlp", 0).num_params()
    pidm_net = assemble(None, OBS, "actor", "random_pidm", 0).num_params()
    assert 2 <= pidm_net / vanilla <= 8


def test_intention_plumbing_matches_pretraining(pidm_ckpt, rng):
    pidm = Pidm.load(pidm_ckpt, SMALL_PIDM)
    net = build("pretrained_both", "actor", pidm_ckpt)
    hx, ha, d = (rng.standard_normal((5, 4, 4)).astype(np.float32), rng.standard_normal((5, 4, 2)).astype(np.float32),
                 rng.standard_normal((5, 4)).astype(np.float32))
    _, cache = pidm.forward(hx, ha, d)
    emb = cache[2].post[-1]  # delta-encoder embedding
    _, wcache = net.forward(rng.standard_normal((5, OBS)), hx, ha, intention_override=emb)
    assert wcache[3].post[-1].tobytes() == cache[3].post[-1].tobytes()


def test_critic_scalar_output(pidm_ckpt, rng):
    for mode in INIT_MODES:
        net = build(mode, "critic", pidm_ckpt)
        out = forward_policy(net, rng.standard_normal((3, OBS)), rng.standard_normal((3, 4, 4)),
                             rng.standard_normal((3, 4, 2)))
        assert out.shape == (3, 1)


def test_small_initial_means(pidm_ckpt, rng):
    for mode in INIT_MODES:
        net = build(mode, "actor", pidm_ckpt)
        mu = forward_policy(net, rng.standard_normal((200, OBS)), rng.standard_normal((200, 4, 4)),
                            rng.standard_normal((200, 4, 2)))
        assert np.mean(np.abs(mu)) < 0.1, mode


@pytest.mark.parametrize("mode", INIT_MODES)
def test_initial_action_distribution(pidm_ckpt, mode):
    rep = initial_action_distribution_check(build(mode, "actor", pidm_ckpt), TaskSpec("reach"), 2000, seed=1)
    assert rep.passed, (rep.mean, rep.std)


def test_save_load_round_trip(tmp_path, pidm_ckpt):
    for mode in ("vanilla_mlp", "pretrained_both"):
        net = build(mode, "actor", pidm_ckpt)
        save_net(net, tmp_path / f"{mode}.ckpt", log_std=np.array([0.1, -0.2]))
        back, manifest = load_net(tmp_path / f"{mode}.ckpt", SMALL_PIDM)
        assert same(net, back) and back.kind == net.kind
        assert manifest["extra"]["log_std"] == pytest.approx([0.1, -0.2])


def test_vanilla_ignores_history_and_pidm_requires_it(pidm_ckpt, rng):
    obs = rng.standard_normal((2, OBS))
    v = build("vanilla_mlp", "actor", pidm_ckpt)
    np.testing.assert_array_equal(forward_policy(v, obs), forward_policy(v, obs, np.zeros((2, 4, 4)), np.zeros((2, 4, 2))))
    with pytest.raises(ConfigurationError):
        forward_policy(build("random_pidm", "actor", pidm_ckpt), obs)


def test_representations_layout(pidm_ckpt):
    env = VecEnv(TaskSpec("reach"), 3, 0)
    net = build("random_pidm", "actor", pidm_ckpt)
    reps = net.representations(env.observation(), *env.history())
    assert [r.shape[1] for r in reps] == [2 * SMALL_PIDM.embed, *SMALL_WARM.synthesizer_hidden]

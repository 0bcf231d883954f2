import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import compare, numeric_grad
from pidm_warmstart import nn_core
from pidm_warmstart.nn_core import (Adam, AdamW, CheckpointIncompatibleError, ConfigurationError,
                                    GradientSet, Linear, Mlp, TrainingDivergenceError, clip_grad_norm,
                                    elu, l1_loss, load_params, param_delta, save_params, submodule_delta)


def random_net(rng, acts=("elu", "identity", "sigmoid_renorm")):
    depth = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 7, size=depth + 1)]
    out_act = acts[int(rng.integers(len(acts)))]
    return Mlp.build(dims, rng, out_act=out_act, dtype=np.float64), dims


def check_net_gradients(net, x, rng):
    r = rng.standard_normal((x.shape[0], net.out_dim))
    out, cache = net.forward(x)
    grads, gin = net.backward(cache, r)

    def loss():
        return float(np.sum(net.forward(x, keep_cache=False)[0] * r))

    num = numeric_grad(loss, net.parameters())
    num_in = numeric_grad(loss, [x])
    return max(compare(grads.arrays, num), compare([gin], num_in))


# ------------------------------------------------------------------ forward

def test_identity_layer_passes_input():
    net = Mlp([Linear(np.eye(2), np.zeros(2), "identity")])
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(net(x), x)


def test_elu_values():
    assert elu(np.array(0.0)) == 0.0
    assert elu(np.array(1.0)) == 1.0
    # closed form e^-1 - 1
    assert elu(np.array(-1.0)) == pytest.approx(-0.6321205588285577, abs=1e-12)


def test_sigmoid_renorm_midpoint_and_saturation():
    net = Mlp([Linear(np.ones((1, 1)), np.zeros(1), "sigmoid_renorm")])
    assert net(np.array([[0.0]]))[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert net(np.array([[1e6]]))[0, 0] == pytest.approx(2.5)
    assert net(np.array([[-1e6]]))[0, 0] == pytest.approx(-2.5)


def test_sigmoid_only_on_last_layer():
    with pytest.raises(ConfigurationError):
        Mlp([Linear(np.eye(2), np.zeros(2), "sigmoid_renorm"), Linear(np.eye(2), np.zeros(2), "elu")])


def test_dims_must_chain():
    with pytest.raises(ConfigurationError):
        Mlp([Linear(np.ones((3, 2)), np.zeros(3), "elu"), Linear(np.ones((1, 2)), np.zeros(1), "identity")])


def test_wrong_input_width_rejected(rng):
    net = Mlp.build([3, 4, 2], rng)
    with pytest.raises(ConfigurationError):
        net(np.zeros((5, 4)))


def test_he_init_scale(rng):
    net = Mlp.build([400, 300, 2], rng, out_scale=0.01, dtype=np.float64)
    assert np.std(net.layers[0].weight) == pytest.approx(math.sqrt(2 / 400), rel=0.02)
    assert np.std(net.layers[1].weight) == pytest.approx(0.01 * math.sqrt(2 / 300), rel=0.1)
    assert not np.any(net.layers[0].bias)


# ----------------------------------------------------------------- backward

def test_zero_output_grad_gives_zero_grads(rng):
    net = Mlp.build([3, 5, 2], rng, dtype=np.float64)
    _, cache = net.forward(rng.standard_normal((4, 3)))
    grads, gin = net.backward(cache, np.zeros((4, 2)))
    assert all(not np.any(g) for g in grads)
    assert not np.any(gin)


def test_linear_weight_grad_is_input_row():
    net = Mlp([Linear(np.zeros((2, 3)), np.zeros(2), "identity")])
    x = np.array([[1.0, -2.0, 3.0]])
    _, cache = net.forward(x)
    grads, _ = net.backward(cache, np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(grads[0], [[1.0, -2.0, 3.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(grads[1], [1.0, 0.0])


@pytest.mark.parametrize("seed", range(10))
def test_random_two_layer_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.build([4, 6, 3], rng, out_act="sigmoid_renorm", dtype=np.float64)
    x = rng.standard_normal((5, 4))
    assert check_net_gradients(net, x, rng) <= 1.0


def test_backward_rejects_foreign_cache(rng):
    a = Mlp.build([2, 3, 1], rng)
    b = Mlp.build([2, 3, 3, 1], rng)
    _, cache = a.forward(np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        b.backward(cache, np.zeros((1, 1)))


# --------------------------------------------------------------- clipping

def test_clip_halves_at_twice_the_norm():
    g = GradientSet([np.array([3.0, 4.0])])  # norm 5
    out = clip_grad_norm(g, 2.5)
    np.testing.assert_allclose(out[0], [1.5, 2.0])


def test_clip_below_threshold_is_identity():
    g = GradientSet([np.array([3.0, 4.0])])
    assert clip_grad_norm(g, 10.0) is g


def test_clip_zero_grads():
    out = clip_grad_norm(GradientSet([np.zeros(3)]), 1.0)
    assert not np.any(out[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_clip_never_exceeds_bound(vals, g_max):
    out = clip_grad_norm(GradientSet([np.array(vals)]), g_max)
    assert out.global_norm <= g_max * (1 + 1e-9)


# -------------------------------------------------------------- optimizers

def test_adamw_zero_grads_no_decay_keeps_params():
    p = np.array([1.0, -2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = np.array([0.0])
    Adam([p], lr=0.1).step([np.array([1.0])])
    # bias-corrected first step is lr * g / (|g| + eps')
    assert p[0] == pytest.approx(-0.1, rel=1e-6)


def test_adamw_decay_scales_params():
    p = np.array([2.0, -4.0])
    AdamW([p], lr=0.1, weight_decay=0.5).step([np.zeros(2)])
    np.testing.assert_allclose(p, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_adam_matches_reference_over_steps(rng):
    # textbook Adam written out independently
    p = rng.standard_normal(4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        opt.step([g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adam_rejects_non_finite():
    p = np.zeros(2)
    with pytest.raises(TrainingDivergenceError):
        Adam([p]).step([np.array([np.nan, 0.0])])
    np.testing.assert_array_equal(p, 0.0)


# ------------------------------------------------------------------ losses

def test_l1_values():
    assert l1_loss(np.zeros(2), np.zeros(2))[0] == 0.0
    assert l1_loss(np.array([1.0, -1.0]), np.zeros(2))[0] == 1.0


def test_l1_grad_matches_finite_differences(rng):
    pred = rng.standard_normal((3, 2))
    target = pred + rng.choice([-1, 1], size=pred.shape) * rng.uniform(0.1, 1, size=pred.shape)
    _, g = l1_loss(pred, target)
    num = numeric_grad(lambda: l1_loss(pred, target)[0], [pred])
    assert compare([g], num) <= 1.0


def test_l1_shape_mismatch():
    with pytest.raises(ConfigurationError):
        l1_loss(np.zeros(2), np.zeros(3))


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_identical(tmp_path, rng):
    net = Mlp.build([3, 5, 2], rng, out_act="sigmoid_renorm")
    save_params(net, tmp_path / "n.ckpt")
    back = load_params(tmp_path / "n.ckpt", like=net)
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_manifest_contract(tmp_path, rng):
    net = Mlp.build([3, 5, 2], rng)
    save_params(net, tmp_path / "n.ckpt")
    manifest = json.loads((tmp_path / "n.ckpt").read_bytes().split(b"\n", 1)[0])
    assert manifest["format_version"] == nn_core.FORMAT_VERSION
    assert manifest["modules"]["net"]["dims"] == [3, 5, 2]
    assert manifest["modules"]["net"]["activations"] == ["elu", "identity"]


def test_checkpoint_rejects_mismatched_architecture(tmp_path, rng):
    save_params(Mlp.build([3, 5, 2], rng), tmp_path / "n.ckpt")
    with pytest.raises(CheckpointIncompatibleError):
        load_params(tmp_path / "n.ckpt", like=Mlp.build([3, 6, 2], rng))


def test_checkpoint_rejects_truncated_blob(tmp_path, rng):
    save_params(Mlp.build([3, 5, 2], rng), tmp_path / "n.ckpt")
    data = (tmp_path / "n.ckpt").read_bytes()
    (tmp_path / "n.ckpt").write_bytes(data[:-4])
    with pytest.raises(CheckpointIncompatibleError):
        load_params(tmp_path / "n.ckpt")


# ------------------------------------------------------------ update sizes

def test_param_delta_values():
    before = Mlp([Linear(np.zeros((1, 1)), np.zeros(1), "identity")])
    after = before.copy()
    assert param_delta(before, after) == [0.0]
    after.layers[0].weight[0, 0] = 0.2
    assert param_delta(before, after) == [pytest.approx(0.1)]


def test_submodule_delta_averages_layers():
    before = Mlp([Linear(np.zeros((1, 1)), np.zeros(1), "elu"), Linear(np.zeros((1, 1)), np.zeros(1), "identity")])
    after = before.copy()
    after.layers[0].weight[0, 0] = 0.2  # layer value 0.1
    after.layers[1].weight[0, 0] = 0.6  # layer value 0.3
    assert submodule_delta({"m": before}, {"m": after})["m"] == pytest.approx(0.2)

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airglyph.nn import (
    AdamState,
    Conv1d,
    Dense,
    GlobalAvgPool,
    MaxPool,
    NetSpec,
    Network,
    ReLU,
    ShapeError,
    adam_step,
    softmax,
    softmax_cross_entropy,
    encoder_spec,
    grad_check,
    relative_error,
)


def test_identity_dense_passes_input_through():
    net = Network(NetSpec((Dense(4),), input_shape=(1, 4)))
    net.params[0]["W"] = np.eye(4)
    x = np.array([[1.0, -2.0, 3.5, 0.0]])
    np.testing.assert_array_equal(net.predict(x), x[0])


def test_unit_width_ones_kernel_is_identity():
    net = Network(NetSpec((Conv1d(1, 1), Dense(5)), input_shape=(5, 1)))
    net.params[0]["W"] = np.ones((1, 1, 1))
    net.params[1]["W"] = np.eye(5)
    x = np.arange(5.0)[:, None] - 2
    np.testing.assert_array_equal(net.predict(x), x[:, 0])


def test_relu_definition():
    net = Network(NetSpec((Dense(3), ReLU()), input_shape=(1, 3)))
    net.params[0]["W"] = np.eye(3)
    np.testing.assert_array_equal(net.predict(np.array([[-1.0, 0.0, 2.0]])), [0.0, 0.0, 2.0])


def test_maxpool_and_gap_values():
    x = np.array([[1.0], [5.0], [-2.0], [0.5], [9.0]])
    pool = Network(NetSpec((MaxPool(2), Dense(2)), input_shape=(5, 1)))
    pool.params[1]["W"] = np.eye(2)
    np.testing.assert_array_equal(pool.predict(x), [5.0, 0.5])
    gap = Network(NetSpec((GlobalAvgPool(),), input_shape=(5, 1)))
    np.testing.assert_allclose(gap.predict(x), [x.mean()])


def test_conv_against_direct_sum():
    rng = np.random.default_rng(0)
    layer = Conv1d(4, 3, stride=2, padding=1)
    net = Network(NetSpec((layer, GlobalAvgPool()), input_shape=(11, 2)), seed=1)
    net.params[0]["b"] = rng.normal(size=4)
    x = rng.normal(size=(11, 2))
    out, cache = net.forward(x)
    xp = np.pad(x, ((1, 1), (0, 0)))
    W, b = net.params[0]["W"], net.params[0]["b"]
    t_out = (11 + 2 - 3) // 2 + 1
    direct = np.array([[sum(xp[2 * t + k, c] * W[k, c, o] for k in range(3) for c in range(2)) + b[o]
                        for o in range(4)] for t in range(t_out)])
    np.testing.assert_allclose(out, direct.mean(axis=0), rtol=1e-12)


def test_shape_errors_name_the_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        NetSpec((Conv1d(4, 3), Conv1d(4, 30)), input_shape=(16, 3))
    with pytest.raises(ShapeError, match="vector"):
        NetSpec((Conv1d(4, 3),), input_shape=(16, 3))
    net = Network(encoder_spec(8, 32))
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((31, 3)))


def test_forward_is_deterministic():
    net = Network(encoder_spec(8, 64), seed=3)
    x = np.random.default_rng(1).normal(size=(4, 64, 3))
    a, b = net.predict(x), net.predict(x)
    assert a.tobytes() == b.tobytes()
    assert Network(encoder_spec(8, 64), seed=3).predict(x).tobytes() == a.tobytes()


def test_default_init_is_glorot_uniform():
    net = Network(NetSpec((Dense(50),), input_shape=(1, 200)), seed=0)
    W = net.params[0]["W"]
    limit = np.sqrt(6 / 250)
    assert np.abs(W).max() <= limit
    assert np.abs(W).max() > 0.95 * limit
    assert np.all(net.params[0]["b"] == 0)


def test_zero_output_grad_gives_zero_gradients():
    net = Network(encoder_spec(6, 32, head="gap"), seed=0)
    x = np.random.default_rng(0).normal(size=(2, 32, 3))
    out, cache = net.forward(x)
    pg, xg = net.backward(cache, np.zeros_like(out))
    assert all(np.all(g == 0) for p in pg for g in p.values())
    assert np.all(xg == 0)


def test_dense_one_by_one_gradient():
    net = Network(NetSpec((Dense(1),), input_shape=(1, 1)))
    x, g = 1.75, -0.5
    out, cache = net.forward(np.array([[x]]))
    pg, xg = net.backward(cache, np.array([g]))
    assert pg[0]["W"][0, 0] == x * g
    assert pg[0]["b"][0] == g
    assert xg[0, 0] == net.params[0]["W"][0, 0] * g


def test_backward_rejects_foreign_cache():
    a, b = Network(encoder_spec(4, 32), seed=0), Network(encoder_spec(4, 32), seed=0)
    _, cache = a.forward(np.zeros((32, 3)))
    with pytest.raises(ValueError, match="cache"):
        b.backward(cache, np.zeros(4))
    with pytest.raises(ShapeError):
        a.backward(cache, np.zeros(5))


def test_small_two_layer_net_passes_grad_check():
    net = Network(NetSpec((Conv1d(4, 3), ReLU(), GlobalAvgPool(), Dense(5)), input_shape=(12, 3)), seed=2)
    assert net.n_params <= 500
    r = grad_check(net, np.random.default_rng(0).normal(size=(12, 3)), h=1e-4, include_input=True,
                   max_per_array=None)
    assert r.max_rel_error <= 1e-4
    assert r.n_checked > 0


def _layers_strategy():
    conv = st.builds(lambda c, k, s, p: Conv1d(c, k, s, p), st.integers(1, 4), st.integers(1, 4),
                     st.integers(1, 2), st.integers(0, 2))
    return st.lists(st.one_of(conv, st.just(ReLU()), st.builds(MaxPool, st.integers(1, 2))), min_size=1,
                    max_size=4)


@settings(max_examples=60, deadline=None)
@given(_layers_strategy(), st.sampled_from(["gap", "dense"]), st.integers(6, 20), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 10 ** 6))
def test_grad_check_random_compositions(body, head, T, C, B, seed):
    tail = (GlobalAvgPool(), Dense(3)) if head == "gap" else (Dense(3),)
    try:
        spec = NetSpec(tuple(body) + tail, input_shape=(T, C))
    except ShapeError:
        return
    net = Network(spec, seed=seed)
    x = np.random.default_rng(seed).normal(size=(B, T, C))
    r = grad_check(net, x, h=1e-4, include_input=True, max_per_array=None)
    assert r.max_rel_error <= 1e-4


@pytest.mark.parametrize("layer", [Conv1d(3, 3, 1, 1), Conv1d(2, 5, 2, 0), ReLU(), MaxPool(3), GlobalAvgPool()])
def test_grad_check_each_layer_type(layer):
    tail = () if isinstance(layer, GlobalAvgPool) else (GlobalAvgPool(),)
    net = Network(NetSpec((layer,) + tail + (Dense(2),), input_shape=(15, 2)), seed=4)
    r = grad_check(net, np.random.default_rng(1).normal(size=(15, 2)), include_input=True, max_per_array=None)
    assert r.max_rel_error <= 1e-4


def test_encoders_pass_grad_check():
    for head in ("flatten", "gap"):
        net = Network(encoder_spec(16, 128, head=head), seed=0)
        r = grad_check(net, np.random.default_rng(0).normal(size=(2, 128, 3)), include_input=True)
        assert r.max_rel_error <= 1e-4


def test_corrupted_gradient_is_caught():
    net = Network(NetSpec((Conv1d(4, 3), ReLU(), GlobalAvgPool(), Dense(5)), input_shape=(12, 3)), seed=2)

    def wrong(net, cache, grad):
        pg, xg = net.backward(cache, grad)
        return [{k: v * 1.05 for k, v in p.items()} for p in pg], xg

    r = grad_check(net, np.random.default_rng(0).normal(size=(12, 3)), grad_fn=wrong, max_per_array=None)
    assert r.max_rel_error > 1e-2


def test_linear_net_gradient_is_exact():
    net = Network(NetSpec((Conv1d(3, 2), Dense(4)), input_shape=(10, 3)), seed=5)
    # central differences of a linear map are exact for any step; a unit step
    # keeps cancellation far below 1e-10
    r = grad_check(net, np.random.default_rng(2).normal(size=(10, 3)), h=1.0, include_input=True,
                   max_per_array=None)
    assert r.max_rel_error <= 1e-10


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)


def test_adam_zero_gradient_leaves_params():
    p = [{"W": np.array([1.0, -2.0])}]
    state = AdamState(lr=0.1)
    adam_step(state, p, [{"W": np.zeros(2)}])
    np.testing.assert_array_equal(p[0]["W"], [1.0, -2.0])
    assert state.step == 1


def test_adam_constant_gradient_descends():
    p = [{"W": np.array([0.0, 0.0])}]
    state = AdamState(lr=0.01)
    for _ in range(100):
        adam_step(state, p, [{"W": np.array([0.3, -2.0])}])
    assert p[0]["W"][0] < 0 < p[0]["W"][1]
    assert state.step == 100


def test_adam_first_step_magnitude():
    # bias correction makes m_hat = g and v_hat = g^2, so the step is lr * |g| / (|g| + eps)
    g, lr, eps = 0.5, 1e-3, 1e-8
    p = [{"W": np.array([0.0])}]
    adam_step(AdamState(lr=lr, eps=eps), p, [{"W": np.array([g])}])
    assert p[0]["W"][0] == pytest.approx(-9.9999998e-4, rel=1e-12)


def test_adam_state_validation():
    for kw in ({"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}):
        with pytest.raises(ValueError):
            AdamState(**kw)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), [{"W": np.zeros(2)}], [{"W": np.zeros(3)}])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1.0, 1e3))
def test_outputs_stay_finite_with_large_params(seed, bound):
    net = Network(encoder_spec(8, 32), seed=seed)
    rng = np.random.default_rng(seed)
    for p in net.params:
        for k in p:
            p[k] = rng.uniform(-bound, bound, size=p[k].shape)
    x = rng.normal(size=(2, 32, 3)) * 10
    out, cache = net.forward(x)
    pg, xg = net.backward(cache, np.ones_like(out))
    assert np.all(np.isfinite(out)) and np.all(np.isfinite(xg))
    assert all(np.all(np.isfinite(g)) for p in pg for g in p.values())
    loss, d = softmax_cross_entropy(out, np.array([0, 1]))
    assert np.isfinite(loss) and np.all(np.isfinite(d))


def test_softmax_is_a_distribution():
    p = softmax(np.array([[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[1], 1 / 3)


def test_cross_entropy_gradient_by_differences():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(4, 5)), np.array([0, 3, 1, 4])
    _, d = softmax_cross_entropy(z, y)
    h = 1e-6
    for i in range(4):
        for j in range(5):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            num = (softmax_cross_entropy(zp, y)[0] - softmax_cross_entropy(zm, y)[0]) / (2 * h)
            assert d[i, j] == pytest.approx(num, abs=1e-8)


def test_checkpoint_round_trip(tmp_path):
    net = Network(encoder_spec(8, 64), seed=7)
    path = tmp_path / "net.json"
    path.write_text(json.dumps(net.to_checkpoint()))
    back = Network.from_checkpoint(json.loads(path.read_text()))
    assert back.spec == net.spec
    assert back.seed == 7
    assert back.fingerprint() == net.fingerprint()
    x = np.random.default_rng(0).normal(size=(64, 3))
    assert back.predict(x).tobytes() == net.predict(x).tobytes()


def test_checkpoint_validation():
    ck = Network(encoder_spec(8, 64)).to_checkpoint()
    with pytest.raises(ValueError):
        Network.from_checkpoint({**ck, "format": "other"})
    ck["params"][0]["W"]["shape"] = [1, 1]
    ck["params"][0]["W"]["values"] = [0.0]
    with pytest.raises(ValueError, match="layer 0"):
        Network.from_checkpoint(ck)


def test_fingerprint_tracks_parameters():
    net = Network(encoder_spec(8, 64), seed=0)
    fp = net.fingerprint()
    net.params[-1]["b"][0] += 1e-9
    assert net.fingerprint() != fp

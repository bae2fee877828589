import numpy as np
import pytest
from fd import numeric_grad, rel_error

from endovo.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from endovo.errors import (ConfigurationError, DegenerateRotationError, DimensionError, NumericError, StateError,
                           ValidationError)
from endovo.model import (GATES, EndoVONet, LstmState, NetConfig, _lstm_seq_bwd, _lstm_seq_fwd, extract_pose,
                          inception_forward, init_params, inception_param_shapes, lstm_sequence_forward, lstm_step,
                          model_backward, model_forward, param_shapes, zero_params)

SMALL = NetConfig(height=16, width=16, inception_widths=((2, 2, 2, 2), (2, 3, 2, 2), (3, 2, 2, 2)),
                  lstm_hidden=8, precision="float64")


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def reference_lstm(x, h_prev, c_prev, lp):
    """The five gate equations written out one by one."""
    z = np.concatenate([x, h_prev])
    f = _sigmoid(lp["W_f"] @ z + lp["b_f"])
    i = _sigmoid(lp["W_i"] @ z + lp["b_i"])
    g = np.tanh(lp["W_g"] @ z + lp["b_g"])
    c = f * c_prev + i * g
    o = _sigmoid(lp["W_o"] @ z + lp["b_o"])
    h = o * np.tanh(c)
    return h, c, (f, i, g, o)


def lstm_params(rng, n, h, scale=1.0):
    lp = {f"W_{g}": scale * rng.standard_normal((h, n + h)) for g in GATES}
    lp.update({f"b_{g}": scale * rng.standard_normal(h) for g in GATES})
    return lp


def zero_lstm(n, h):
    lp = {f"W_{g}": np.zeros((h, n + h)) for g in GATES}
    lp.update({f"b_{g}": np.zeros(h) for g in GATES})
    return lp


# ---------------------------------------------------------------- config

def test_netconfig_validation():
    with pytest.raises(ConfigurationError):
        NetConfig(height=20)
    with pytest.raises(ConfigurationError):
        NetConfig(lstm_hidden=0)
    cfg = NetConfig()
    assert cfg.feature_size == 128 * 8 * 8
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_param_shapes_lstm_layout():
    shapes = param_shapes(NetConfig(height=16, width=16, lstm_hidden=5))
    assert shapes["lstm1.W_f"] == (5, 128 * 2 * 2 + 5)
    assert shapes["lstm2.W_o"] == (5, 10)
    assert shapes["reg.W"] == (7, 5)


def test_init_params_conventions():
    p = init_params(NetConfig(height=16, width=16, lstm_hidden=6), seed=3)
    assert np.all(p["lstm1.b_f"] == 1.0) and np.all(p["lstm1.b_i"] == 0.0)
    assert np.abs(p["lstm2.W_g"]).max() <= 0.08
    assert not p["reg.b"].any()
    # glorot limits: 1x1 over 8 -> 8 channels, 3x3 over 8 -> 8 channels
    assert np.abs(p["inc1.b3r.W"]).max() <= np.sqrt(6.0 / (8 + 8))
    assert np.abs(p["inc1.b3.W"]).max() <= np.sqrt(6.0 / (72 + 72))


# ---------------------------------------------------------------- inception

def _block(in_ch, widths, fill=0.0):
    bp = {}
    for br, shp in inception_param_shapes(in_ch, widths).items():
        bp[f"{br}.W"] = np.full(shp, fill)
        bp[f"{br}.b"] = np.zeros(shp[0])
    return bp


def test_inception_zero_weights():
    out = inception_forward(np.random.default_rng(0).standard_normal((3, 8, 8)), _block(3, (2, 3, 4, 5)))
    assert out.shape == (14, 4, 4)
    assert not out.any()


def test_inception_identity_branch():
    bp = _block(1, (1, 1, 1, 1))
    bp["b1.W"][:] = 1.0
    out = inception_forward(np.ones((1, 4, 4)), bp)
    # the 1x1 branch reproduces the all-ones input, then 2x2 pooling keeps it
    assert np.array_equal(out[0], np.ones((2, 2)))
    assert not out[1:].any()


@pytest.mark.parametrize("widths", [(1, 1, 1, 1), (2, 5, 3, 7), (8, 8, 8, 8)])
def test_inception_channel_arithmetic(widths):
    out = inception_forward(np.zeros((2, 3, 4, 4)), _block(3, widths))
    assert out.shape == (2, sum(widths), 2, 2)


def test_inception_width_mismatch():
    with pytest.raises((ConfigurationError, DimensionError)):
        inception_forward(np.zeros((2, 4, 4)), _block(3, (1, 1, 1, 1)))


# ---------------------------------------------------------------- LSTM

def test_lstm_zero_weights():
    lp = zero_lstm(3, 4)
    s = lstm_step(np.ones(3), LstmState.zeros(4), lp)
    _, _, (f, i, g, o) = reference_lstm(np.ones(3), np.zeros(4), np.zeros(4), lp)
    assert np.all(f == 0.5) and np.all(i == 0.5) and np.all(o == 0.5) and np.all(g == 0.0)
    assert np.all(s.h == 0.0) and np.all(s.c == 0.0)


def test_lstm_large_forget_bias():
    lp = zero_lstm(1, 1)
    lp["b_f"][:] = 10.0
    s = lstm_step(np.zeros(1), LstmState(np.zeros(1), np.ones(1)), lp)
    assert np.isclose(s.c[0], _sigmoid(10.0), rtol=0, atol=1e-15)
    assert abs(s.c[0] - 0.99995) < 1e-5
    assert np.isclose(s.h[0], 0.5 * np.tanh(s.c[0]), rtol=0, atol=1e-15)


def test_lstm_random_four_unit_against_reference():
    rng = np.random.default_rng(11)
    lp = lstm_params(rng, 3, 4)
    x, h, c = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
    s = lstm_step(x, LstmState(h, c), lp)
    hr, cr, _ = reference_lstm(x, h, c, lp)
    assert np.max(np.abs(s.h - hr)) < 1e-12 and np.max(np.abs(s.c - cr)) < 1e-12


def test_lstm_hidden_bound():
    rng = np.random.default_rng(2)
    lp = lstm_params(rng, 5, 6, scale=5.0)
    states = lstm_sequence_forward(rng.standard_normal((50, 5)) * 10, LstmState.zeros(6), lp)
    assert all(np.abs(s.h).max() <= 1.0 for s in states)


def test_lstm_errors():
    lp = zero_lstm(2, 3)
    with pytest.raises(NumericError):
        lstm_step(np.array([np.nan, 0.0]), LstmState.zeros(3), lp)
    with pytest.raises(DimensionError):
        lstm_step(np.zeros(4), LstmState.zeros(3), lp)
    with pytest.raises(DimensionError):
        lstm_sequence_forward([], LstmState.zeros(3), lp)


def test_lstm_sequence_length_one_and_zero_weights():
    rng = np.random.default_rng(4)
    lp = lstm_params(rng, 2, 3)
    x = rng.standard_normal(2)
    (s,) = lstm_sequence_forward([x], LstmState.zeros(3), lp)
    t = lstm_step(x, LstmState.zeros(3), lp)
    assert np.array_equal(s.h, t.h) and np.array_equal(s.c, t.c)
    states = lstm_sequence_forward(rng.standard_normal((6, 2)), LstmState.zeros(3), zero_lstm(2, 3))
    assert all(not s.h.any() for s in states)


def test_lstm_two_step_composition():
    rng = np.random.default_rng(5)
    lp = lstm_params(rng, 2, 3)
    xs = rng.standard_normal((2, 2))
    states = lstm_sequence_forward(xs, LstmState.zeros(3), lp)
    h1, c1, _ = reference_lstm(xs[0], np.zeros(3), np.zeros(3), lp)
    h2, c2, _ = reference_lstm(xs[1], h1, c1, lp)
    assert np.max(np.abs(states[1].h - h2)) < 1e-12 and np.max(np.abs(states[1].c - c2)) < 1e-12


def test_batched_sequence_matches_fold():
    rng = np.random.default_rng(6)
    lp = lstm_params(rng, 4, 5, 0.5)
    xs = rng.standard_normal((7, 3, 4))
    init = LstmState(rng.standard_normal((3, 5)) * 0.1, rng.standard_normal((3, 5)) * 0.1)
    hs, final, _ = _lstm_seq_fwd(xs, init, lp)
    states = lstm_sequence_forward(list(xs), init, lp)
    assert np.allclose(hs[-1], states[-1].h, rtol=0, atol=1e-14)
    assert np.allclose(final.c, states[-1].c, rtol=0, atol=1e-14)


def test_two_step_scalar_lstm_gradient():
    rng = np.random.default_rng(8)
    lp = lstm_params(rng, 1, 1)
    xs = rng.standard_normal((2, 1, 1))
    w = rng.standard_normal((2, 1, 1))
    init = LstmState(np.zeros((1, 1)), np.zeros((1, 1)))

    def f():
        return float((_lstm_seq_fwd(xs, init, lp)[0] * w).sum())

    _, _, cache = _lstm_seq_fwd(xs, init, lp)
    dxs, grads, _, _ = _lstm_seq_bwd(w, cache)
    for name in lp:
        assert rel_error(grads[name].ravel(), numeric_grad(f, lp[name])) < 1e-6, name
    assert rel_error(dxs.ravel(), numeric_grad(f, xs)) < 1e-6


def test_single_step_gradient_is_plain_backprop():
    rng = np.random.default_rng(9)
    n, h = 3, 2
    lp = lstm_params(rng, n, h)
    x = rng.standard_normal(n)
    c0 = rng.standard_normal(h)
    h0 = rng.standard_normal(h)
    dh = rng.standard_normal(h)
    _, _, cache = _lstm_seq_fwd(x[None, None], LstmState(h0[None], c0[None]), lp)
    _, grads, _, _ = _lstm_seq_bwd(dh[None, None], cache)
    # non-recurrent chain rule for h = o * tanh(f*c0 + i*g)
    hk, c, (f, i, g, o) = reference_lstm(x, h0, c0, lp)
    z = np.concatenate([x, h0])
    dc = dh * o * (1 - np.tanh(c) ** 2)
    pre = {"f": dc * c0 * f * (1 - f), "i": dc * g * i * (1 - i),
           "g": dc * i * (1 - g ** 2), "o": dh * np.tanh(c) * o * (1 - o)}
    for k, d in pre.items():
        assert np.allclose(grads[f"W_{k}"], np.outer(d, z), rtol=1e-12, atol=1e-14)
        assert np.allclose(grads[f"b_{k}"], d, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- full model

def test_zero_weights_output_is_regressor_bias():
    cfg = NetConfig(height=16, width=16, lstm_hidden=4, precision="float64")
    p = zero_params(cfg)
    p["reg.b"][:] = [1, 2, 3, 4, 5, 6, 7]
    pair = np.random.default_rng(0).standard_normal((8, 16, 16))
    raw, s1, s2 = model_forward(pair, LstmState.zeros(4), LstmState.zeros(4), p, cfg)
    assert raw.shape == (7,)
    assert np.array_equal(raw, p["reg.b"])
    assert not s1.h.any() and not s2.h.any()


def test_forward_shapes_and_determinism():
    net = EndoVONet(SMALL, seed=2)
    x = np.random.default_rng(1).standard_normal((4, 3, 8, 16, 16))
    a, (s1, s2), _ = net.forward(x)
    b, _, _ = net.forward(x)
    assert a.shape == (4, 3, 7) and s1.h.shape == (3, 8)
    assert np.array_equal(a, b)
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((1, 1, 8, 8, 8)))


def test_state_threading_matches_one_window():
    net = EndoVONet(SMALL, seed=2)
    x = np.random.default_rng(1).standard_normal((6, 2, 8, 16, 16))
    whole, _, _ = net.forward(x)
    first, st, _ = net.forward(x[:3])
    second, _, _ = net.forward(x[3:], st)
    assert np.allclose(np.concatenate([first, second]), whole, rtol=0, atol=1e-12)


def test_full_model_gradient_check():
    net = EndoVONet(SMALL, seed=1)
    rng = np.random.default_rng(0)
    for k in net.params:
        net.params[k] = net.params[k] + 0.1 * rng.standard_normal(net.params[k].shape)
    x = rng.standard_normal((2, 2, 8, 16, 16))
    w = rng.standard_normal((2, 2, 7))

    def f():
        return float((net.forward(x)[0] * w).sum())

    _, _, cache = net.forward(x)
    grads = model_backward(net, cache, w)
    worst = 0.0
    for name, p in net.params.items():
        idx = rng.choice(p.size, min(3, p.size), replace=False)
        worst = max(worst, rel_error(grads[name].ravel()[idx], numeric_grad(f, p, idx)))
    assert worst < 1e-3


def test_backward_zero_grads_and_cache_errors():
    net = EndoVONet(SMALL, seed=1)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 16, 16))
    _, _, cache = net.forward(x)
    grads = net.backward(cache, np.zeros((2, 1, 7)))
    assert set(grads) == set(net.params)
    assert all(not g.any() for g in grads.values())
    with pytest.raises(StateError):
        net.backward(cache, np.zeros((2, 1, 7)))
    with pytest.raises(StateError):
        net.backward(None, np.zeros((2, 1, 7)))


def test_dropout_only_in_train_mode():
    cfg = NetConfig(height=16, width=16, inception_widths=SMALL.inception_widths, lstm_hidden=8,
                    dropout_rate=0.5, precision="float64")
    net = EndoVONet(cfg, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 16, 16))
    a = net.forward(x)[0]
    b = net.forward(x, train=True, rng=np.random.default_rng(1))[0]
    assert np.array_equal(a, net.forward(x)[0])
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------- pose extraction

def test_extract_pose_examples():
    p = extract_pose(np.array([0, 0, 0, 1, 0, 0, 0.0]))
    assert np.array_equal(p.x, np.zeros(3)) and np.array_equal(p.q, [1, 0, 0, 0])
    p = extract_pose(np.array([1, 2, 3, 0, 2, 0, 0.0]))
    assert np.array_equal(p.x, [1, 2, 3]) and np.array_equal(p.q, [0, 1, 0, 0])
    p = extract_pose(np.array([1, 2, 3, 0, -2, 0, 0.0]))
    assert np.array_equal(p.q, [0, 1, 0, 0])


def test_extract_pose_sign_invariant_and_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(50):
        raw = rng.standard_normal(7)
        a = extract_pose(raw)
        neg = raw.copy()
        neg[3:] *= -1
        b = extract_pose(neg)
        assert np.array_equal(a.q, b.q) and a.q[0] >= 0
        assert abs(np.linalg.norm(a.q) - 1) < 1e-12
        c = extract_pose(np.concatenate([a.x, a.q]))
        assert np.allclose(c.q, a.q, rtol=0, atol=1e-15)


def test_extract_pose_degenerate():
    with pytest.raises(DegenerateRotationError):
        extract_pose(np.array([1, 2, 3, 0, 0, 0, 1e-9]))


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_byte_round_trip(tmp_path):
    params = init_params(SMALL, seed=4)
    blob = encode_checkpoint(SMALL, params, {"beta": 2.5})
    cfg, back, extra = decode_checkpoint(blob)
    assert cfg == SMALL and extra == {"beta": 2.5}
    assert all(np.array_equal(params[k], back[k]) for k in params)
    assert encode_checkpoint(cfg, back, extra) == blob
    path = tmp_path / "m.evo"
    save_checkpoint(path, SMALL, params, {"beta": 2.5})
    assert path.read_bytes() == blob
    assert encode_checkpoint(*load_checkpoint(path)) == blob


def test_checkpoint_float32_params_round_trip():
    cfg = NetConfig(height=16, width=16, lstm_hidden=4)
    params = init_params(cfg, seed=0)
    _, back, _ = decode_checkpoint(encode_checkpoint(cfg, params))
    assert all(back[k].dtype == np.float32 and np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_corruption():
    blob = encode_checkpoint(SMALL, init_params(SMALL, 0))
    with pytest.raises(ValidationError):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValidationError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(ValidationError):
        decode_checkpoint(blob + b"\0")

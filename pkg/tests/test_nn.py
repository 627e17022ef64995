import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import check_grads, module_grad_error
from mhavio import autodiff as ad
from mhavio.autodiff import Tensor
from mhavio.checkpoint import load_params, read_checkpoint, save_params
from mhavio.errors import ContractError, DimensionError, FormatError
from mhavio.nn import (GLOROT_GAIN, LSTM, Adam, AdamState, BatchNorm2d, Linear, LSTMCell, adam_step,
                       glorot_uniform)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_glorot_bounds_and_determinism():
    a = glorot_uniform(np.random.default_rng(0), (30, 20), 30, 20)
    b = glorot_uniform(np.random.default_rng(0), (30, 20), 30, 20)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= GLOROT_GAIN * np.sqrt(6.0 / 50)


# -- LSTM -----------------------------------------------------------------------------

def test_lstm_zero_weights_give_zero_outputs():
    lstm = LSTM(3, 4, 2, np.random.default_rng(0), bidirectional=True)
    for p in lstm.parameters():
        p.data[...] = 0.0
    out, _ = lstm(Tensor(np.random.default_rng(1).standard_normal((5, 2, 3))))
    np.testing.assert_array_equal(out.data, 0.0)
    assert out.shape == (5, 2, 8)


def test_lstm_single_step_hand_value():
    cell = LSTMCell(1, 1, np.random.default_rng(0))
    cell.w_ih.data[:] = [[0.3, -0.2, 0.5, 0.7]]
    cell.w_hh.data[:] = [[0.1, 0.1, 0.1, 0.1]]
    cell.bias.data[:] = [0.1, 0.2, -0.1, 0.0]
    x = 0.5
    i, f, g, o = sig(0.3 * x + 0.1), sig(-0.2 * x + 0.2), np.tanh(0.5 * x - 0.1), sig(0.7 * x)
    c = f * 0.0 + i * g
    h = o * np.tanh(c)
    outs, (h_T, c_T) = cell.run(Tensor(np.array([[[x]]])))
    assert abs(h_T.data.item() - h) < 1e-15
    assert abs(c_T.data.item() - c) < 1e-15


def test_lstm_width_mismatch():
    lstm = LSTM(3, 4, 1, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        lstm(Tensor(np.zeros((2, 1, 5))))
    with pytest.raises(DimensionError):
        lstm(Tensor(np.zeros((2, 3))))


def test_lstm_cell_grads_three_steps():
    rng = np.random.default_rng(3)
    lstm = LSTM(2, 3, 1, rng, bidirectional=False)
    for p in lstm.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((3, 2, 2))
    w = rng.standard_normal((3, 2, 3))
    assert module_grad_error(lstm, lambda: (lstm(Tensor(x))[0] * w).sum()) < 1e-4
    assert check_grads(lambda t: (lstm(t)[0] * w).sum(), x) < 1e-4


def test_deep_bidirectional_lstm_grads():
    rng = np.random.default_rng(4)
    lstm = LSTM(3, 4, 2, rng, bidirectional=True)
    x = rng.standard_normal((4, 2, 3))
    w = rng.standard_normal((4, 2, 8))
    assert module_grad_error(lstm, lambda: (lstm(Tensor(x))[0] * w).sum()) < 1e-3


def _tie(lstm):
    for layer in range(lstm.num_layers):
        fwd, bwd = getattr(lstm, f"l{layer}_fwd"), getattr(lstm, f"l{layer}_bwd")
        for name in ("w_ih", "w_hh", "bias"):
            getattr(bwd, name).data = getattr(fwd, name).data.copy()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_palindromic_input_tied_weights_mirror(seed, half):
    rng = np.random.default_rng(seed)
    lstm = LSTM(2, 3, 1, rng, bidirectional=True)
    _tie(lstm)
    first = rng.standard_normal((half, 1, 2))
    x = np.concatenate([first, first[::-1]])
    out, _ = lstm(Tensor(x))
    fwd, bwd = out.data[..., :3], out.data[..., 3:]
    np.testing.assert_allclose(bwd, fwd[::-1], atol=1e-14)


def test_lstm_state_threading_unidirectional():
    rng = np.random.default_rng(5)
    lstm = LSTM(2, 3, 2, rng, bidirectional=False)
    x = rng.standard_normal((6, 2, 2))
    full, _ = lstm(Tensor(x))
    a, st_a = lstm(Tensor(x[:2]))
    b, _ = lstm(Tensor(x[2:]), st_a)
    np.testing.assert_allclose(np.concatenate([a.data, b.data]), full.data, atol=1e-14)


# -- modules and checkpoints -------------------------------------------------------------

def test_state_dict_roundtrip_and_validation(tmp_path):
    rng = np.random.default_rng(0)
    lstm = LSTM(2, 3, 1, rng)
    path = tmp_path / "p.json"
    save_params(path, lstm.state_dict(), {"note": "x"})
    params, meta = read_checkpoint(path)
    assert meta == {"note": "x"}
    other = LSTM(2, 3, 1, np.random.default_rng(1))
    other.load_state_dict(params)
    for (n1, p1), (n2, p2) in zip(lstm.named_parameters(), other.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)

    before = other.state_dict()
    bad = dict(params)
    bad["l0_fwd.w_hh"] = np.zeros((2, 2))
    with pytest.raises(DimensionError, match="l0_fwd.w_hh"):
        other.load_state_dict(bad)
    for n, v in other.state_dict().items():
        np.testing.assert_array_equal(v, before[n])
    missing = dict(params)
    del missing["l0_bwd.bias"]
    with pytest.raises(ContractError, match="l0_bwd.bias"):
        other.load_state_dict(missing)


def test_checkpoint_truncated_and_foreign(tmp_path):
    path = tmp_path / "p.json"
    save_params(path, {"w": np.arange(6.0).reshape(2, 3)})
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        load_params(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(FormatError):
        load_params(path)


def test_checkpoint_values_bit_identical(tmp_path):
    w = np.random.default_rng(2).standard_normal((4, 5))
    save_params(tmp_path / "p.json", {"w": w})
    np.testing.assert_array_equal(load_params(tmp_path / "p.json")["w"], w)


def test_clone_is_independent():
    lin = Linear(2, 2, np.random.default_rng(0))
    twin = lin.clone()
    twin.weight.data += 1.0
    assert not np.array_equal(lin.weight.data, twin.weight.data)


def test_batchnorm_train_normalizes_eval_uses_running():
    bn = BatchNorm2d(2).train()
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(8, 2, 4, 4))
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    bn.eval()
    assert not np.allclose(bn(Tensor(x)).data, y)


# -- Adam ------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    out, _ = adam_step(p, [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_single_step_hand_value():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g = 0.5
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = 2.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    out, st_ = adam_step([np.array(2.0)], [np.array(g)], AdamState(), lr, b1, b2, eps)
    assert abs(float(out[0]) - expected) < 1e-15
    assert st_.step == 1


def test_adam_scalar_descent():
    w = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(50):
        opt.zero_grad()
        ((w - 3.0) ** 2).backward()
        opt.step()
    assert abs(float(w.data) - 3.0) < 0.5


def test_adam_missing_gradient():
    with pytest.raises(ContractError):
        adam_step([np.zeros(1), np.zeros(1)], [np.zeros(1), None], AdamState(), 0.1)


def test_adam_default_lr():
    assert Adam([]).lr == 5e-5

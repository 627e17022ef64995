import numpy as np
import pytest

from fd import check_grads, module_grad_error
from mhavio.autodiff import Tensor
from mhavio.checkpoint import save_params
from mhavio.dataset import ImageFrame
from mhavio.encoders import (InertialEncoder, InertialEncoderConfig, VisionEncoder, VisionEncoderConfig,
                             encode_inertial, encode_vision, flownet_vision_config, load_pretrained)
from mhavio.errors import ConfigError, ContractError, DimensionError, FormatError


def vision(seed=0, **kw):
    return VisionEncoder(VisionEncoderConfig(**kw), np.random.default_rng(seed))


def inertial(seed=0, **kw):
    return InertialEncoder(InertialEncoderConfig(**kw), np.random.default_rng(seed))


def frames(seed=0, B=2, shape=(3, 8, 16)):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, size=(B, 2, *shape))


def zero(module):
    for p in module.parameters():
        p.data[...] = 0.0
    return module


# -- vision ------------------------------------------------------------------------------

def test_vision_feature_width_matches_conv_arithmetic():
    enc = vision()
    assert enc.cfg.feature_map_size == (2, 4)
    assert enc(frames()).shape == (2, enc.feature_width) == (2, 16)


def test_flownet_schedule_shape():
    cfg = flownet_vision_config()
    assert cfg.num_layers == 17
    assert cfg.feature_map_size == (3, 10)


def test_vision_rejects_wrong_input():
    enc = vision()
    with pytest.raises(DimensionError):
        enc(np.zeros((1, 2, 3, 8, 15)))
    with pytest.raises(DimensionError):
        enc(np.zeros((2, 3, 8, 16)))
    with pytest.raises(DimensionError):
        encode_vision(ImageFrame(0.0, np.zeros((3, 8, 16))), ImageFrame(0.1, np.zeros((3, 8, 8))), enc)


def test_vanishing_input_rejected():
    with pytest.raises(ConfigError):
        VisionEncoderConfig(kernels=[5, 5, 5, 5], paddings=[0, 0, 0, 0], input_size=(8, 16))


def test_vision_zero_weights_give_zero_features():
    out = zero(vision())(frames()).data
    np.testing.assert_array_equal(out, 0.0)


def test_vision_deterministic_and_single_pair():
    a, b = vision(3), vision(3)
    x = frames(1)
    np.testing.assert_array_equal(a(x).data, b(x).data)
    f1, f2 = ImageFrame(0.0, x[0, 0]), ImageFrame(0.1, x[0, 1])
    np.testing.assert_array_equal(encode_vision(f1, f2, a).data, a(x).data[0])


def test_vision_pixel_gradient():
    enc = vision(2)
    x = frames(4, B=1)
    w = np.random.default_rng(5).standard_normal((1, enc.feature_width))
    assert check_grads(lambda t: (enc(t) * w).sum(), x) < 1e-4


def test_vision_parameter_gradient():
    enc = vision(6)
    x = frames(7, B=2)
    w = np.random.default_rng(8).standard_normal((2, enc.feature_width))
    assert module_grad_error(enc, lambda: (enc(Tensor(x)) * w).sum(), max_entries=20) < 1e-4


# -- inertial -----------------------------------------------------------------------------

def test_inertial_width_is_twice_hidden():
    enc = inertial()
    imu = np.random.default_rng(0).standard_normal((3, 10, 6))
    assert enc.feature_width == 30
    assert enc(imu).shape == (3, 30)
    assert enc.sequence(imu).shape == (10, 3, 30)
    assert inertial(bidirectional=False).feature_width == 15


def test_inertial_rejects_wrong_input():
    with pytest.raises(DimensionError):
        inertial()(np.zeros((1, 10, 5)))
    with pytest.raises(ConfigError):
        InertialEncoderConfig(hidden=0)
    with pytest.raises(ConfigError):
        InertialEncoderConfig(input_scale=[1.0])


def test_inertial_zero_weights_give_zero_features():
    out = zero(inertial())(np.random.default_rng(1).standard_normal((2, 10, 6))).data
    np.testing.assert_array_equal(out, 0.0)


def test_inertial_single_window_matches_batch():
    enc = inertial(2)
    imu = np.random.default_rng(3).standard_normal((2, 10, 6))
    np.testing.assert_allclose(encode_inertial(imu[1], enc).data, enc(imu).data[1], atol=1e-14)


def test_inertial_input_gradient():
    enc = inertial(4, hidden=4)
    imu = np.random.default_rng(5).standard_normal((2, 5, 6))
    w = np.random.default_rng(6).standard_normal((2, 8))
    assert check_grads(lambda t: (enc(t) * w).sum(), imu) < 1e-4


def test_reversed_sequence_swaps_directions_with_tied_weights():
    enc = inertial(7, hidden=3, layers=1)
    lstm = enc.lstm
    for name in ("w_ih", "w_hh", "bias"):
        getattr(lstm.l0_bwd, name).data = getattr(lstm.l0_fwd, name).data.copy()
    imu = np.random.default_rng(8).standard_normal((1, 6, 6))
    out = enc.sequence(imu).data
    rev = enc.sequence(imu[:, ::-1]).data
    np.testing.assert_allclose(rev[::-1, :, :3], out[:, :, 3:], atol=1e-14)
    np.testing.assert_allclose(rev[::-1, :, 3:], out[:, :, :3], atol=1e-14)


# -- pretrained weights -------------------------------------------------------------------

def test_load_pretrained_round_trip_with_prefix(tmp_path):
    src, dst = vision(1), vision(2)
    save_params(tmp_path / "w.json", {"vision." + n: v for n, v in src.state_dict().items()})
    load_pretrained(dst, tmp_path / "w.json", prefix="vision.")
    x = frames()
    np.testing.assert_array_equal(dst(x).data, src(x).data)


def test_load_pretrained_failures_leave_module_unchanged(tmp_path):
    enc = inertial(1)
    before = enc.state_dict()
    params = inertial(2).state_dict()

    path = tmp_path / "w.json"
    save_params(path, params)
    text = path.read_text()
    path.write_text(text[: len(text) // 3])
    with pytest.raises(FormatError):
        load_pretrained(enc, path)

    bad = dict(params)
    bad["lstm.l1_fwd.w_hh"] = np.zeros((2, 2))
    save_params(path, bad)
    with pytest.raises(DimensionError, match="lstm.l1_fwd.w_hh"):
        load_pretrained(enc, path)

    del bad["lstm.l0_bwd.bias"]
    save_params(path, bad)
    with pytest.raises(ContractError, match="lstm.l0_bwd.bias"):
        load_pretrained(enc, path)

    for n, v in enc.state_dict().items():
        np.testing.assert_array_equal(v, before[n])

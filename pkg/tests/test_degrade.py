import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhavio.dataset import ImageFrame, SynthConfig, synthesize
from mhavio.degrade import (KINDS, KITTI_RAW_SIZE, OCCLUSION_SIDE, DegradationSpec, apply_degradation,
                            build_degraded_suite, default_mask, drop_imu, imu_noise_bias, noise_and_blur, occlude,
                            suite_specs)
from mhavio.errors import ConfigError

PIXEL_LOW, PIXEL_HIGH = -0.5, 0.5


@pytest.fixture(scope="module")
def toy():
    return synthesize(SynthConfig(num_windows=40, noise=0.05), 0)


def frame(shape=(3, 20, 30), seed=0):
    # interior values so salt/pepper extremes are unambiguous
    return ImageFrame(0.0, np.random.default_rng(seed).uniform(-0.4, 0.4, size=shape))


def imu_block(n=10, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 6))


# -- occlusion ----------------------------------------------------------------------------

def test_default_occlusion_changes_mask_area_at_raw_size():
    f = ImageFrame(0.0, np.full((3, *KITTI_RAW_SIZE), 0.25))
    out = occlude(f, DegradationSpec("occlusion", params={"value": 0.0}), np.random.default_rng(0))
    assert np.count_nonzero(out.pixels != f.pixels) == OCCLUSION_SIDE * OCCLUSION_SIDE * 3


def test_zero_mask_is_identity():
    f = frame()
    out = occlude(f, DegradationSpec("occlusion", params={"mask": (0, 0)}), np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, f.pixels)


def test_occlusion_location_is_seeded():
    f = frame()
    spec = DegradationSpec("occlusion", params={"mask": (5, 7)})
    a = occlude(f, spec, np.random.default_rng(3)).pixels
    b = occlude(f, spec, np.random.default_rng(3)).pixels
    np.testing.assert_array_equal(a, b)


def test_oversized_mask_rejected():
    with pytest.raises(ConfigError):
        occlude(frame(), DegradationSpec("occlusion", params={"mask": (50, 5)}), np.random.default_rng(0))


def test_default_mask_scales_with_image():
    assert default_mask(KITTI_RAW_SIZE) == (OCCLUSION_SIDE, OCCLUSION_SIDE)
    assert default_mask((8, 16)) == (4, 3)


# -- noise and blur ---------------------------------------------------------------------

def test_noise_blur_zero_is_identity():
    f = frame()
    out = noise_and_blur(f, DegradationSpec("noise_blur", params={"fraction": 0.0, "sigma": 0.0}),
                         np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, f.pixels)


def test_salt_pepper_count():
    f = frame((1, 100, 100))
    out = noise_and_blur(f, DegradationSpec("noise_blur", params={"fraction": 0.1, "sigma": 0.0}),
                         np.random.default_rng(0))
    extreme = np.count_nonzero((out.pixels == PIXEL_LOW) | (out.pixels == PIXEL_HIGH))
    assert abs(extreme - 1000) <= 60


def test_blur_preserves_constant():
    f = ImageFrame(0.0, np.full((2, 9, 11), 0.3))
    out = noise_and_blur(f, DegradationSpec("noise_blur", params={"fraction": 0.0, "sigma": 1.5}),
                         np.random.default_rng(0))
    np.testing.assert_allclose(out.pixels, 0.3, atol=1e-15)


# -- IMU injectors ------------------------------------------------------------------------

def test_imu_noise_zero_is_identity():
    b = imu_block()
    out = imu_noise_bias(b, DegradationSpec("imu_noise_bias", params={"accel_std": 0.0}), np.random.default_rng(0))
    np.testing.assert_array_equal(out, b)


def test_gyro_bias_exact():
    # dyadic values keep (x + b) - x == b exact in binary floating point
    b = np.random.default_rng(0).integers(-64, 64, size=(10, 6)) / 8.0
    bias = [0.125, -0.25, 0.5]
    out = imu_noise_bias(b, DegradationSpec("imu_noise_bias", params={"accel_std": 0.0, "gyro_bias": bias}),
                         np.random.default_rng(0))
    np.testing.assert_array_equal(out[:, 3:] - b[:, 3:], np.tile(bias, (10, 1)))
    np.testing.assert_array_equal(out[:, :3], b[:, :3])


def test_accel_noise_std():
    b = np.zeros((10000, 6))
    out = imu_noise_bias(b, DegradationSpec("imu_noise_bias", params={"accel_std": 0.3}), np.random.default_rng(0))
    assert abs(out[:, :3].std() - 0.3) / 0.3 < 0.05


def test_drop_zero_is_identity():
    b = imu_block()
    np.testing.assert_array_equal(drop_imu(b, DegradationSpec("missing_imu", params={"drop_count": 0}),
                                           np.random.default_rng(0)), b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 9))
def test_drop_count_exact(seed, k):
    b = imu_block(seed=seed)   # consecutive rows differ almost surely
    out = drop_imu(b, DegradationSpec("missing_imu", params={"drop_count": k}), np.random.default_rng(seed))
    held = np.all(out[1:] == out[:-1], axis=1)
    assert held.sum() == k
    again = drop_imu(b, DegradationSpec("missing_imu", params={"drop_count": k}), np.random.default_rng(seed))
    np.testing.assert_array_equal(out, again)


def test_drop_all_rejected():
    with pytest.raises(ConfigError):
        drop_imu(imu_block(), DegradationSpec("missing_imu", params={"drop_count": 10}), np.random.default_rng(0))


# -- dataset level ---------------------------------------------------------------------------

def test_drop_images_count_and_pairs():
    ds = synthesize(SynthConfig(num_windows=100), 0)
    out = apply_degradation(ds, DegradationSpec("missing_image", rate=0.2, seed=4))
    same = [i for i in range(100) if np.array_equal(out.frames[i, 0], out.frames[i, 1])]
    assert abs(len(same) - 20) <= 8
    assert apply_degradation(ds, DegradationSpec("missing_image", rate=0.0)) is ds


@pytest.mark.parametrize("kind", KINDS)
def test_zero_rate_identity_and_seed_reproducible(toy, kind):
    params = suite_specs("all", toy.image_shape[1:], 0)[KINDS.index(kind)].params
    zero = apply_degradation(toy, DegradationSpec(kind, rate=0.0, params=params, seed=1))
    np.testing.assert_array_equal(zero.frames, toy.frames)
    np.testing.assert_array_equal(zero.imu, toy.imu)
    rate = 0.5
    a = apply_degradation(toy, DegradationSpec(kind, rate, params, seed=9))
    b = apply_degradation(toy, DegradationSpec(kind, rate, params, seed=9))
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.imu, b.imu)
    changed = not (np.array_equal(a.frames, toy.frames) and np.array_equal(a.imu, toy.imu))
    assert changed


def test_vision_suite_leaves_imu_untouched(toy):
    out = build_degraded_suite(toy, "vision", 3)
    assert out.imu.tobytes() == toy.imu.tobytes()
    assert not np.array_equal(out.frames, toy.frames)
    assert out.meta["suite"] == "vision"


def test_inertial_suite_leaves_pixels_untouched(toy):
    out = build_degraded_suite(toy, "inertial", 3)
    assert out.frames.tobytes() == toy.frames.tobytes()
    assert not np.array_equal(out.imu, toy.imu)


def test_all_suite_changes_both_streams(toy):
    out = build_degraded_suite(toy, "all", 7)
    assert np.any(np.any(out.frames != toy.frames, axis=(1, 2, 3, 4)))
    assert np.any(np.any(out.imu != toy.imu, axis=(1, 2)))
    again = build_degraded_suite(toy, "all", 7)
    np.testing.assert_array_equal(out.frames, again.frames)
    np.testing.assert_array_equal(out.imu, again.imu)


def test_nominal_suite_is_identity(toy):
    out = build_degraded_suite(toy, "nominal", 0)
    np.testing.assert_array_equal(out.frames, toy.frames)
    np.testing.assert_array_equal(out.imu, toy.imu)


def test_unknown_suite_and_spec_validation(toy):
    with pytest.raises(ConfigError):
        build_degraded_suite(toy, "fog", 0)
    with pytest.raises(ConfigError):
        DegradationSpec("rain")
    with pytest.raises(ConfigError):
        DegradationSpec("occlusion", rate=1.5)


def test_spec_round_trip():
    s = DegradationSpec("noise_blur", 0.3, {"fraction": 0.05, "sigma": 1.0}, 11)
    assert DegradationSpec.from_dict(s.to_dict()) == s

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eproxy import tensor as T
from eproxy.rng import Rng
from eproxy.targets import (BatchFormatError, FeatureCombo, TargetSpec, combine_targets, decode_epb, encode_epb,
                            gen_dot_target, gen_fcn_target, gen_input_batch, gen_sine_target, make_targets,
                            read_epb, write_epb)


def test_input_batch_deterministic_and_clipped():
    a = gen_input_batch(Rng(0))
    b = gen_input_batch(Rng(0))
    assert a.shape == (16, 3, 32, 32) and a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, gen_input_batch(Rng(1)))


def test_input_batch_errors():
    with pytest.raises(ValueError):
        gen_input_batch(Rng(0), source="imagenet")
    with pytest.raises(ValueError):
        gen_input_batch(None)
    with pytest.raises(ValueError):
        gen_input_batch(source="file")


def test_epb_roundtrip(tmp_path):
    x = gen_input_batch(Rng(2), b=2, h=8, w=8)
    path = tmp_path / "x.epb"
    write_epb(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"EPXB" and raw[4] == 1
    assert len(raw) == 4 + 1 + 16 + 4 * x.size
    y = read_epb(path)
    assert y.tobytes() == x.tobytes()
    assert gen_input_batch(source="file", path=path).tobytes() == x.tobytes()


def test_epb_errors_report_offsets():
    good = encode_epb(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(BatchFormatError, match="byte 0"):
        decode_epb(b"XXXX" + good[4:])
    with pytest.raises(BatchFormatError, match="byte 4"):
        decode_epb(good[:4] + b"\x02" + good[5:])
    with pytest.raises(BatchFormatError, match="byte 21"):
        decode_epb(good[:-1])
    with pytest.raises(BatchFormatError, match="truncated"):
        decode_epb(good[:10])


def test_fcn_target_dims_and_seed():
    x = gen_input_batch(Rng(3), b=4)
    spec = TargetSpec(8, 8)
    a = gen_fcn_target(x, spec, Rng(4))
    assert a.shape == (4, 16, 8, 8)
    np.testing.assert_array_equal(a, gen_fcn_target(x, spec, Rng(4)))
    assert np.linalg.norm(a - gen_fcn_target(x, spec, Rng(5))) > 0
    with pytest.raises(T.ShapeError):
        gen_fcn_target(x, TargetSpec(3, 3), Rng(4))


def test_fcn_target_at_earlier_taps():
    x = gen_input_batch(Rng(3), b=2)
    assert gen_fcn_target(x, TargetSpec(32, 32), Rng(0)).shape == (2, 16, 32, 32)
    assert gen_fcn_target(x, TargetSpec(16, 16), Rng(0)).shape == (2, 16, 16, 16)


def test_sine_target_values():
    y = gen_sine_target(TargetSpec(8, 8), batch=3)
    assert y.shape == (3, 16, 8, 8)
    assert not y[:, :, 0, 0].any()
    assert np.abs(y).max() <= 1
    # channel 0 uses (f_w, f_h) = (1, 1)
    assert y[0, 0, 2, 2] == pytest.approx(1.0)
    for k in range(1, 3):
        np.testing.assert_array_equal(y[0], y[k])


def test_dot_target_values():
    spec = TargetSpec(8, 8)
    y = gen_dot_target(spec, Rng(6), batch=2)
    assert set(np.unique(y)) == {-1.0, 1.0}
    np.testing.assert_array_equal(y[0], y[1])
    np.testing.assert_array_equal(y, gen_dot_target(spec, Rng(6), batch=2))
    means = [gen_dot_target(spec, Rng(s), batch=1).mean() for s in range(100)]
    assert sum(abs(m) <= 0.1 for m in means) >= 95


def test_feature_combo_validation():
    with pytest.raises(ValueError):
        FeatureCombo(False, False, False)
    with pytest.raises(ValueError):
        FeatureCombo(coeff_sine=0.7)


def test_combine_fcn_only_equals_fcn_target():
    x = gen_input_batch(Rng(7), b=2)
    spec = TargetSpec(8, 8)
    rng = Rng(8)
    np.testing.assert_array_equal(combine_targets(spec, x, rng), gen_fcn_target(x, spec, rng.spawn("fcn")))


def test_combine_sine_dot_range():
    x = gen_input_batch(Rng(7), b=2)
    spec = TargetSpec(8, 8, combo=FeatureCombo(False, True, True))
    y = combine_targets(spec, x, Rng(9))
    assert np.abs(y).max() <= 2


@settings(max_examples=15, deadline=None)
@given(use=st.sampled_from([(1, 0, 0), (0, 1, 1), (1, 1, 1), (1, 0, 1)]),
       coeffs=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0])] * 3), seed=st.integers(0, 2**32))
def test_combine_is_linear_in_coefficients(use, coeffs, seed):
    x = gen_input_batch(Rng(seed), b=2, h=16, w=16)
    combo = FeatureCombo(*map(bool, use), *coeffs)
    base = combine_targets(TargetSpec(4, 4, combo=combo), x, Rng(seed))
    doubled = combine_targets(TargetSpec(4, 4, combo=combo.scaled(2.0)), x, Rng(seed))
    np.testing.assert_allclose(doubled, 2 * base, rtol=1e-6, atol=1e-6)


def test_make_targets_is_seed_pure():
    x = gen_input_batch(Rng(10), b=2)
    spec = TargetSpec(8, 8, combo=FeatureCombo(True, True, True), seed=3)
    assert make_targets(spec, x).tobytes() == make_targets(spec, x).tobytes()

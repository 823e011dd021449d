import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal

from cardio_dg.dataio import EcgRecord
from cardio_dg.dsp import (
    BandpassSpec,
    WindowMode,
    WindowSpec,
    apply_bandpass,
    design_bandpass,
    preprocess,
    window,
    zscore_per_lead,
)

FS = 500.0
SOS = design_bandpass(BandpassSpec())


def gain_db(sos, f_hz, fs=FS):
    _, h = signal.sosfreqz(sos, worN=[f_hz], fs=fs)
    return 20 * np.log10(np.abs(h[0]))


def test_cutoffs_are_minus_3db_single_pass():
    assert abs(gain_db(SOS, 0.5) + 3.0103) < 0.5
    assert abs(gain_db(SOS, 45.0) + 3.0103) < 0.5


def test_passband_centre_is_unity():
    assert abs(gain_db(SOS, np.sqrt(0.5 * 45))) < 0.1


def test_cutoff_above_nyquist_rejected():
    with pytest.raises(ValueError, match="Nyquist"):
        BandpassSpec(high_hz=300, fs=500)
    with pytest.raises(ValueError):
        BandpassSpec(low_hz=10, high_hz=5)
    with pytest.raises(ValueError):
        BandpassSpec(order=0)


def test_coefficients_finite_and_order():
    assert SOS.shape == (2, 6) and np.all(np.isfinite(SOS))


def test_dc_is_rejected():
    y = apply_bandpass(np.full(5000, 7.0), SOS)
    assert y.shape == (5000,) and np.max(np.abs(y)) < 1e-3


def test_ten_hz_passes_with_unit_amplitude():
    t = np.arange(5000) / FS
    y = apply_bandpass(np.sin(2 * np.pi * 10 * t), SOS)
    mid = y[1000:4000]
    assert abs(np.max(np.abs(mid)) - 1.0) < 0.02


def test_empty_signal():
    assert apply_bandpass(np.zeros(0), SOS).size == 0


def test_baseline_wander_rejected_by_20db():
    rng = np.random.default_rng(0)
    t = np.arange(5000) / FS
    ecg_like = 0.3 * rng.standard_normal(5000)
    wander = 0.5 * np.sin(2 * np.pi * 0.2 * t)
    y = apply_bandpass(ecg_like + wander, SOS) - apply_bandpass(ecg_like, SOS)
    ratio = 10 * np.log10(np.mean(wander**2) / np.mean(y**2))
    assert ratio >= 20


def test_filter_is_linear():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 3000))
    lhs = apply_bandpass(2.5 * x - 0.7 * y, SOS)
    rhs = 2.5 * apply_bandpass(x, SOS) - 0.7 * apply_bandpass(y, SOS)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


def test_zero_phase():
    rng = np.random.default_rng(2)
    x = apply_bandpass(rng.standard_normal(4000), design_bandpass(BandpassSpec(5, 20)))
    y = apply_bandpass(x, SOS)
    xc = signal.correlate(y, x, mode="full")
    assert np.argmax(xc) - (len(x) - 1) == 0


def test_zscore_examples():
    np.testing.assert_allclose(zscore_per_lead(np.array([[1.0, 2, 3]])), [[-1.2247449, 0, 1.2247449]], atol=1e-6)
    np.testing.assert_array_equal(zscore_per_lead(np.array([[5.0, 5, 5]])), [[0, 0, 0]])


def test_zscore_thousand_random_leads():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1000, 500)) * rng.uniform(0.01, 100, (1000, 1)) + rng.uniform(-50, 50, (1000, 1))
    z = zscore_per_lead(x)
    assert np.max(np.abs(z.mean(axis=1))) < 1e-6
    assert np.max(np.abs(z.std(axis=1) - 1)) < 1e-6
    np.testing.assert_allclose(zscore_per_lead(z), z, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3))
def test_zscore_scale_invariance(x, c):
    if np.ptp(x) < 1e-3:
        return
    np.testing.assert_allclose(zscore_per_lead(c * x[None]), zscore_per_lead(x[None]), atol=1e-9)


def test_window_padding_and_centre():
    x = np.arange(1.0, 6.0)[None]
    np.testing.assert_array_equal(window(x, WindowSpec(8)), [[1, 2, 3, 4, 5, 0, 0, 0]])
    x = np.arange(12.0)[None]
    np.testing.assert_array_equal(window(x, WindowSpec(8, WindowMode.EVAL_CENTER)), [np.arange(2.0, 10.0)])


def test_window_random_offset_range_and_determinism():
    x = np.arange(12.0)[None]
    spec = WindowSpec(8, WindowMode.TRAIN_RANDOM_OFFSET)
    starts = {int(window(x, spec, np.random.default_rng(s))[0, 0]) for s in range(200)}
    assert starts == set(range(5))
    a = window(x, spec, np.random.default_rng(9))
    np.testing.assert_array_equal(a, window(x, spec, np.random.default_rng(9)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 300), st.integers(1, 300), st.sampled_from(list(WindowMode)))
def test_window_shape(n_leads, n_time, length, mode):
    out = window(np.ones((n_leads, n_time)), WindowSpec(length, mode), np.random.default_rng(0))
    assert out.shape == (n_leads, length)


def test_preprocess_shape_determinism_and_fs_check():
    rng = np.random.default_rng(4)
    rec = EcgRecord("r", "A", FS, rng.standard_normal((12, 5200)).astype(np.float32), 0)
    spec = WindowSpec(5000, WindowMode.TRAIN_RANDOM_OFFSET)
    a = preprocess(rec, BandpassSpec(), spec, np.random.default_rng(1))
    b = preprocess(rec, BandpassSpec(), spec, np.random.default_rng(1))
    assert a.shape == (12, 5000)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError, match="sampling rate"):
        preprocess(EcgRecord("r", "A", 250.0, rec.leads, 0), BandpassSpec(), spec, rng)

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pimtl import sigproc, synth
from pimtl.sigproc import (FilterDesignError, InvalidReferenceError, SignalLengthError,
                           design_butterworth, filtfilt, full_rectify, mvc_normalize,
                           resample_linear)


def response_db(cascade, f, fs):
    """|H(e^{jw})| in dB, evaluated section by section on the unit circle."""
    z = np.exp(1j * 2 * np.pi * f / fs)
    h = 1.0 + 0j
    for b0, b1, b2, a0, a1, a2 in cascade.sections:
        h *= (b0 + b1 / z + b2 / z ** 2) / (a0 + a1 / z + a2 / z ** 2)
    return 20 * np.log10(abs(h))


@pytest.mark.parametrize("kind,fc,fs", [("lowpass", 6, 1000), ("lowpass", 450, 2000),
                                        ("highpass", 20, 2000)])
@pytest.mark.parametrize("order", [2, 4])
def test_corner_is_minus_3db(kind, fc, fs, order):
    c = design_butterworth(kind, order, fc, fs)
    assert c.is_stable()
    assert response_db(c, fc, fs) == pytest.approx(-3.0, abs=0.5)


def test_lowpass_dc_gain_and_stopband():
    c = design_butterworth("lowpass", 4, 6, 1000)
    assert 10 ** (response_db(c, 0.0, 1000) / 20) == pytest.approx(1.0, abs=1e-6)
    assert response_db(c, 60, 1000) <= -40


def test_highpass_stopband():
    c = design_butterworth("highpass", 4, 20, 2000)
    assert response_db(c, 2.0, 2000) <= -40


@pytest.mark.parametrize("fc", [500, 600, 0, -5])
def test_bad_corner_rejected(fc):
    with pytest.raises(FilterDesignError):
        design_butterworth("lowpass", 4, fc, 1000)


def test_bad_order_or_kind_rejected():
    with pytest.raises(FilterDesignError):
        design_butterworth("lowpass", 3, 10, 1000)
    with pytest.raises(FilterDesignError):
        design_butterworth("bandstop", 4, 10, 1000)


def test_impulse_response_decays():
    c = design_butterworth("lowpass", 4, 6, 1000)
    x = np.zeros(6000)
    x[0] = 1.0
    y = c.stream(x)
    assert np.max(np.abs(y[5000:])) < 1e-9


def test_filtfilt_constant_passes():
    c = design_butterworth("lowpass", 4, 6, 1000)
    y = filtfilt(c, np.full(3000, 2.5))
    assert np.allclose(y, 2.5, atol=1e-9)


def test_filtfilt_kills_out_of_band_tone():
    c = design_butterworth("lowpass", 4, 6, 1000)
    t = np.arange(4000) / 1000
    y = filtfilt(c, np.sin(2 * np.pi * 100 * t))
    assert np.max(np.abs(y[500:-500])) <= 1e-3


def test_filtfilt_zero_phase():
    c = design_butterworth("lowpass", 4, 20, 1000)
    x = np.zeros(1001)
    x[400:601] = 1 - np.abs(np.arange(-100, 101)) / 100
    assert int(np.argmax(filtfilt(c, x))) == int(np.argmax(x)) == 500


def test_filtfilt_short_signal():
    c = design_butterworth("lowpass", 4, 20, 1000)
    with pytest.raises(SignalLengthError):
        filtfilt(c, np.ones(12))


def test_streaming_matches_batch():
    c = design_butterworth("lowpass", 4, 30, 1000)
    x = np.random.default_rng(0).normal(size=(500, 2))
    whole = c.stream(x)
    c.reset()
    parts = np.concatenate([c.stream(x[:123]), c.stream(x[123:])])
    assert np.allclose(whole, parts, atol=1e-14)


def test_rectify_examples():
    assert full_rectify(np.array([-1.0, 2.0, -3.0])).tolist() == [1.0, 2.0, 3.0]
    x = np.array([0.0, 0.5, 4.0])
    assert np.array_equal(full_rectify(x), x)


@given(arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)))
def test_rectify_idempotent(x):
    assert np.array_equal(full_rectify(full_rectify(x)), full_rectify(x))


def test_mvc_normalize():
    assert np.all(mvc_normalize(np.full(10, 0.3), 0.3) == 1.0)
    assert np.all(mvc_normalize(np.zeros(4), 2.0) == 0.0)
    per_channel = mvc_normalize(np.ones((3, 2)), np.array([2.0, 4.0]))
    assert per_channel[0].tolist() == [0.5, 0.25]
    for bad in (0.0, -1.0, np.array([1.0, 0.0])):
        with pytest.raises(InvalidReferenceError):
            mvc_normalize(np.ones((3, 2)), bad)


def test_resample_identity_and_affine():
    x = np.random.default_rng(1).normal(size=50)
    assert np.array_equal(resample_linear(x, 1000, 1000), x)
    ramp = 3.0 * np.arange(101) / 2000 + 0.5
    y = resample_linear(ramp, 2000, 1000)
    assert np.allclose(y, 3.0 * np.arange(len(y)) / 1000 + 0.5, atol=1e-12)


def test_resample_sine():
    t_in = np.arange(4000) / 2000
    y = resample_linear(np.sin(2 * np.pi * 5 * t_in), 2000, 1000)
    t_out = np.arange(len(y)) / 1000
    assert np.max(np.abs(y - np.sin(2 * np.pi * 5 * t_out))) <= 1e-3


def test_resample_single_sample():
    with pytest.raises(SignalLengthError):
        resample_linear(np.ones(1), 2000, 1000)


def test_window_count_and_flags():
    tr = synth.Trial(1000.0, np.arange(100) / 1000, np.random.default_rng(0).uniform(size=(100, 5)),
                     np.zeros((100, 5)), np.zeros(100))
    b = sigproc.make_windows(tr, 16, 1)
    assert len(b) == 85 and b.contiguous
    assert b.inputs.shape == (85, 6, 16)
    assert not sigproc.make_windows(tr, 16, 2).contiguous
    assert len(sigproc.make_windows(tr, 16, 3)) == (100 - 16) // 3 + 1


def test_window_targets_are_shifted_trial():
    rng = np.random.default_rng(2)
    T = 60
    tr = synth.Trial(1000.0, np.arange(T) / 1000, rng.uniform(size=(T, 5)),
                     rng.normal(size=(T, 5)), rng.normal(size=T))
    b = sigproc.make_windows(tr, 16)
    assert np.array_equal(b.targets[:, :5], tr.forces[15:])
    assert np.array_equal(b.targets[:, 5], tr.angle[15:])
    assert np.array_equal(b.inputs[:, :5, -1], tr.emg[15:])
    assert np.array_equal(b.inputs[3, :5, :], tr.emg[3:19].T)
    tchan = b.inputs[:, 5, :]
    assert np.all((tchan >= 0) & (tchan <= 1))
    assert np.allclose(tchan[:, 0], np.arange(15, T) / (T - 1))
    assert np.all(tchan == tchan[:, :1])


def test_window_errors():
    tr = synth.Trial(1000.0, np.arange(10) / 1000, np.zeros((10, 5)), np.zeros((10, 5)), np.zeros(10))
    with pytest.raises(SignalLengthError):
        sigproc.make_windows(tr, 16)
    with pytest.raises(ValueError):
        sigproc.make_windows(tr, 6)


def test_chain_recovers_calibration_activation():
    s = synth.sample_subject(synth.PopulationConfig(), 1, 11)
    mvc = synth.mvc_reference(s)
    act = np.full((3000, 5), 0.5)
    raw = synth.synthesize_raw_emg(act, s, stream=3)
    env = sigproc.process_emg(raw, 2000, 1000, mvc)
    mid = env[500:-500]
    assert np.allclose(mid.mean(axis=0), 0.5, rtol=0.10)

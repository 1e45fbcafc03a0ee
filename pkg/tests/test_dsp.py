import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vst import dsp
from vst.errors import ConfigError, FormatError, ValidationError
from vst.tensorio import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from vst.toydata import ContentSpec, generate_sample, subject_for_f0

P = dsp.SpectralParams()


def _sine(freq, n=15360, sr=16000):
    return np.sin(2 * np.pi * freq * np.arange(n) / sr)


def _toy_audio(seed=0, f0=180.0):
    rng = np.random.default_rng(seed)
    s = generate_sample(seed, subject_for_f0(0, f0), ContentSpec(rng.integers(1, 10, size=6)))
    return dsp.pcm_to_float(s.audio)


@pytest.mark.parametrize("fps,hop", [(25, 160), (20, 200)])
def test_hop_from_fps(fps, hop):
    assert dsp.mel_params_for_video(fps, 16000).hop_length == hop


def test_non_integer_hop_names_fps():
    with pytest.raises(ConfigError, match="30"):
        dsp.mel_params_for_video(30, 16000)


def test_params_validation():
    with pytest.raises(ConfigError):
        dsp.SpectralParams(win_length=600)


def test_stft_shape_and_zero():
    assert dsp.stft_magnitude(np.zeros(15360)).shape == (257, 96)
    assert not dsp.stft_magnitude(np.zeros(15360)).any()


def test_stft_rejects_empty():
    with pytest.raises(ValidationError):
        dsp.stft_magnitude(np.zeros(0))


def test_sine_peak_bin():
    # edge frames see the reflect padding, which breaks phase continuity of the sine
    mag = dsp.stft_magnitude(_sine(1000.0))[:, 2:-2]
    assert (mag.argmax(axis=0) == round(1000 * 512 / 16000)).all()


def test_stft_matches_librosa():
    librosa = pytest.importorskip("librosa")
    x = _toy_audio(3)
    ours = dsp.stft_magnitude(x)
    ref = np.abs(librosa.stft(x, n_fft=512, hop_length=160, win_length=400, window="hann",
                              center=True, pad_mode="reflect"))[:, :96]
    assert np.allclose(ours, ref, atol=1e-6 * np.abs(ref).max())


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
def test_stft_magnitude_scales_linearly(a, seed):
    x = np.random.default_rng(seed).standard_normal(2000)
    m1 = dsp.stft_magnitude(x)
    m2 = dsp.stft_magnitude(a * x)
    assert np.allclose(m2, a * m1, rtol=1e-6, atol=1e-9 * a * m1.max())


def test_istft_inverts_stft():
    x = _toy_audio(1)
    assert np.allclose(dsp.istft(dsp.stft(x)), x, atol=1e-9)


def test_filterbank_matches_librosa():
    librosa = pytest.importorskip("librosa")
    ref = librosa.filters.mel(sr=16000, n_fft=512, n_mels=80, fmin=0.0, fmax=8000.0, htk=False, norm="slaney")
    fb = dsp.mel_filterbank(P)
    assert fb.shape == (80, 257)
    assert np.allclose(fb, ref, atol=1e-8)


def test_mel_floor():
    mel = dsp.mel_from_linear(np.zeros((257, 10)))
    assert np.allclose(mel, np.log(1e-5))
    assert mel[0, 0] == pytest.approx(-11.5129, abs=1e-4)


def test_mel_shape_mismatch():
    with pytest.raises(ValidationError):
        dsp.mel_from_linear(np.zeros((256, 10)))


def test_tone_lands_in_nearest_mel_bin():
    mel = dsp.mel_from_linear(dsp.stft_magnitude(_sine(1000.0)))[:, 2:-2]
    centres = dsp.mel_center_frequencies(P)
    assert (mel.argmax(axis=0) == np.argmin(np.abs(centres - 1000.0))).all()


@settings(max_examples=10, deadline=None)
@given(T=st.sampled_from([6, 12, 24, 48]))
def test_mel_is_four_frames_per_video_frame(T):
    n = int(round(T / 25 * 16000))
    mel, _ = dsp.waveform_features(np.random.default_rng(T).standard_normal(n))
    assert mel.shape == (80, 4 * T)


def test_griffin_lim_zero():
    assert not dsp.griffin_lim(np.zeros((257, 20))).any()


def test_griffin_lim_sine_peak():
    mag = dsp.stft_magnitude(_sine(440.0))
    y = dsp.griffin_lim(mag, n_iters=60, seed=0)
    spectrum = np.abs(np.fft.rfft(y * np.hanning(y.size)))
    peak = np.fft.rfftfreq(y.size, 1 / 16000)[spectrum.argmax()]
    assert abs(peak - 440.0) <= 2.0


def test_griffin_lim_deterministic_and_length():
    mag = dsp.stft_magnitude(_toy_audio(2))
    a = dsp.griffin_lim(mag, n_iters=5, seed=3)
    b = dsp.griffin_lim(mag, n_iters=5, seed=3)
    assert np.array_equal(a, b) and a.size == 96 * 160


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_griffin_lim_error_non_increasing(seed):
    trace = []
    dsp.griffin_lim(dsp.stft_magnitude(_toy_audio(seed)), n_iters=60, seed=seed, trace=trace)
    assert len(trace) == 61
    assert max(np.diff(trace)) <= 1e-7


def test_griffin_lim_rejects_bad_input():
    with pytest.raises(ValidationError):
        dsp.griffin_lim(-np.ones((257, 4)))
    with pytest.raises(ValidationError):
        dsp.griffin_lim(np.ones((257, 4)), n_iters=0)


def test_wav_round_trip(tmp_path):
    x = (_toy_audio(0) * 32767).astype(np.int16)
    dsp.write_wav(tmp_path / "x.wav", x)
    y, sr = dsp.read_wav(tmp_path / "x.wav")
    assert sr == 16000 and np.array_equal(x, y)


def test_spc1_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 80, 7)).astype(np.float32)
    save_tensor(tmp_path / "a.spc", a)
    assert np.array_equal(load_tensor(tmp_path / "a.spc"), a)
    assert tensor_to_bytes(a)[:4] == b"SPC1"


def test_spc1_errors():
    blob = tensor_to_bytes(np.zeros((2, 3), np.float32))
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="expected"):
        tensor_from_bytes(blob[:-4])

"""Spectral front-end and back-end: STFT, mel/linear magnitudes, Griffin-Lim, WAV I/O.

Framing convention: frames are centred at ``t * hop`` for ``t in range(len // hop)``
on a reflect-padded signal, so a clip of ``T`` video frames yields exactly
``4 * T`` spectral frames and the inverse has length ``S * hop``.
"""
import wave
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class SpectralParams:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 400
    hop_length: int = 160
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ConfigError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if min(self.sample_rate, self.n_fft, self.win_length, self.hop_length, self.n_mels) <= 0:
            raise ConfigError("spectral sizes must be positive")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(f"invalid mel band [{self.f_min}, {self.f_max}]")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1


def mel_params_for_video(fps, sample_rate=16000, **overrides) -> SpectralParams:
    """Parameters whose hop gives four spectral frames per video frame."""
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}")
    hop = Fraction(sample_rate) / (4 * Fraction(fps).limit_denominator(10**6))
    if hop.denominator != 1:
        raise ConfigError(
            f"fps={fps} gives non-integer hop {float(hop):.4f} at {sample_rate} Hz "
            f"(need sample_rate / (4 * fps) to be integral)"
        )
    return replace(SpectralParams(), sample_rate=int(sample_rate), hop_length=int(hop), **overrides)


def pcm_to_float(waveform) -> np.ndarray:
    x = np.asarray(waveform)
    if np.issubdtype(x.dtype, np.integer):
        return x.astype(np.float64) / 32768.0
    return x.astype(np.float64)


@lru_cache(maxsize=8)
def _window(params: SpectralParams) -> np.ndarray:
    win = get_window("hann", params.win_length, fftbins=True)
    left = (params.n_fft - params.win_length) // 2
    out = np.zeros(params.n_fft)
    out[left:left + params.win_length] = win
    out.setflags(write=False)
    return out


def _frame_index(n_frames, params):
    return np.arange(params.n_fft)[None, :] + params.hop_length * np.arange(n_frames)[:, None]


def stft(waveform, params: SpectralParams = SpectralParams()) -> np.ndarray:
    """Complex STFT, shape ``(n_freq, len // hop)``."""
    x = pcm_to_float(waveform)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("waveform must be a non-empty 1-D array")
    if x.size < params.win_length:
        raise ValidationError(f"waveform has {x.size} samples, need at least {params.win_length}")
    pad = params.n_fft // 2
    n_frames = x.size // params.hop_length
    xp = np.pad(x, pad, mode="reflect")
    frames = xp[_frame_index(n_frames, params)] * _window(params)
    return np.fft.rfft(frames, axis=1).T


def stft_magnitude(waveform, params: SpectralParams = SpectralParams()) -> np.ndarray:
    return np.abs(stft(waveform, params))


def istft(spec, params: SpectralParams = SpectralParams()) -> np.ndarray:
    """Least-squares inverse of :func:`stft`, including the reflect padding.

    Each padded sample is a copy of exactly one original sample, so the
    normal equations stay diagonal once the padded overlap-add buffers are
    folded back onto the samples they mirror.
    """
    spec = np.asarray(spec)
    n_frames = spec.shape[1]
    length = n_frames * params.hop_length
    pad = params.n_fft // 2
    window = _window(params)
    frames = np.fft.irfft(spec.T, n=params.n_fft, axis=1) * window
    idx = _frame_index(n_frames, params)
    buf = np.zeros(length + 2 * pad)
    wsum = np.zeros(length + 2 * pad)
    np.add.at(buf, idx, frames)
    np.add.at(wsum, idx, np.broadcast_to(window ** 2, frames.shape))

    num = buf[pad:pad + length].copy()
    den = wsum[pad:pad + length].copy()
    left = pad - np.arange(pad)                  # xp[j] = x[pad - j]
    right = length - 2 - np.arange(pad)          # xp[pad + length + k] = x[length - 2 - k]
    np.add.at(num, left, buf[:pad])
    np.add.at(den, left, wsum[:pad])
    np.add.at(num, right, buf[pad + length:])
    np.add.at(den, right, wsum[pad + length:])
    out = np.zeros(length)
    ok = den > 1e-10
    out[ok] = num[ok] / den[ok]
    return out


@lru_cache(maxsize=8)
def mel_filterbank(params: SpectralParams = SpectralParams()) -> np.ndarray:
    """Triangular filters on the Slaney mel scale with area normalisation, ``(n_mels, n_freq)``."""
    fft_freqs = np.linspace(0.0, params.sample_rate / 2, params.n_freq)
    mel_pts = np.linspace(hz_to_mel(params.f_min), hz_to_mel(params.f_max), params.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    weights = np.zeros((params.n_mels, params.n_freq))
    for i in range(params.n_mels):
        lower = -ramps[i] / fdiff[i]
        upper = ramps[i + 2] / fdiff[i + 1]
        weights[i] = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_center_frequencies(params: SpectralParams = SpectralParams()) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(params.f_min), hz_to_mel(params.f_max), params.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freq):
    f = np.asarray(freq, dtype=np.float64)
    mel = f / _F_SP
    return np.where(f >= _MIN_LOG_HZ,
                    _MIN_LOG_MEL + np.log(np.maximum(f, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(mel):
    m = np.asarray(mel, dtype=np.float64)
    return np.where(m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), _F_SP * m)


def log_compress(values, params: SpectralParams = SpectralParams()) -> np.ndarray:
    return np.log(np.maximum(values, params.log_floor))


def mel_from_linear(linear, params: SpectralParams = SpectralParams()) -> np.ndarray:
    linear = np.asarray(linear, dtype=np.float64)
    if linear.ndim != 2 or linear.shape[0] != params.n_freq:
        raise ValidationError(
            f"linear spectrogram must have shape ({params.n_freq}, S), got {linear.shape}"
        )
    return log_compress(mel_filterbank(params) @ linear, params)


def waveform_features(waveform, params: SpectralParams = SpectralParams()):
    """(log-mel, linear magnitude) pair for one waveform."""
    linear = stft_magnitude(waveform, params)
    return mel_from_linear(linear, params), linear


def spectral_convergence(estimate_mag, target_mag) -> float:
    target = np.asarray(target_mag)
    denom = np.linalg.norm(target)
    if denom == 0:
        return 0.0 if np.linalg.norm(estimate_mag) == 0 else float("inf")
    return float(np.linalg.norm(np.asarray(estimate_mag) - target) / denom)


def griffin_lim(linear_mag, params: SpectralParams = SpectralParams(), n_iters=60, seed=0,
                momentum=0.99, trace=None) -> np.ndarray:
    """Phase reconstruction from a magnitude spectrogram.

    Fast Griffin-Lim (momentum on the consistent estimates) with a safeguard:
    an accelerated step that would raise the spectral convergence is replaced
    by a plain Griffin-Lim step, which never does, so the error sequence is
    non-increasing. ``momentum=0`` gives the classic algorithm.

    ``trace``, if a list, receives the spectral convergence of the initial
    estimate and after every iteration (``n_iters + 1`` values).
    """
    mag = np.asarray(linear_mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[0] != params.n_freq:
        raise ValidationError(f"magnitude must have shape ({params.n_freq}, S), got {mag.shape}")
    if not np.all(np.isfinite(mag)):
        raise ValidationError("magnitude contains non-finite values")
    if np.any(mag < 0):
        raise ValidationError("magnitude spectrogram has negative entries")
    if n_iters < 1:
        raise ValidationError("n_iters must be >= 1")

    def project(spec):
        x = istft(mag * np.exp(1j * np.angle(spec)), params)
        return x, stft(x, params)

    rng = np.random.default_rng(seed)
    x, prev = project(np.exp(2j * np.pi * rng.random(mag.shape)))
    err = spectral_convergence(np.abs(prev), mag)
    target = prev
    for _ in range(n_iters):
        if trace is not None:
            trace.append(err)
        x_new, spec = project(target)
        new_err = spectral_convergence(np.abs(spec), mag)
        if new_err > err:
            x_new, spec = project(prev)
            new_err = spectral_convergence(np.abs(spec), mag)
            target = spec
        else:
            target = spec + momentum * (spec - prev)
        x, prev, err = x_new, spec, new_err
    if trace is not None:
        trace.append(err)
    return x


def write_wav(path, waveform, sample_rate=16000) -> None:
    """Write mono RIFF PCM16. Float input is clipped to [-1, 1]."""
    x = np.asarray(waveform)
    if not np.issubdtype(x.dtype, np.integer):
        x = np.round(np.clip(x, -1.0, 1.0) * 32767.0)
    pcm = x.astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValidationError(f"{path}: only mono PCM16 WAV is supported")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").copy()
    return data, rate

"""Objective metrics: STOI, ESTOI, equal error rate and an autocorrelation F0 tracker."""
import numpy as np
from scipy.signal import resample_poly

from .dsp import pcm_to_float
from .errors import ValidationError

# Intelligibility analysis constants (10 kHz band structure).
STOI_FS = 10000
FRAME_LEN = 256
NFFT = 512
N_BANDS = 15
MIN_BAND_HZ = 150
SEGMENT = 30           # frames per analysis segment (384 ms)
CLIP_DB = -15          # lower signal-to-distortion bound
DYN_RANGE_DB = 40      # silent-frame removal threshold
EPS = np.finfo(np.float64).eps


def _to_10k(x, fs):
    x = pcm_to_float(x)
    if fs == STOI_FS:
        return x
    g = np.gcd(int(fs), STOI_FS)
    return resample_poly(x, STOI_FS // g, int(fs) // g)


def _analysis_window():
    return np.hanning(FRAME_LEN + 2)[1:-1]


def third_octave_bands(fs=STOI_FS, nfft=NFFT, n_bands=N_BANDS, min_freq=MIN_BAND_HZ):
    """Binary band matrix ``(n_bands, nfft // 2 + 1)``."""
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    bands = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        a = int(np.argmin((freqs - lo[i]) ** 2))
        b = int(np.argmin((freqs - hi[i]) ** 2))
        bands[i, a:b] = 1.0
    return bands


def _frames(x, hop):
    n = 1 + (x.size - FRAME_LEN) // hop if x.size >= FRAME_LEN else 0
    idx = np.arange(FRAME_LEN)[None, :] + hop * np.arange(n)[:, None]
    return x[idx] * _analysis_window()


def _remove_silent_frames(x, y):
    """Drop frames of ``x`` more than 40 dB below its loudest; apply the same mask to ``y``."""
    hop = FRAME_LEN // 2
    fx, fy = _frames(x, hop), _frames(y, hop)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + EPS)
    keep = energy > energy.max() - DYN_RANGE_DB if energy.size else energy
    fx, fy = fx[keep], fy[keep]
    n = fx.shape[0]
    length = (n - 1) * hop + FRAME_LEN if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + FRAME_LEN] += fx[i]
        ys[i * hop:i * hop + FRAME_LEN] += fy[i]
    return xs, ys


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x, FRAME_LEN // 2), n=NFFT, axis=1).T
    return np.sqrt(third_octave_bands() @ (np.abs(spec) ** 2))


def _prepare(reference, degraded, fs):
    x, y = pcm_to_float(reference), pcm_to_float(degraded)
    if x.ndim != 1 or y.ndim != 1:
        raise ValidationError("intelligibility metrics take 1-D waveforms")
    n = min(x.size, y.size)
    x, y = _to_10k(x[:n], fs), _to_10k(y[:n], fs)
    x, y = _remove_silent_frames(x, y)
    X, Y = _band_envelopes(x), _band_envelopes(y)
    if X.shape[1] < SEGMENT:
        raise ValidationError(
            f"signal too short: {X.shape[1]} non-silent frames, one segment needs {SEGMENT} (384 ms)")
    return X, Y


def _segments(M):
    n = M.shape[1] - SEGMENT + 1
    return np.stack([M[:, m:m + SEGMENT] for m in range(n)])   # (n_seg, bands, SEGMENT)


def stoi(reference, degraded, fs=16000) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``reference``."""
    X, Y = _prepare(reference, degraded, fs)
    xs, ys = _segments(X), _segments(Y)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    y_clip = np.minimum(alpha * ys, xs * (1 + 10 ** (-CLIP_DB / 20)))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = y_clip - y_clip.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


def _row_col_normalize(seg):
    seg = seg - seg.mean(axis=2, keepdims=True)
    seg = seg / (np.linalg.norm(seg, axis=2, keepdims=True) + EPS)
    seg = seg - seg.mean(axis=1, keepdims=True)
    return seg / (np.linalg.norm(seg, axis=1, keepdims=True) + EPS)


def estoi(reference, degraded, fs=16000) -> float:
    """Extended STOI: spectro-temporal correlation after row then column normalisation."""
    X, Y = _prepare(reference, degraded, fs)
    xn, yn = _row_col_normalize(_segments(X)), _row_col_normalize(_segments(Y))
    return float(np.mean(np.sum(xn * yn, axis=1)))


def eer(scores, labels) -> float:
    """Equal error rate; higher score means "same subject".

    False-accept and false-reject rates are evaluated at every distinct
    threshold and the crossing is located by linear interpolation between the
    two neighbouring operating points.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and the same length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("EER needs both target and non-target trials")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # accept everything with score >= threshold; thresholds walk down the distinct scores
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = np.cumsum(~y_sorted)[last_of_group]
    far = np.r_[0.0, fp / n_neg]
    frr = np.r_[1.0, 1.0 - tp / n_pos]
    return _crossing(far, frr)


def _crossing(far, frr):
    diff = frr - far                      # starts at +1, ends <= 0, non-increasing
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(far[i])
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


F0_RANGE = (80.0, 400.0)
F0_FRAME = 1024
F0_HOP = 256


def f0_estimate(waveform, sample_rate=16000, fmin=F0_RANGE[0], fmax=F0_RANGE[1],
                energy_gate_db=-25.0):
    """Median autocorrelation pitch over voiced frames, or ``None`` if nothing is voiced."""
    x = pcm_to_float(waveform)
    if x.size < int(0.064 * sample_rate):
        raise ValidationError("F0 estimation needs at least 64 ms of audio")
    frame = min(F0_FRAME, x.size)
    n = 1 + (x.size - frame) // F0_HOP
    idx = np.arange(frame)[None, :] + F0_HOP * np.arange(n)[:, None]
    frames = x[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    if rms.max() < 1e-4:
        return None
    voiced = rms > rms.max() * 10 ** (energy_gate_db / 20)
    lag_lo = int(np.floor(sample_rate / fmax))
    lag_hi = int(np.ceil(sample_rate / fmin))
    nfft = 1 << int(np.ceil(np.log2(2 * frame)))
    spec = np.fft.rfft(frames[voiced] * np.hanning(frame), n=nfft, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, :lag_hi + 2]
    estimates = []
    for r in ac:
        if r[0] <= 0:
            continue
        seg = r[lag_lo:lag_hi + 1]
        k = int(np.argmax(seg)) + lag_lo
        if r[k] <= 0.3 * r[0]:
            continue
        lag = float(k)
        if 0 < k < r.size - 1:
            a, b, c = r[k - 1], r[k], r[k + 1]
            denom = a - 2 * b + c
            if denom < 0:
                lag = k + 0.5 * (a - c) / denom
        estimates.append(sample_rate / lag)
    if not estimates:
        return None
    return float(np.median(estimates))

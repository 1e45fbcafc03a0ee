import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vst import dsp, metrics
from vst.errors import ValidationError
from vst.toydata import ContentSpec, generate_sample, subject_for_f0


def _clip(seed, f0=180.0):
    rng = np.random.default_rng(seed)
    s = generate_sample(seed, subject_for_f0(0, f0), ContentSpec(rng.integers(1, 10, size=6)))
    return dsp.pcm_to_float(s.audio)


CLIPS = [_clip(s, 110.0 + 20 * s) for s in range(10)]


@pytest.mark.parametrize("fn", [metrics.stoi, metrics.estoi])
def test_self_score_is_one(fn):
    for x in CLIPS:
        assert fn(x, x) == pytest.approx(1.0, abs=1e-6)


def test_scale_invariance():
    for x in CLIPS:
        assert metrics.stoi(x, 0.5 * x) == pytest.approx(1.0, abs=1e-6)


def test_estoi_sign_invariant():
    x = CLIPS[0]
    assert metrics.estoi(x, -x) == pytest.approx(metrics.estoi(x, x), abs=1e-12)


def test_noise_scores_low():
    noise = np.random.default_rng(0).standard_normal(CLIPS[0].size) * 0.3
    assert metrics.stoi(CLIPS[0], noise) < 0.2
    assert metrics.estoi(CLIPS[0], noise) < 0.15


def test_matches_reference_at_native_rate():
    # at 10 kHz neither side resamples, so this compares the measures themselves
    pystoi = pytest.importorskip("pystoi")
    from scipy.signal import resample_poly
    rng = np.random.default_rng(1)
    for x in CLIPS[:5]:
        y = x + 0.05 * rng.standard_normal(x.size)
        x10, y10 = resample_poly(x, 5, 8), resample_poly(y, 5, 8)
        assert metrics.stoi(x10, y10, 10000) == pytest.approx(pystoi.stoi(x10, y10, 10000), abs=0.005)
        assert metrics.estoi(x10, y10, 10000) == pytest.approx(
            pystoi.stoi(x10, y10, 10000, extended=True), abs=0.01)


def test_matches_reference_end_to_end():
    # different anti-alias filters going 16 kHz -> 10 kHz; ESTOI on noisy toy audio feels it most
    pystoi = pytest.importorskip("pystoi")
    rng = np.random.default_rng(1)
    for x in CLIPS[:5]:
        y = x + 0.05 * rng.standard_normal(x.size)
        assert metrics.stoi(x, y) == pytest.approx(pystoi.stoi(x, y, 16000), abs=0.02)
        assert metrics.estoi(x, y) == pytest.approx(pystoi.stoi(x, y, 16000, extended=True), abs=0.06)


def test_too_short_for_a_segment():
    with pytest.raises(ValidationError, match="short"):
        metrics.stoi(np.ones(3000) * np.sin(np.arange(3000)), np.ones(3000))


def test_third_octave_band_count():
    assert metrics.third_octave_bands().shape == (15, 257)


# --- EER ---

def brute_force_eer(scores, labels):
    """Sweep every threshold between sorted scores and interpolate the FAR/FRR crossing."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    cuts = np.concatenate([[np.inf], np.sort(np.unique(scores))[::-1], [-np.inf]])
    pts = []
    for c in cuts:
        accept = scores >= c
        far = np.mean(accept[~labels])
        frr = np.mean(~accept[labels])
        pts.append((far, frr))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        d0, d1 = r0 - f0, r1 - f1
        if d0 == 0:
            return f0
        if d0 > 0 >= d1:
            t = d0 / (d0 - d1)
            return f0 + t * (f1 - f0)
    raise AssertionError("no crossing")


def test_eer_separated():
    assert metrics.eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0


def test_eer_identical_distributions():
    assert metrics.eer([0.5] * 6, [1, 0, 1, 0, 1, 0]) == pytest.approx(0.5)


def test_eer_one_inversion_matches_brute_force():
    scores = [0.9, 0.8, 0.3, 0.5, 0.2, 0.1]
    labels = [1, 1, 1, 0, 0, 0]
    assert metrics.eer(scores, labels) == pytest.approx(brute_force_eer(scores, labels))
    assert metrics.eer(scores, labels) == pytest.approx(1 / 3)


def test_eer_single_class():
    with pytest.raises(ValidationError):
        metrics.eer([0.1, 0.2], [1, 1])


trials = st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=40).filter(
    lambda t: 0 < sum(l for _, l in t) < len(t))


@settings(max_examples=200, deadline=None)
@given(trials)
def test_eer_matches_brute_force(t):
    s = [v / 20 for v, _ in t]
    y = [l for _, l in t]
    assert metrics.eer(s, y) == pytest.approx(brute_force_eer(s, y), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(trials)
def test_eer_symmetry_and_range(t):
    s = np.array([v / 20 for v, _ in t])
    y = np.array([l for _, l in t])
    e = metrics.eer(s, y)
    assert e == pytest.approx(metrics.eer(-s, ~y), abs=1e-12)
    assert 0.0 <= e <= 1.0
    # orientation-corrected: whichever of (s, -s) separates better is within [0, 0.5]
    assert min(e, metrics.eer(-s, y)) <= 0.5 + 1e-12


# --- F0 ---

def test_f0_sine():
    x = np.sin(2 * np.pi * 220 * np.arange(16000) / 16000)
    assert metrics.f0_estimate(x) == pytest.approx(220.0, abs=1.0)


def test_f0_harmonic_stack():
    t = np.arange(16000) / 16000
    x = sum(np.sin(2 * np.pi * 110 * k * t) / k for k in range(1, 9))
    assert metrics.f0_estimate(x) == pytest.approx(110.0, abs=2.0)


def test_f0_silence():
    assert metrics.f0_estimate(np.zeros(16000)) is None


def test_f0_too_short():
    with pytest.raises(ValidationError):
        metrics.f0_estimate(np.zeros(500))


@pytest.mark.parametrize("f0", [110.0, 150.0, 220.0, 310.0])
def test_f0_on_toy_audio(f0):
    assert metrics.f0_estimate(_clip(4, f0)) == pytest.approx(f0, rel=0.03)

"""Acceptance criteria 1-9, one verdict line per criterion.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the verdict
lines are repeated in the terminal summary. Criterion 8 trains two full
models (roughly 40 minutes on one CPU core); set ``VST_TREND_DIR`` to keep
its artefacts, otherwise they go to a pytest temp directory.
"""
import math
import os
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from vst import dsp, metrics
from vst.model import ModelConfig, VideoToSpeech, video_to_tensor
from vst.objectives import LossWeights, discriminator_loss, generator_adversarial_loss, grl, total_loss
from vst.selection import SpeechVisageSelection
from vst.synthesis import adain
from vst.toydata import ContentSpec, generate_sample, make_subject
from vst.trainer import TrainConfig, Trainer, lr_at

VERDICTS = {}


def record(n, checks: dict, elapsed=None, limit=None):
    """Store and print the verdict for criterion ``n``; then assert every check."""
    if limit is not None:
        checks = {**checks, f"runtime {elapsed:.1f}s < {limit}s": elapsed < limit}
    ok = all(checks.values())
    failed = [name for name, v in checks.items() if not v]
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
    if failed:
        line += " (failed: " + "; ".join(failed) + ")"
    VERDICTS[n] = line
    print(line)
    assert ok, line


# 1. selective masks

def test_criterion_1_mask_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sums_ok = complement_ok = batch_const_ok = True
    worst_sum = worst_rec = 0.0
    for i in range(100):
        C = int(rng.choice([4, 32, 128]))
        N = int(rng.choice([1, 6, 9]))
        B, T = int(rng.integers(2, 5)), int(rng.integers(1, 7))
        torch.manual_seed(i)
        sel = SpeechVisageSelection(channels=C, n_heads=N).double()
        f_vis = torch.randn(B, T, C, dtype=torch.float64) * float(rng.uniform(0.1, 10))
        with torch.no_grad():
            train = sel.compute_masks(f_vis, training=True).masks
            infer = sel.compute_masks(f_vis, training=False)
        for m in (train, infer.masks):
            worst_sum = max(worst_sum, float((m.sum(-1) - 1).abs().max()))
        rec = infer.masks * f_vis.unsqueeze(1) + infer.complements * f_vis.unsqueeze(1)
        worst_rec = max(worst_rec, float((rec - f_vis.unsqueeze(1)).abs().max()))
        batch_const_ok &= bool((train == train[:1]).all())
    sums_ok = worst_sum <= 1e-6
    complement_ok = worst_rec <= 1e-6
    record(1, {f"row sums within 1e-6 (worst {worst_sum:.1e})": sums_ok,
               f"complement reconstructs f_vis within 1e-6 (worst {worst_rec:.1e})": complement_ok,
               "training masks batch-constant": batch_const_ok},
           time.perf_counter() - t0, 10)


# 2. gradient reversal

def test_criterion_2_grl_gradient():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    x = torch.randn(4, 2, dtype=torch.float64, requires_grad=True)     # (C=4, T=2)
    w = torch.randn(4, 2, dtype=torch.float64)

    def f(v):
        return (torch.tanh(v) * w).sum() + (v ** 3).sum() * 0.1

    f(grl(x)).backward()
    analytic = x.grad.clone()
    h = 1e-6
    numeric = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            e = torch.zeros_like(x)
            e[idx] = h
            numeric[idx] = (f(x + e) - f(x - e)) / (2 * h)
    rel = float((analytic + numeric).norm() / numeric.norm())
    record(2, {f"analytic == -finite-difference to 1e-4 relative (got {rel:.1e})": rel <= 1e-4},
           time.perf_counter() - t0, 5)


# 3. AdaIN moments

def test_criterion_3_adain_moments():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    worst_mean = worst_std = 0.0
    for _ in range(20):
        # channel scales in [0.1, 5.1]: eps = 1e-5 shrinks the std by a factor sigma / (sigma + eps)
        x = torch.randn(3, 16, 50, dtype=torch.float64) * (torch.rand(3, 16, 1, dtype=torch.float64) * 5 + 0.1)
        x = x + torch.randn(3, 16, 1, dtype=torch.float64) * 3
        gamma = torch.rand(3, 16, dtype=torch.float64) * 2 + 0.1
        beta = torch.randn(3, 16, dtype=torch.float64)
        y = adain(x, gamma, beta)
        worst_mean = max(worst_mean, float((y.mean(-1) - beta).abs().max()))
        worst_std = max(worst_std, float((y.std(-1, unbiased=False) - gamma).abs().max()))
    x = torch.randn(2, 4, 10, dtype=torch.float64)
    x[:, 1] = 3.7
    gamma, beta = torch.rand(2, 4, dtype=torch.float64) + 0.5, torch.randn(2, 4, dtype=torch.float64)
    y = adain(x, gamma, beta)
    const_ok = bool(torch.equal(y[:, 1], beta[:, 1:2].expand(-1, 10)))
    record(3, {f"mean matches beta within 1e-4 (worst {worst_mean:.1e})": worst_mean <= 1e-4,
               f"std matches gamma within 1e-3 (worst {worst_std:.1e})": worst_std <= 1e-3,
               "constant channel returns beta": const_ok},
           time.perf_counter() - t0, 5)


# 4. loss arithmetic

class _HalfD(nn.Module):
    def forward(self, mel, style):
        p = torch.full((mel.shape[0],), 0.5, dtype=torch.float64)
        return p, p


def test_criterion_4_loss_arithmetic():
    checks = {}
    for k in (2, 6, 8, 31):
        ce = float(nn.functional.cross_entropy(torch.zeros(5, k, dtype=torch.float64), torch.arange(5) % k))
        checks[f"uniform CE over {k} subjects = ln {k}"] = abs(ce - math.log(k)) <= 1e-6
    w = LossWeights()
    one = torch.tensor(1.0, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    checks["default weights are (1, 1, 1, 50)"] = (w.alpha1, w.alpha2, w.alpha3, w.alpha4) == (1.0, 1.0, 1.0, 50.0)
    checks["trainer defaults carry the same weights"] = TrainConfig().weights == w
    checks["L_tot(0, 0, 0, 1) = 50"] = float(total_loss(zero, zero, zero, one)) == 50.0
    checks["L_tot(1, 1, 1, 0) = 3"] = float(total_loss(one, one, one, zero)) == 3.0
    mel = torch.zeros(3, 80, 8, dtype=torch.float64)
    style = torch.zeros(3, 4, dtype=torch.float64)
    l_g = float(generator_adversarial_loss(_HalfD(), mel, style))
    l_d = float(discriminator_loss(_HalfD(), mel, mel, style))
    checks[f"D = 0.5 gives L_G = 2 ln 2 (got {l_g:.9f})"] = abs(l_g - 2 * math.log(2)) <= 1e-6
    checks[f"D = 0.5 gives L_D = 4 ln 2 (got {l_d:.9f})"] = abs(l_d - 4 * math.log(2)) <= 1e-6
    record(4, checks)


# 5. schedule

def test_criterion_5_schedule():
    lr0 = 1e-3
    expect = {0: lr0, 19999: lr0, 20000: lr0 / 2, 39999: lr0 / 2, 40000: lr0 / 4,
              59999: lr0 / 4, 60000: lr0 / 8, 500000: lr0 / 8}
    got = {s: lr_at(s, lr0, (20000, 40000, 60000)) for s in expect}
    bad = {s: g for s, g in got.items() if g != expect[s]}
    record(5, {f"exact halvings (mismatches {bad})": not bad,
               "default decay steps are 20000/40000/60000": tuple(TrainConfig().decay_steps) == (20000, 40000, 60000)})


# 6. shape contract

def test_criterion_6_mel_shape():
    torch.manual_seed(0)
    model = VideoToSpeech(ModelConfig(channels=32, style_dim=16, synth_hidden=32, n_heads=2,
                                      encoder_input_size=32)).eval()
    checks = {}
    for T in (12, 24, 48):
        video = torch.randint(0, 256, (2, T, 48, 48, 3), dtype=torch.uint8)
        with torch.no_grad():
            mel = model(video_to_tensor(video))
        checks[f"T={T}: mel {tuple(mel.shape[1:])} == (80, {4 * T})"] = tuple(mel.shape) == (2, 80, 4 * T)
    record(6, checks)


# 7. DSP and metrics

def _toy_clip(seed):
    rng = np.random.default_rng(seed)
    s = generate_sample(seed, make_subject(0, seed), ContentSpec(rng.integers(1, 10, size=6).tolist()))
    return dsp.pcm_to_float(s.audio)


def _brute_force_eer(scores, labels):
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    cuts = np.concatenate([[np.inf], np.sort(np.unique(scores))[::-1], [-np.inf]])
    pts = [(np.mean(scores[~labels] >= c), np.mean(scores[labels] < c)) for c in cuts]
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if r0 - f0 == 0:
            return f0
        if (r0 - f0) > 0 >= (r1 - f1):
            t = (r0 - f0) / ((r0 - f0) - (r1 - f1))
            return f0 + t * (f1 - f0)
    return pts[-1][0]


def test_criterion_7_dsp_suite():
    t0 = time.perf_counter()
    checks = {}
    sine = np.sin(2 * np.pi * 440.0 * np.arange(15360) / 16000)
    y = dsp.griffin_lim(dsp.stft_magnitude(sine), n_iters=60, seed=0)
    spectrum = np.abs(np.fft.rfft(y * np.hanning(y.size)))
    peak = np.fft.rfftfreq(y.size, 1 / 16000)[spectrum.argmax()]
    checks[f"Griffin-Lim 440 Hz peak at {peak:.2f} Hz (within 2 Hz)"] = abs(peak - 440.0) <= 2.0

    clips = [_toy_clip(seed) for seed in range(10)]
    sc = []
    for x in clips:
        mag = dsp.stft_magnitude(x)
        sc.append(dsp.spectral_convergence(dsp.stft_magnitude(dsp.griffin_lim(mag, n_iters=60, seed=0)), mag))
    checks[f"mean spectral convergence {np.mean(sc):.4f} < 0.05 over 10 toy clips"] = np.mean(sc) < 0.05

    worst = max(max(abs(metrics.stoi(x, x) - 1), abs(metrics.estoi(x, x) - 1)) for x in clips)
    checks[f"stoi/estoi self-score within 1e-6 of 1 (worst {worst:.1e})"] = worst <= 1e-6

    trials = [([0.9, 0.8, 0.3, 0.5, 0.2, 0.1], [1, 1, 1, 0, 0, 0]),
              ([0.9, 0.8, 0.7, 0.1, 0.2, 0.3], [1, 1, 1, 0, 0, 0]),
              ([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]),
              ([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]),
              ([0.7, 0.4, 0.6, 0.6, 0.2, 0.5, 0.3], [1, 1, 0, 1, 0, 0, 1])]
    diffs = [abs(metrics.eer(s, l) - _brute_force_eer(s, l)) for s, l in trials]
    checks[f"EER agrees with brute force on {len(trials)} hand-built trial sets"] = max(diffs) <= 1e-12
    record(7, checks, time.perf_counter() - t0, 60)


# 8. end-to-end trend

@pytest.mark.slow
def test_criterion_8_disentanglement_trend(tmp_path_factory):
    from vst.experiment import TrendConfig, run_trend
    work = os.environ.get("VST_TREND_DIR") or str(tmp_path_factory.mktemp("trend"))
    result = run_trend(TrendConfig(work_dir=work))
    six, one = result["arms"]["6"], result["arms"]["1"]
    gap6 = six["eer_f_sc"] - six["eer_f_id"]
    gap1 = one["eer_f_sc"] - one["eer_f_id"]
    f0 = six["swap"]["f0_output"]
    record(8, {
        f"audio-id pretraining val accuracy {result['audio_id_val_accuracy']:.3f} > 0.90":
            result["audio_id_val_accuracy"] > 0.90,
        f"N=6 training {six['train_seconds'] / 60:.1f} min < 45": six["train_seconds"] < 45 * 60,
        f"both arms ran all {result['config']['steps']} steps (aborts: N=6 {six['aborted']}, N=1 {one['aborted']})":
            six["steps_completed"] == one["steps_completed"] == result["config"]["steps"],
        f"(a) EER(f_id) {six['eer_f_id']:.3f} <= EER(f_sc) {six['eer_f_sc']:.3f} - 0.10": gap6 >= 0.10,
        f"(b) N=1 gap {gap1:.3f} <= N=6 gap {gap6:.3f}": gap1 <= gap6,
        f"(c) swap F0 {f0} Hz closer to 120 than 300": bool(six["swap_closer_to_low"]),
        f"(d) smoothed L_recon final {six['recon_smoothed_final']:.3f} < step-100 "
        f"{six['recon_smoothed_100']:.3f}": six["recon_smoothed_final"] < six["recon_smoothed_100"],
    })


# 9. reproducibility

def test_criterion_9_reproducibility(tiny_cache, tmp_path, deterministic):
    from vst.objectives import AudioIdClassifier
    from vst.trainer import SubjectIndex

    def build():
        torch.manual_seed(123)
        index = SubjectIndex(tiny_cache.subjects)
        cfg = TrainConfig(data="", out="", max_steps=50, batch_size=4, seed=7, checkpoint_every=1000)
        return Trainer(cfg, tiny_cache, AudioIdClassifier(len(index)), index)

    a, b = build(), build()
    trace_a = [a.train_step() for _ in range(50)]
    trace_b = [b.train_step() for _ in range(50)]
    c = build()
    head = [c.train_step() for _ in range(25)]
    c.save(tmp_path / "mid.vstc")
    del c
    resumed = Trainer.resume(tmp_path / "mid.vstc", tiny_cache)
    tail = [resumed.train_step() for _ in range(25)]
    record(9, {"two 50-step runs give identical loss traces": trace_a == trace_b,
               "save at 25 and reload continues bit-identically": head + tail == trace_a})


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

"""Desk-scale disentanglement trend run: data, audio-id pretraining, two head counts, evaluation."""
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp, metrics
from .errors import NumericError
from .evaluation import style_swap, verification_protocol
from .synthesis import postnet_linear
from .toydata import ContentSpec, DatasetConfig, generate_dataset, generate_sample, read_manifest, subject_for_f0
from .trainer import (ClipCache, PretrainConfig, Trainer, TrainConfig, load_audio_classifier,
                      pretrain_audio_classifier, run_training, save_audio_classifier)

log = logging.getLogger(__name__)


@dataclass
class TrendConfig:
    work_dir: str = "runs/trend"
    n_subjects: int = 8
    clips_per_subject: int = 64
    dataset_seed: int = 1
    steps: int = 2000
    heads: tuple = (6, 1)
    lr0: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    high_f0: float = 300.0
    low_f0: float = 120.0
    smooth_window: int = 200


def smoothed(values, step, window=200):
    """Mean over a window centred on ``step``, truncated at both ends of the trace."""
    lo = max(0, step - window // 2)
    hi = min(len(values), step + window // 2)
    return float(np.mean(values[lo:hi]))


def swap_pair(cfg: TrendConfig):
    """Two clips outside the dataset: a high-pitch subject (content) and a low-pitch one (style)."""
    rng = np.random.default_rng(cfg.seed + 7)
    tokens = [int(t) for t in rng.integers(1, 10, size=6)]
    high = generate_sample(cfg.seed + 101, subject_for_f0(900, cfg.high_f0), ContentSpec(tokens))
    low = generate_sample(cfg.seed + 102, subject_for_f0(901, cfg.low_f0), ContentSpec(tokens[::-1]))
    return high, low


def prepare(cfg: TrendConfig):
    work = Path(cfg.work_dir)
    data = work / "data"
    if not (data / "manifest.jsonl").exists():
        generate_dataset(DatasetConfig(out_dir=str(data), n_subjects=cfg.n_subjects,
                                       clips_per_subject=cfg.clips_per_subject, dataset_seed=cfg.dataset_seed))
    train, val = ClipCache(data, "train"), ClipCache(data, "val")
    aid_path = work / "audio_id.vstc"
    if aid_path.exists():
        clf, index = load_audio_classifier(aid_path)
        report = json.loads((work / "audio_id.json").read_text())
    else:
        clf, index, report = pretrain_audio_classifier(train, val, PretrainConfig(seed=cfg.seed))
        save_audio_classifier(aid_path, clf, index, report)
        (work / "audio_id.json").write_text(json.dumps(report, indent=2))
    return data, train, clf, index, report


def evaluate_arm(trainer: Trainer, test: ClipCache, trace, cfg: TrendConfig) -> dict:
    model = trainer.model
    model.eval()
    out = verification_protocol(model, test.video, test.subjects, seed=cfg.seed)
    high, low = swap_pair(cfg)
    swap = style_swap(model, high.video, low.video, high.audio, low.audio)
    out["swap"] = swap.report
    f0 = swap.report["f0_output"]
    out["swap_closer_to_low"] = f0 is not None and abs(f0 - cfg.low_f0) < abs(f0 - cfg.high_f0)
    recon = [m["L_recon"] for m in trace]
    out["recon_smoothed_100"] = smoothed(recon, 100, cfg.smooth_window)
    out["recon_smoothed_final"] = smoothed(recon, len(recon) - 1, cfg.smooth_window)
    # postnet and vocoder sanity on a ground-truth mel
    params = test.params
    mel = test.mel[0].numpy()
    target = np.exp(test.log_linear[0].double().numpy())
    est = postnet_linear(model.postnet, mel)
    out["postnet_rel_l2"] = float(np.linalg.norm(est - target) / np.linalg.norm(target))
    with torch.no_grad():
        wav = dsp.griffin_lim(est, params)
    out["vocoded_f0"] = metrics.f0_estimate(wav, params.sample_rate)
    out["reference_f0"] = metrics.f0_estimate(dsp.pcm_to_float(test.audio[0]), params.sample_rate)
    return out


def run_trend(cfg: TrendConfig = TrendConfig()) -> dict:
    t0 = time.time()
    data, train, clf, index, aid_report = prepare(cfg)
    test = ClipCache(data, "test")
    result = {"config": asdict(cfg), "audio_id_val_accuracy": aid_report["val_accuracy"], "arms": {}}
    for n_heads in cfg.heads:
        arm_dir = Path(cfg.work_dir) / f"heads{n_heads}"
        t = time.time()
        tcfg = TrainConfig(max_steps=cfg.steps, n_heads=n_heads, lr0=cfg.lr0, seed=cfg.seed,
                           batch_size=cfg.batch_size, checkpoint_every=500)
        trainer = Trainer(tcfg, train, clf, index)
        log_path = arm_dir / "train.log.jsonl"
        if log_path.exists():
            log_path.unlink()
        trace, aborted = [], None
        try:
            run_training(trainer, arm_dir, log_path=log_path, on_step=trace.append)
        except NumericError as exc:
            # evaluate the last good parameters anyway; the abort itself is part of the result
            aborted = str(exc)
            log.warning("heads=%d aborted at step %d: %s", n_heads, trainer.step, exc)
        train_seconds = time.time() - t
        arm = evaluate_arm(trainer, test, trace, cfg)
        arm.update(train_seconds=train_seconds, steps_completed=trainer.step, aborted=aborted)
        result["arms"][str(n_heads)] = arm
        log.info("heads=%d %s", n_heads, arm)
    if "6" in result["arms"] and "1" in result["arms"]:
        gap = {k: v["eer_f_sc"] - v["eer_f_id"] for k, v in result["arms"].items()}
        result["gap"] = gap
    result["seconds"] = time.time() - t0
    Path(cfg.work_dir, "trend.json").write_text(json.dumps(result, indent=2))
    return result

"""Held-out evaluation: intelligibility metrics, identity verification, style swaps, feature export."""
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp, metrics
from .errors import ValidationError
from .model import VideoToSpeech, video_to_tensor
from .seeding import stream
from .synthesis import vocode
from .tensorio import save_tensor


def _as_batch(video):
    v = torch.as_tensor(np.asarray(video)) if not torch.is_tensor(video) else video
    return v.unsqueeze(0) if v.dim() == 4 else v


@torch.no_grad()
def clip_features(model: VideoToSpeech, videos, chunk=16):
    """Time-averaged ``(f_sc, f_id)``, each ``(n_clips, C)``, with per-clip masks."""
    model.eval()
    sc, ident = [], []
    for i in range(0, len(videos), chunk):
        _, _, feats = model.disentangle(video_to_tensor(_as_batch(videos[i:i + chunk])))
        sc.append(feats.f_sc.mean(dim=1))
        ident.append(feats.f_id.mean(dim=1))
    return torch.cat(sc), torch.cat(ident)


@torch.no_grad()
def synthesize_mel(model: VideoToSpeech, video) -> np.ndarray:
    """Log-mel ``(n_mels, 4T)`` for one clip ``(T, H, W, 3)``."""
    model.eval()
    return model(video_to_tensor(_as_batch(video)))[0].numpy()


def build_trials(labels, seed=0):
    """All same-subject pairs plus an equal-size seeded sample of cross-subject pairs.

    Returns ``(i, j, same)`` integer arrays.
    """
    labels = np.asarray(labels)
    ii, jj = np.triu_indices(len(labels), k=1)
    same = labels[ii] == labels[jj]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if len(pos) == 0 or len(neg) == 0:
        raise ValidationError("verification needs both same-subject and cross-subject pairs")
    rng = stream(seed, "verification.trials")
    neg = np.sort(rng.choice(neg, size=min(len(pos), len(neg)), replace=False))
    keep = np.concatenate([pos, neg])
    return ii[keep], jj[keep], same[keep]


def cosine_scores(emb, i, j):
    emb = torch.as_tensor(emb, dtype=torch.float64)
    return torch.nn.functional.cosine_similarity(emb[i], emb[j], dim=-1).numpy()


def verification_eer(embeddings, labels, seed=0):
    i, j, same = build_trials(labels, seed)
    return metrics.eer(cosine_scores(embeddings, i, j), same), int(same.sum()), int((~same).sum())


def verification_protocol(model: VideoToSpeech, videos, labels, seed=0) -> dict:
    """EER of identity and content features as speaker-verification embeddings."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise ValidationError(f"subjects {ids[counts < 2].tolist()} have fewer than 2 clips")
    f_sc, f_id = clip_features(model, videos)
    eer_id, n_pos, n_neg = verification_eer(f_id, labels, seed)
    eer_sc, _, _ = verification_eer(f_sc, labels, seed)
    return {"eer_f_id": eer_id, "eer_f_sc": eer_sc, "n_positive": n_pos, "n_negative": n_neg}


@dataclass
class SwapResult:
    mel: np.ndarray
    waveform: np.ndarray
    f_sc: np.ndarray
    report: dict


@torch.no_grad()
def style_swap(model: VideoToSpeech, content_video, style_video, content_audio=None, style_audio=None,
               params=dsp.SpectralParams(), n_iters=60) -> SwapResult:
    """Content features of one clip voiced with the visage style of another."""
    model.eval()
    _, _, content = model.disentangle(video_to_tensor(_as_batch(content_video)))
    _, _, style = model.disentangle(video_to_tensor(_as_batch(style_video)))
    mel = model.synthesize(content.f_sc, model.encode_style(style.f_id))[0].numpy()
    wav = vocode(model.postnet, mel, params, n_iters=n_iters)
    report = {"f0_output": metrics.f0_estimate(wav, params.sample_rate)}
    for name, audio in (("f0_content", content_audio), ("f0_style", style_audio)):
        if audio is not None:
            report[name] = metrics.f0_estimate(dsp.pcm_to_float(audio), params.sample_rate)
    return SwapResult(mel, wav, content.f_sc[0].numpy(), report)


def export_features(model: VideoToSpeech, videos, entries, out_dir):
    """Writes ``f_sc.spc``, ``f_id.spc`` (rows = clips) and an aligned ``labels.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f_sc, f_id = clip_features(model, videos)
    save_tensor(out / "f_sc.spc", f_sc.numpy().astype(np.float32))
    save_tensor(out / "f_id.spc", f_id.numpy().astype(np.float32))
    with open(out / "labels.jsonl", "w") as fh:
        for row, e in enumerate(entries):
            fh.write(json.dumps({"row": row, "subject_id": e.subject_id, "sample_path": e.sample_path}) + "\n")
    return {"rows": len(entries), "width": int(f_sc.shape[1])}


def read_pesq_csv(path) -> dict:
    """``{sample_path: pesq}`` from a CSV with ``sample_path`` and ``pesq`` columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or {"sample_path", "pesq"} - set(reader.fieldnames):
            raise ValidationError(f"{path}: PESQ CSV needs 'sample_path' and 'pesq' columns")
        out = {}
        for row in reader:
            try:
                out[row["sample_path"]] = float(row["pesq"])
            except ValueError as exc:
                raise ValidationError(f"{path}: bad PESQ value {row['pesq']!r}") from exc
    return out


def _summary(values):
    vals = [v for v in values if v is not None]
    return {"mean": float(np.mean(vals)) if vals else None, "n": len(vals)}


def evaluate(model: VideoToSpeech, cache, metric_names=("stoi", "estoi", "eer"), pesq_csv=None,
             n_iters=60, seed=0) -> dict:
    """JSON-ready report over one split held in a ``ClipCache``."""
    unknown = set(metric_names) - {"stoi", "estoi", "eer"}
    if unknown:
        raise ValidationError(f"unknown metrics {sorted(unknown)}; choose from stoi, estoi, eer")
    params = cache.params
    pesq = read_pesq_csv(pesq_csv) if pesq_csv else {}
    clips = []
    need_audio = {"stoi", "estoi"} & set(metric_names)
    for k, entry in enumerate(cache.entries):
        row = {"sample_path": entry.sample_path, "subject_id": entry.subject_id}
        if need_audio:
            ref = dsp.pcm_to_float(cache.audio[k])
            est = vocode(model.postnet, synthesize_mel(model, cache.video[k]), params, n_iters=n_iters)
            if "stoi" in metric_names:
                row["stoi"] = metrics.stoi(ref, est, params.sample_rate)
            if "estoi" in metric_names:
                row["estoi"] = metrics.estoi(ref, est, params.sample_rate)
        row["pesq"] = pesq.get(entry.sample_path)
        clips.append(row)
    report = {"n_clips": len(clips), "clips": clips, "metrics": {}}
    for name in ("stoi", "estoi"):
        if name in metric_names:
            report["metrics"][name] = _summary(r[name] for r in clips)
    report["metrics"]["pesq"] = _summary(r["pesq"] for r in clips) if pesq else None
    if "eer" in metric_names:
        report["metrics"]["eer"] = verification_protocol(model, cache.video, cache.subjects, seed)
    return report


def save_mel_png(path, mel):
    """Grayscale image of a log-mel; image row 0 is the lowest mel bin."""
    from PIL import Image
    mel = np.asarray(mel, dtype=np.float64)
    lo, hi = mel.min(), mel.max()
    scaled = np.zeros_like(mel) if hi <= lo else (mel - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)

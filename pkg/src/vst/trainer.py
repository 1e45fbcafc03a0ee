"""Training: triple sampling, learning-rate schedule, audio-id pretraining, the optimization step."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from . import dsp
from .checkpoint import (load_checkpoint, optimizer_from_flat, optimizer_to_flat, prefixed,
                         save_checkpoint, unprefixed)
from .errors import ConfigError, NumericError, ValidationError
from .model import ModelConfig, VideoToSpeech, video_to_tensor
from .objectives import (AudioIdClassifier, Discriminator, LossWeights, VisualIdClassifier,
                         audio_identification_loss, discriminator_loss, generator_adversarial_loss,
                         reconstruction_loss, total_loss, visual_identification_loss)
from .seeding import derive_seed, stream
from .toydata import load_sample, read_manifest

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_v_id", "L_v_feat", "L_v_sc", "L_a_self", "L_a_cross", "L_G", "L_D", "L_recon", "L_tot")


@dataclass
class TrainConfig:
    data: str = ""
    out: str = ""
    lr0: float = 1e-4
    decay_steps: tuple = (20000, 40000, 60000)
    batch_size: int = 8
    max_steps: int = 2000
    n_heads: int = 6
    n_styles: int = 3
    channels: int = 128
    style_dim: int = 64
    synth_hidden: int = 128
    encoder_input_size: int = 32     # 0 feeds stored frames at full size
    mask_ema: bool = False
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 50.0
    grad_clip: float = 10.0          # 0 disables clipping
    explode_norm: float = 1e4
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 500

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        positive = ("lr0", "batch_size", "max_steps", "n_heads", "n_styles", "channels", "style_dim",
                    "synth_hidden", "explode_norm", "log_every", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "grad_clip", "encoder_input_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if any(s <= 0 for s in self.decay_steps) or any(
                b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ConfigError(f"decay_steps must be positive and strictly increasing, got {self.decay_steps}")

    @property
    def weights(self):
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.alpha4)

    def model_config(self):
        return ModelConfig(channels=self.channels, n_heads=self.n_heads, n_styles=self.n_styles,
                           style_dim=self.style_dim, synth_hidden=self.synth_hidden,
                           encoder_input_size=self.encoder_input_size, mask_ema=self.mask_ema)

    def to_dict(self):
        d = asdict(self)
        d["decay_steps"] = list(self.decay_steps)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step, lr0=1e-4, decay_steps=(20000, 40000, 60000)):
    """Step-wise halving: ``lr0 * 2**-k`` with k the number of decay points already reached."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    k = sum(1 for d in decay_steps if step >= d)
    return lr0 * 0.5 ** k


class TrainTriple(NamedTuple):
    anchor: int       # clip indices into the training pool
    positive: int     # same subject as the anchor
    negative: int     # another subject
    subject: int
    other_subject: int


class TripleSampler:
    """Draws (x, x', x*) index triples from per-clip subject labels."""

    def __init__(self, subjects):
        self.subjects = np.asarray(subjects)
        ids = np.unique(self.subjects)
        if len(ids) < 2:
            raise ConfigError(f"triple sampling needs at least 2 subjects, dataset has {len(ids)}")
        self.by_subject = {int(s): np.flatnonzero(self.subjects == s) for s in ids}
        self.others = {int(s): np.flatnonzero(self.subjects != s) for s in ids}
        if all(len(v) < 2 for v in self.by_subject.values()):
            raise ConfigError("no subject has two clips; positive pairs are impossible")

    def draw(self, rng):
        while True:
            a = int(rng.integers(len(self.subjects)))
            sid = int(self.subjects[a])
            same = self.by_subject[sid]
            if len(same) >= 2:
                break
        same = same[same != a]
        p = int(same[rng.integers(len(same))])
        pool = self.others[sid]
        n = int(pool[rng.integers(len(pool))])
        return TrainTriple(a, p, n, sid, int(self.subjects[n]))

    def batch(self, rng, batch_size):
        return [self.draw(rng) for _ in range(batch_size)]


def sample_batch(subjects, rng, batch_size=8):
    """One batch of triples; ``subjects`` holds the subject id of every training clip."""
    return TripleSampler(subjects).batch(rng, batch_size)


class ClipCache:
    """In-memory clips of one split: uint8 video, int16 audio, log-mel and log-linear targets."""

    def __init__(self, root, splits=("train",), params=dsp.SpectralParams(), workers=1):
        manifest = read_manifest(root)
        if isinstance(splits, str):
            splits = (splits,)
        entries = [e for s in splits for e in manifest.split(s)]
        if not entries:
            raise ValidationError(f"{root}: no clips in split(s) {list(splits)}")
        self.entries = entries
        self.params = params

        def load(entry):
            sample = load_sample(manifest.path_of(entry))
            mel, lin = dsp.waveform_features(dsp.pcm_to_float(sample.audio), params)
            return (sample.video, mel.astype(np.float32), dsp.log_compress(lin, params).astype(np.float32),
                    sample.audio)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                loaded = list(pool.map(load, entries))
        else:
            loaded = [load(e) for e in entries]
        self.video = torch.from_numpy(np.stack([v for v, *_ in loaded]))
        self.mel = torch.from_numpy(np.stack([m for _, m, *_ in loaded]))
        self.log_linear = torch.from_numpy(np.stack([l for _, _, l, _ in loaded]))
        self.audio = np.stack([a for *_, a in loaded])
        self.subjects = np.array([e.subject_id for e in entries])

    def __len__(self):
        return len(self.entries)


class SubjectIndex:
    """Maps dataset subject ids to contiguous class indices."""

    def __init__(self, subject_ids):
        self.ids = sorted(int(s) for s in set(subject_ids))
        self._lookup = {s: i for i, s in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __call__(self, subject_ids):
        try:
            return torch.tensor([self._lookup[int(s)] for s in subject_ids], dtype=torch.long)
        except KeyError as exc:
            raise ValidationError(f"subject {exc.args[0]} is not one of the classifier's subjects") from exc


# --- audio-identity classifier -------------------------------------------------

@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 100
    patience: int = 5           # evaluations without improvement before stopping
    target_accuracy: float = 0.995
    crop_frames: int = 64       # random time crops; the classifier pools over time
    seed: int = 0


def classifier_accuracy(classifier, mel, labels, chunk=64):
    classifier.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(labels), chunk):
            correct += int((classifier(mel[i:i + chunk]).argmax(-1) == labels[i:i + chunk]).sum())
    return correct / max(len(labels), 1)


def pretrain_audio_classifier(train: ClipCache, val: ClipCache, cfg: PretrainConfig = PretrainConfig()):
    """Cross-entropy training of mel -> subject. Returns ``(classifier, subject_index, report)``."""
    index = SubjectIndex(train.subjects)
    y_train = index(train.subjects)
    y_val = index(val.subjects)
    torch.manual_seed(derive_seed(cfg.seed, "audio_id.init"))
    rng = stream(cfg.seed, "audio_id.batches")
    clf = AudioIdClassifier(len(index), n_mels=train.mel.shape[1])
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    n, s_total = train.mel.shape[0], train.mel.shape[-1]
    crop = min(cfg.crop_frames, s_total)
    best_acc, best_state, best_step, stale, history = -1.0, None, 0, 0, []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        clf.train()
        idx = rng.integers(n, size=cfg.batch_size)
        start = int(rng.integers(s_total - crop + 1))
        logits = clf(train.mel[idx, :, start:start + crop])
        loss = F.cross_entropy(logits, y_train[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            acc = classifier_accuracy(clf, val.mel, y_val)
            history.append({"step": step, "loss": loss.item(), "val_accuracy": acc})
            log.info("audio-id step %d loss %.4f val acc %.4f", step, loss.item(), acc)
            if acc > best_acc:
                best_acc, best_step, stale = acc, step, 0
                best_state = {k: v.clone() for k, v in clf.state_dict().items()}
            else:
                stale += 1
            if best_acc >= cfg.target_accuracy or stale >= cfg.patience:
                break
    clf.load_state_dict(best_state)
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    chance = 1.0 / len(index)
    report = {"val_accuracy": best_acc, "train_accuracy": classifier_accuracy(clf, train.mel, y_train),
              "best_step": best_step, "steps_run": step, "n_subjects": len(index), "chance": chance,
              "subjects": index.ids, "history": history, "warning": None}
    if best_acc < chance + 0.05:
        report["warning"] = (f"validation accuracy {best_acc:.3f} is below chance + 0.05 "
                             f"({chance + 0.05:.3f}); the classifier is not usable")
        log.warning(report["warning"])
    return clf, index, report


def save_audio_classifier(path, classifier, index: SubjectIndex, report=None):
    meta = {"kind": "audio_id", "subjects": index.ids, "n_mels": classifier.n_mels, "width": classifier.width,
            "report": {k: v for k, v in (report or {}).items() if k != "history"}}
    save_checkpoint(path, prefixed("audio_id", classifier.state_dict()), meta)


def load_audio_classifier(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "audio_id":
        raise ValidationError(f"{path} is a {meta.get('kind')!r} checkpoint, not an audio-id classifier")
    return _classifier_from(unprefixed("audio_id", tensors), meta)


def _classifier_from(state, meta):
    clf = AudioIdClassifier(len(meta["subjects"]), n_mels=meta["n_mels"], width=meta["width"])
    clf.load_state_dict(state)
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf, SubjectIndex(meta["subjects"])


# --- joint training --------------------------------------------------------------

def _finite(name, value):
    v = float(value.detach())
    if not math.isfinite(v):
        raise NumericError(f"loss component {name} is {v}", component=name)
    return v


class Trainer:
    """Owns the generator, the visual-id classifier, the discriminator and their optimizers."""

    def __init__(self, cfg: TrainConfig, data: ClipCache, audio_classifier, audio_index: SubjectIndex):
        self.cfg = cfg
        self.data = data
        self.sampler = TripleSampler(data.subjects)
        self.index = audio_index
        self.labels = audio_index(data.subjects)
        torch.manual_seed(derive_seed(cfg.seed, "trainer.init"))
        mcfg = cfg.model_config()
        mcfg.n_mels, mcfg.n_freq = data.mel.shape[1], data.log_linear.shape[1]
        self.model = VideoToSpeech(mcfg)
        self.visual_classifier = VisualIdClassifier(cfg.style_dim, len(audio_index))
        self.discriminator = Discriminator(data.mel.shape[1], cfg.style_dim)
        self.audio_classifier = audio_classifier
        self.audio_classifier.eval()
        for p in self.audio_classifier.parameters():
            p.requires_grad_(False)
        betas, eps = (0.9, 0.999), 1e-8
        self.opt_g = torch.optim.Adam([
            {"params": list(self.model.generator_parameters())},
            {"params": list(self.visual_classifier.parameters())},
            {"params": list(self.model.postnet.parameters())},
        ], lr=cfg.lr0, betas=betas, eps=eps)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=cfg.lr0, betas=betas, eps=eps)
        self.rng = stream(cfg.seed, "trainer.batches")
        self.step = 0

    def _g_parameters(self):
        return [p for g in self.opt_g.param_groups for p in g["params"]]

    def lr(self):
        return lr_at(self.step, self.cfg.lr0, self.cfg.decay_steps)

    def train_step(self, batch=None):
        cfg, data = self.cfg, self.data
        lr = self.lr()
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr
        batch = batch if batch is not None else self.sampler.batch(self.rng, cfg.batch_size)
        a = torch.tensor([t.anchor for t in batch])
        p = torch.tensor([t.positive for t in batch])
        n = torch.tensor([t.negative for t in batch])
        b = len(batch)
        ids = self.labels[a]
        ids_star = self.labels[n]
        y = data.mel[a]

        self.model.train()
        self.visual_classifier.train()
        self.discriminator.train()
        video = video_to_tensor(data.video[torch.cat([a, p, n])])
        _, _, feats = self.model.disentangle(video)
        styles = self.model.encode_style(feats.f_id)
        s_a = [s[:b] for s in styles]
        s_p = [s[b:2 * b] for s in styles]
        s_n = [s[2 * b:] for s in styles]
        f_sc_a, f_sc_n = feats.f_sc[:b], feats.f_sc[2 * b:]
        content_styles = self.model.encode_style(feats.f_sc[:b])
        mels = self.model.synthesize(torch.cat([f_sc_a, f_sc_a, f_sc_n]),
                                     [torch.cat([sa, sn, sa]) for sa, sn in zip(s_a, s_n)])
        fake, fake_cross_style, fake_cross_content = mels[:b], mels[b:2 * b], mels[2 * b:]

        # discriminator update on detached generator outputs
        l_d = discriminator_loss(self.discriminator, y, fake, s_a[-1])
        _finite("L_D", l_d)
        self.opt_d.zero_grad()
        l_d.backward()
        self.opt_d.step()

        # generator-side update
        l_g = generator_adversarial_loss(self.discriminator, fake, s_a[-1])
        l_v_id, l_v_feat, l_v_sc, l_v = visual_identification_loss(
            self.visual_classifier, s_a, s_p, content_styles, ids)
        l_a_self, l_a_cross, l_a = audio_identification_loss(
            self.audio_classifier, fake, fake_cross_style, fake_cross_content, ids, ids_star)
        l_recon = reconstruction_loss(y, fake)
        metrics = {"step": self.step}
        for name, value in (("L_v_id", l_v_id), ("L_v_feat", l_v_feat), ("L_v_sc", l_v_sc),
                            ("L_a_self", l_a_self), ("L_a_cross", l_a_cross), ("L_G", l_g),
                            ("L_recon", l_recon)):
            metrics[name] = _finite(name, value)
        metrics["L_D"] = float(l_d.detach())
        l_tot = total_loss(l_v, l_a, l_g, l_recon, cfg.weights)
        metrics["L_tot"] = _finite("L_tot", l_tot)
        # the postnet learns ground-truth mel -> linear on the side
        l_post = reconstruction_loss(data.log_linear[a], self.model.postnet(y))
        metrics["L_postnet"] = _finite("L_postnet", l_post)

        self.opt_g.zero_grad()
        (l_tot + l_post).backward()
        params = self._g_parameters()
        norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip if cfg.grad_clip > 0 else float("inf"))
        norm = float(norm)
        if not math.isfinite(norm) or norm > cfg.explode_norm:
            raise NumericError(f"generator gradient norm {norm:.3g} exceeds {cfg.explode_norm:g}",
                               component="grad_norm")
        self.opt_g.step()
        self.model.postnet.mark_trained()
        self.step += 1
        metrics["grad_norm"] = norm
        metrics["lr"] = lr
        return metrics

    # -- persistence --

    def state(self):
        tensors = {}
        tensors.update(prefixed("model", self.model.state_dict()))
        tensors.update(prefixed("visual_id", self.visual_classifier.state_dict()))
        tensors.update(prefixed("discriminator", self.discriminator.state_dict()))
        tensors.update(prefixed("audio_id", self.audio_classifier.state_dict()))
        g_t, g_info = optimizer_to_flat("opt_g", self.opt_g)
        d_t, d_info = optimizer_to_flat("opt_d", self.opt_d)
        tensors.update(g_t)
        tensors.update(d_t)
        meta = {"kind": "train", "step": self.step, "config": self.cfg.to_dict(),
                "model_config": asdict(self.model.cfg), "spectral": asdict(self.data.params),
                "subjects": self.index.ids, "n_mels": self.audio_classifier.n_mels,
                "width": self.audio_classifier.width, "opt_g": g_info, "opt_d": d_info,
                "rng": self.rng.bit_generator.state, "torch_rng": torch.get_rng_state().tolist()}
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state()
        save_checkpoint(path, tensors, meta)

    @classmethod
    def resume(cls, path, data: ClipCache):
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "train":
            raise ValidationError(f"{path} is not a training checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        clf, index = _classifier_from(unprefixed("audio_id", tensors), meta)
        trainer = cls(cfg, data, clf, index)
        trainer.model.load_state_dict(unprefixed("model", tensors))
        trainer.visual_classifier.load_state_dict(unprefixed("visual_id", tensors))
        trainer.discriminator.load_state_dict(unprefixed("discriminator", tensors))
        optimizer_from_flat("opt_g", tensors, meta["opt_g"], trainer.opt_g)
        optimizer_from_flat("opt_d", tensors, meta["opt_d"], trainer.opt_d)
        trainer.rng.bit_generator.state = meta["rng"]
        torch.set_rng_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
        trainer.step = meta["step"]
        return trainer


def spectral_params(meta) -> dsp.SpectralParams:
    return dsp.SpectralParams(**meta["spectral"])


def load_generator(path):
    """``(model, subject_index, meta)`` from a training checkpoint, model in eval mode."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "train":
        raise ValidationError(f"{path} is a {meta.get('kind')!r} checkpoint, not a trained model")
    model = VideoToSpeech(ModelConfig(**meta["model_config"]))
    model.load_state_dict(unprefixed("model", tensors))
    model.eval()
    return model, SubjectIndex(meta["subjects"]), meta


def run_training(trainer: Trainer, out_dir, steps=None, log_path=None, on_step=None):
    """Run until ``cfg.max_steps`` (or ``steps`` more), logging JSON lines and checkpointing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else out_dir / "train.log.jsonl"
    target = trainer.cfg.max_steps if steps is None else trainer.step + steps
    trace = []
    with open(log_path, "a") as fh:
        while trainer.step < target:
            m = trainer.train_step()
            trace.append(m)
            if m["step"] % trainer.cfg.log_every == 0:
                fh.write(json.dumps({k: m[k] for k in ("step", *LOSS_KEYS, "lr", "grad_norm")}) + "\n")
                fh.flush()
            if trainer.step % trainer.cfg.checkpoint_every == 0:
                trainer.save(out_dir / "checkpoint.vstc")
            if on_step:
                on_step(m)
    trainer.save(out_dir / "checkpoint.vstc")
    return trace

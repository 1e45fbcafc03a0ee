"""Synthetic talking-face clips whose identity and content factors are known.

Identity: a subject's pitch ``f0_base`` fixes both face hue and face scale
(monotone maps), so voice is predictable from appearance, including for
subjects never seen in training. Content: a viseme token sequence drives
mouth aperture in the video and loudness plus formant centre in the audio.
Token 0 is a closed mouth and therefore silence.
"""
import colorsys
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, FormatError, ValidationError

FPS = 25
SAMPLE_RATE = 16000
N_HARMONICS = 8
F0_MIN, F0_MAX, F0_STEP = 110.0, 310.0, 10.0
FORMANT_MIN, FORMANT_MAX = 500.0, 2500.0
RESONANCE_Q = 3.0
PEAK_LEVEL = 0.9
FADE_SECONDS = 0.01
MAGIC = b"AVS1"

BACKGROUND = (70, 70, 70)
MOUTH = (35, 8, 12)
EYE = (20, 20, 30)


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: int
    f0_base: float
    hue: float
    face_scale: float

    def __post_init__(self):
        if not F0_MIN <= self.f0_base <= F0_MAX:
            raise ValidationError(f"f0_base {self.f0_base} outside [{F0_MIN}, {F0_MAX}] Hz")
        if not 0.0 <= self.hue < 1.0:
            raise ValidationError(f"hue {self.hue} outside [0, 1)")
        if not 0.7 <= self.face_scale <= 1.3:
            raise ValidationError(f"face_scale {self.face_scale} outside [0.7, 1.3]")


def _pitch_fraction(f0):
    return (f0 - F0_MIN) / (F0_MAX - F0_MIN)


def subject_for_f0(subject_id: int, f0: float) -> SubjectSpec:
    """Appearance implied by a pitch: low voices get warm hues and large faces."""
    frac = _pitch_fraction(f0)
    return SubjectSpec(subject_id=subject_id, f0_base=float(f0),
                       hue=round(0.75 * frac, 6), face_scale=round(1.3 - 0.6 * frac, 6))


def max_subjects() -> int:
    return int(round((F0_MAX - F0_MIN) / F0_STEP)) + 1


def make_subject(dataset_seed: int, subject_id: int) -> SubjectSpec:
    """Deterministic subject; pitches sit on a 10 Hz grid permuted by the seed."""
    if not 0 <= subject_id < max_subjects():
        raise ValidationError(f"subject_id must be in [0, {max_subjects()}), got {subject_id}")
    slots = np.random.default_rng(np.random.SeedSequence([int(dataset_seed), 0x5B])).permutation(max_subjects())
    return subject_for_f0(subject_id, F0_MIN + F0_STEP * int(slots[subject_id]))


@dataclass(frozen=True)
class ContentSpec:
    tokens: tuple
    vocab_size: int = 10

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if len(self.tokens) == 0:
            raise ValidationError("token sequence is empty")
        bad = [t for t in self.tokens if not 0 <= t < self.vocab_size]
        if bad:
            raise ValidationError(f"tokens {bad} outside vocabulary [0, {self.vocab_size})")


def token_aperture(token: int, vocab_size: int = 10) -> float:
    """Mouth opening in [0, 1]; token 0 is closed."""
    if token == 0:
        return 0.0
    return 0.3 + 0.7 * (token - 1) / max(vocab_size - 2, 1)


def token_formant(token: int, vocab_size: int = 10) -> float:
    """Resonance centre in Hz, deliberately not monotone in aperture."""
    frac = (token * 0.6180339887498949) % 1.0
    return FORMANT_MIN + (FORMANT_MAX - FORMANT_MIN) * frac


def _segment_centres(n_frames, n_tokens):
    if n_frames % n_tokens:
        raise ValidationError(f"T={n_frames} frames cannot be split into K={n_tokens} equal segments")
    seg = n_frames // n_tokens
    return seg * (np.arange(n_tokens) + 0.5)


def token_trajectory(values, n_frames, positions):
    """Piecewise-linear interpolation of per-token values, in frame units."""
    centres = _segment_centres(n_frames, len(values))
    return np.interp(positions, centres, np.asarray(values, dtype=np.float64))


def mouth_trajectory(content: ContentSpec, n_frames: int) -> np.ndarray:
    apertures = [token_aperture(t, content.vocab_size) for t in content.tokens]
    return token_trajectory(apertures, n_frames, np.arange(n_frames) + 0.5)


def face_rgb(hue: float) -> tuple:
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.9)
    return tuple(int(round(255 * c)) for c in (r, g, b))


def face_geometry(face_scale, height, width):
    """(radius_y, radius_x, mouth_half_width, max_mouth_half_height) in pixels."""
    ry = 0.40 * height * face_scale
    rx = 0.30 * width * face_scale
    return ry, rx, 0.45 * rx, 0.16 * ry


def mouth_half_height_px(aperture, face_scale, height, width) -> int:
    """Rows above/below the mouth line; 0 draws nothing (closed mouth)."""
    _, _, _, max_half = face_geometry(face_scale, height, width)
    return int(round(aperture * max_half))


@dataclass(eq=False)
class AVSample:
    video: np.ndarray          # (T, H, W, 3) uint8
    audio: np.ndarray          # (n,) int16 at 16 kHz
    subject: SubjectSpec
    content: ContentSpec
    offset: tuple = field(default=(0, 0))

    def __eq__(self, other):
        if not isinstance(other, AVSample):
            return NotImplemented
        return (self.subject == other.subject and self.content == other.content
                and tuple(self.offset) == tuple(other.offset)
                and self.video.shape == other.video.shape and np.array_equal(self.video, other.video)
                and self.audio.shape == other.audio.shape and np.array_equal(self.audio, other.audio))

    @property
    def n_frames(self) -> int:
        return self.video.shape[0]


def audio_length(n_frames, fps=FPS, sample_rate=SAMPLE_RATE) -> int:
    return int(round(n_frames / fps * sample_rate))


def render_video(subject, content, n_frames=24, height=64, width=64, offset=(0, 0)) -> np.ndarray:
    _segment_centres(n_frames, len(content.tokens))
    ry, rx, mouth_hw, _ = face_geometry(subject.face_scale, height, width)
    cy = (height - 1) / 2 + offset[0]
    cx = (width - 1) / 2 + offset[1]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    eye_y = cy - 0.3 * ry
    eye_r = max(1.0, 0.08 * rx)
    eyes = np.zeros_like(face)
    for ex in (cx - 0.4 * rx, cx + 0.4 * rx):
        eyes |= (yy - eye_y) ** 2 + (xx - ex) ** 2 <= eye_r ** 2

    base = np.empty((height, width, 3), dtype=np.uint8)
    base[:] = BACKGROUND
    base[face] = face_rgb(subject.hue)
    base[eyes & face] = EYE

    mouth_row = int(round(cy + 0.5 * ry))
    mouth_col0 = int(round(cx - mouth_hw))
    mouth_col1 = int(round(cx + mouth_hw))
    frames = np.repeat(base[None], n_frames, axis=0)
    for t, aperture in enumerate(mouth_trajectory(content, n_frames)):
        half = mouth_half_height_px(aperture, subject.face_scale, height, width)
        if half > 0:
            frames[t, mouth_row - half:mouth_row + half + 1, mouth_col0:mouth_col1 + 1] = MOUTH
    return frames


def _resonance_gain(freq, centre):
    r = freq / centre
    return 1.0 / np.sqrt((1.0 - r ** 2) ** 2 + (r / RESONANCE_Q) ** 2)


def synthesize_audio(subject, content, n_frames=24, rng=None) -> np.ndarray:
    """Harmonic stack at f0 through a moving resonance, peak-normalised, int16."""
    n = audio_length(n_frames)
    samples_per_frame = SAMPLE_RATE / FPS
    pos = np.arange(n) / samples_per_frame
    aperture = token_trajectory([token_aperture(t, content.vocab_size) for t in content.tokens], n_frames, pos)
    centre = token_trajectory([token_formant(t, content.vocab_size) for t in content.tokens], n_frames, pos)
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS) if rng is not None else np.zeros(N_HARMONICS)
    t = np.arange(n) / SAMPLE_RATE
    signal = np.zeros(n)
    for k in range(1, N_HARMONICS + 1):
        fk = k * subject.f0_base
        signal += _resonance_gain(fk, centre) / k * np.sin(2 * np.pi * fk * t + phases[k - 1])
    signal *= aperture
    n_fade = int(FADE_SECONDS * SAMPLE_RATE)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
    signal[:n_fade] *= ramp
    signal[n - n_fade:] *= ramp[::-1]
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal *= PEAK_LEVEL / peak
    return np.round(signal * 32767.0).astype(np.int16)


def generate_sample(seed: int, subject: SubjectSpec, content: ContentSpec,
                    n_frames=24, height=64, width=64, jitter=2) -> AVSample:
    """One clip. ``seed`` picks harmonic phases and a small head offset."""
    if seed < 0:
        raise ValidationError("seed must be >= 0")
    _segment_centres(n_frames, len(content.tokens))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA5]))
    offset = tuple(int(v) for v in rng.integers(-jitter, jitter + 1, size=2)) if jitter else (0, 0)
    video = render_video(subject, content, n_frames, height, width, offset)
    audio = synthesize_audio(subject, content, n_frames, rng)
    return AVSample(video=video, audio=audio, subject=subject, content=content, offset=offset)


# ---------------------------------------------------------------------------
# AVS1 container: 16-byte header (magic, T, H, W as uint32 LE), RGB frames,
# uint64 sample count, int16 PCM, then a uint32-length JSON metadata trailer.

def sample_to_bytes(sample: AVSample) -> bytes:
    t, h, w, _ = sample.video.shape
    meta = json.dumps({"subject": asdict(sample.subject),
                       "tokens": list(sample.content.tokens),
                       "vocab_size": sample.content.vocab_size,
                       "offset": list(sample.offset)}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<3I", t, h, w),
             np.ascontiguousarray(sample.video, dtype=np.uint8).tobytes(),
             struct.pack("<Q", sample.audio.size),
             np.ascontiguousarray(sample.audio, dtype="<i2").tobytes(),
             struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


def sample_from_bytes(blob: bytes, name="<bytes>") -> AVSample:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic, not an AVS1 file")
    t, h, w = struct.unpack_from("<3I", blob, 4)
    video_end = 16 + t * h * w * 3
    if len(blob) < video_end + 8:
        raise FormatError(f"{name}: truncated: expected at least {video_end + 8} bytes, got {len(blob)}")
    (n_audio,) = struct.unpack_from("<Q", blob, video_end)
    audio_end = video_end + 8 + 2 * n_audio
    if len(blob) < audio_end + 4:
        raise FormatError(f"{name}: truncated: expected at least {audio_end + 4} bytes, got {len(blob)}")
    (n_meta,) = struct.unpack_from("<I", blob, audio_end)
    expected = audio_end + 4 + n_meta
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "header/payload size mismatch"
        raise FormatError(f"{name}: {kind}: expected {expected} bytes, got {len(blob)}")
    try:
        meta = json.loads(blob[audio_end + 4:].decode("utf-8"))
        subject = SubjectSpec(**meta["subject"])
        content = ContentSpec(tuple(meta["tokens"]), meta["vocab_size"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{name}: corrupt metadata ({exc})") from exc
    video = np.frombuffer(blob, dtype=np.uint8, count=t * h * w * 3, offset=16).reshape(t, h, w, 3).copy()
    audio = np.frombuffer(blob, dtype="<i2", count=n_audio, offset=video_end + 8).astype(np.int16)
    return AVSample(video=video, audio=audio, subject=subject, content=content,
                    offset=tuple(meta.get("offset", (0, 0))))


def save_sample(path, sample: AVSample) -> None:
    Path(path).write_bytes(sample_to_bytes(sample))


def load_sample(path) -> AVSample:
    path = Path(path)
    return sample_from_bytes(path.read_bytes(), name=str(path))


def export_wav(path, sample: AVSample) -> None:
    dsp.write_wav(path, sample.audio, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Datasets

SPLITS = ("train", "val", "test")


@dataclass
class DatasetConfig:
    out_dir: str
    n_subjects: int = 8
    clips_per_subject: int = 64
    split_mode: str = "independent"
    dataset_seed: int = 1
    n_frames: int = 24
    height: int = 64
    width: int = 64
    tokens_per_clip: int = 6
    vocab_size: int = 10
    test_fraction: float = 0.2
    val_fraction: float = 0.1


@dataclass
class ManifestEntry:
    sample_path: str
    subject_id: int
    token_seq: list
    split: str


@dataclass
class DatasetManifest:
    entries: list
    dataset_seed: int
    root: str = "."
    subjects: dict = field(default_factory=dict)

    @property
    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        for e in self.entries:
            out[e.split] += 1
        return out

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def subject_ids(self, split=None):
        return sorted({e.subject_id for e in self.entries if split is None or e.split == split})

    def path_of(self, entry) -> Path:
        return Path(self.root) / entry.sample_path

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.entries == other.entries and self.dataset_seed == other.dataset_seed
                and self.subjects == other.subjects)


def _assign_splits(cfg: DatasetConfig):
    """Map subject -> list of split names (one per clip)."""
    ids = list(range(cfg.n_subjects))
    n = cfg.clips_per_subject
    plan = {}
    if cfg.split_mode == "independent":
        n_test = math.ceil(round(cfg.test_fraction * cfg.n_subjects, 9))
        if cfg.n_subjects - n_test < 2:
            raise ValidationError(
                f"{cfg.n_subjects} subjects leave fewer than 2 training subjects after reserving {n_test} for test")
        order = np.random.default_rng(np.random.SeedSequence([cfg.dataset_seed, 0x7E57])).permutation(ids)
        test_ids = {int(i) for i in order[:n_test]}
        n_val = int(round(cfg.val_fraction * n)) if n >= 4 else 0
        n_val = max(n_val, 1) if n >= 4 else 0
        for sid in ids:
            plan[sid] = ["test"] * n if sid in test_ids else ["train"] * (n - n_val) + ["val"] * n_val
    elif cfg.split_mode == "dependent":
        if n < 4:
            raise ValidationError("dependent split needs at least 4 clips per subject")
        n_hold = max(1, int(round(0.05 * n)))
        for sid in ids:
            plan[sid] = ["train"] * (n - 2 * n_hold) + ["val"] * n_hold + ["test"] * n_hold
    else:
        raise ConfigError(f"unknown split mode {cfg.split_mode!r} (expected independent or dependent)")
    return plan


def generate_dataset(cfg: DatasetConfig) -> DatasetManifest:
    """Write ``samples/*.avs``, ``manifest.jsonl`` and ``dataset.json`` under ``cfg.out_dir``."""
    if cfg.n_subjects < 4:
        raise ValidationError(f"n_subjects must be >= 4, got {cfg.n_subjects}")
    if cfg.n_subjects > max_subjects():
        raise ValidationError(f"at most {max_subjects()} subjects fit the 10 Hz pitch grid")
    if cfg.clips_per_subject < 2:
        raise ValidationError(f"clips_per_subject must be >= 2, got {cfg.clips_per_subject}")
    _segment_centres(cfg.n_frames, cfg.tokens_per_clip)
    plan = _assign_splits(cfg)

    out = Path(cfg.out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    # one script per clip index, read by every subject: content is independent of identity exactly
    token_rng = np.random.default_rng(np.random.SeedSequence([cfg.dataset_seed, 0x70C]))
    scripts = token_rng.integers(0, cfg.vocab_size, size=(cfg.clips_per_subject, cfg.tokens_per_clip))
    subjects = {sid: make_subject(cfg.dataset_seed, sid) for sid in range(cfg.n_subjects)}
    entries = []
    for sid in range(cfg.n_subjects):
        for j, split in enumerate(plan[sid]):
            tokens = scripts[j].tolist()
            content = ContentSpec(tuple(tokens), cfg.vocab_size)
            clip_seed = int(np.random.SeedSequence([cfg.dataset_seed, sid, j]).generate_state(1)[0])
            sample = generate_sample(clip_seed, subjects[sid], content, cfg.n_frames, cfg.height, cfg.width)
            rel = f"samples/s{sid:03d}_c{j:03d}.avs"
            save_sample(out / rel, sample)
            entries.append(ManifestEntry(rel, sid, tokens, split))

    manifest = DatasetManifest(entries=entries, dataset_seed=cfg.dataset_seed, root=str(out),
                               subjects={sid: asdict(s) for sid, s in subjects.items()})
    write_manifest(manifest, out, config=cfg)
    return manifest


def write_manifest(manifest: DatasetManifest, out_dir, config: DatasetConfig = None) -> None:
    out = Path(out_dir)
    with open(out / "manifest.jsonl", "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
    meta = {"dataset_seed": manifest.dataset_seed, "counts": manifest.counts,
            "subjects": {str(k): v for k, v in manifest.subjects.items()}}
    if config is not None:
        meta["config"] = {k: v for k, v in asdict(config).items() if k != "out_dir"}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_manifest(data_dir) -> DatasetManifest:
    root = Path(data_dir)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise ValidationError(f"{root} has no manifest.jsonl")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    subjects = {int(k): v for k, v in meta.get("subjects", {}).items()}
    return DatasetManifest(entries=entries, dataset_seed=meta.get("dataset_seed", 0),
                           root=str(root), subjects=subjects)

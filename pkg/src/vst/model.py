"""The full generator: video -> (f_sc, f_id) -> styles -> mel, plus the postnet."""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .selection import SpeechVisageSelection, VisualEncoder
from .synthesis import Postnet, StyleEncoder, VSSynthesizer


@dataclass
class ModelConfig:
    channels: int = 128
    n_heads: int = 6
    n_styles: int = 3
    style_dim: int = 64
    synth_hidden: int = 128
    n_mels: int = 80
    n_freq: int = 257
    encoder_input_size: int = 0      # 0 keeps the stored frame size
    mask_ema: bool = False


def video_to_tensor(video):
    """uint8 ``(..., H, W, 3)`` array/tensor -> float32 tensor in [0, 1]."""
    t = torch.as_tensor(np.asarray(video)) if not torch.is_tensor(video) else video
    if t.dtype == torch.uint8:
        return t.float().div_(255.0)
    return t.float()


class VideoToSpeech(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = VisualEncoder(cfg.channels, input_size=cfg.encoder_input_size or None)
        self.selection = SpeechVisageSelection(cfg.channels, cfg.n_heads, mask_ema=cfg.mask_ema)
        self.style_encoder = StyleEncoder(cfg.channels, cfg.style_dim, cfg.n_styles)
        self.synthesizer = VSSynthesizer(cfg.channels, cfg.synth_hidden, cfg.n_mels, cfg.style_dim, cfg.n_styles)
        self.postnet = Postnet(cfg.n_mels, cfg.n_freq)

    def disentangle(self, video):
        """``(f_vis, mask_set, features)`` for a video batch ``(B, T, H, W, 3)``."""
        f_vis = self.encoder(video_to_tensor(video))
        masks = self.selection.compute_masks(f_vis)
        return f_vis, masks, self.selection.select_features(f_vis, masks)

    def encode_style(self, f_id):
        return self.style_encoder(f_id)

    def synthesize(self, f_sc, styles):
        return self.synthesizer(f_sc, styles)

    def forward(self, video):
        _, _, feats = self.disentangle(video)
        return self.synthesize(feats.f_sc, self.encode_style(feats.f_id))

    def generator_parameters(self):
        """Everything except the postnet, which trains on its own target."""
        for name, p in self.named_parameters():
            if not name.startswith("postnet."):
                yield p

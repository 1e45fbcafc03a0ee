"""Visual encoder and multi-head speech-visage feature selection.

Each head turns the visual features into channel importance scores with its
own recurrent transform; a channel softmax makes them a mask. The mask keeps
speech content, its complement ``1 - mask`` keeps identity, and the N masked
copies are concatenated before a linear embedding.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


class VisualEncoder(nn.Module):
    """Per-frame conv stem, global spatial average, one LSTM over time.

    Input ``(B, T, H, W, 3)`` in [0, 1]; output ``(B, T, C)``.
    ``input_size`` optionally average-pools frames down before the stem.
    """

    def __init__(self, channels=128, widths=(32, 64, 96), input_size=None):
        super().__init__()
        layers, c_in = [], 3
        for c_out in (*widths, channels):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.stem = nn.Sequential(*layers)
        self.rnn = nn.LSTM(channels, channels, batch_first=True)
        self.channels = channels
        self.input_size = input_size

    def forward(self, video):
        if video.dim() != 5 or video.shape[-1] != 3:
            raise ValidationError(f"video batch must be (B, T, H, W, 3), got {tuple(video.shape)}")
        b, t = video.shape[:2]
        frames = video.reshape(b * t, *video.shape[2:]).permute(0, 3, 1, 2)
        if self.input_size and frames.shape[-1] != self.input_size:
            frames = F.adaptive_avg_pool2d(frames, self.input_size)
        feats = self.stem(frames).mean(dim=(2, 3)).reshape(b, t, self.channels)
        out, _ = self.rnn(feats)
        return out


def stack_clips(clips):
    """Batch a list of ``(T, H, W, 3)`` arrays/tensors; all T must agree."""
    lengths = {tuple(c.shape) for c in clips}
    if len(lengths) != 1:
        raise ValidationError(f"clips in a batch must share one shape, got {sorted(lengths)}")
    return torch.stack([torch.as_tensor(c) for c in clips])


@dataclass
class SelectiveMaskSet:
    """Masks ``(B, N, T, C)`` with entries in (0, 1); each row sums to 1 over C."""
    masks: torch.Tensor
    batch_size_used: int

    @property
    def complements(self):
        return 1.0 - self.masks

    @property
    def n_heads(self):
        return self.masks.shape[1]


@dataclass
class DisentangledFeatures:
    f_sc: torch.Tensor     # speech content, (B, T, C)
    f_id: torch.Tensor     # identity, (B, T, C)


class SpeechVisageSelection(nn.Module):
    def __init__(self, channels=128, n_heads=6, mask_ema=False, ema_decay=0.99):
        super().__init__()
        if n_heads < 1:
            raise ValidationError("n_heads must be >= 1")
        self.channels = channels
        self.n_heads = n_heads
        self.transforms = nn.ModuleList(nn.LSTM(channels, channels, batch_first=True) for _ in range(n_heads))
        self.embed_sc = nn.Linear(n_heads * channels, channels)
        self.embed_id = nn.Linear(n_heads * channels, channels)
        self.mask_ema = mask_ema
        self.ema_decay = ema_decay
        self.register_buffer("ema_scores", torch.zeros(0))

    def importance(self, f_vis):
        """Per-head scores before normalisation, ``(B, N, T, C)``."""
        return torch.stack([rnn(f_vis)[0] for rnn in self.transforms], dim=1)

    def compute_masks(self, f_vis, training=None) -> SelectiveMaskSet:
        training = self.training if training is None else training
        if f_vis.dim() != 3 or f_vis.shape[0] == 0:
            raise ValidationError(f"f_vis must be a non-empty (B, T, C) batch, got {tuple(f_vis.shape)}")
        scores = self.importance(f_vis)
        return self.masks_from_scores(scores, training)

    def masks_from_scores(self, scores, training) -> SelectiveMaskSet:
        b = scores.shape[0]
        if b == 0:
            raise ValidationError("empty batch")
        if training:
            shared = scores.mean(dim=0)
            if self.mask_ema:
                with torch.no_grad():
                    if self.ema_scores.shape != shared.shape:
                        self.ema_scores = shared.detach().clone()
                    else:
                        self.ema_scores.mul_(self.ema_decay).add_((1 - self.ema_decay) * shared.detach())
            masks = torch.softmax(shared, dim=-1).unsqueeze(0).expand(b, -1, -1, -1)
            return SelectiveMaskSet(masks, b)
        if self.mask_ema and self.ema_scores.numel():
            if self.ema_scores.shape != scores.shape[1:]:
                raise ValidationError("EMA mask was collected for a different (N, T, C)")
            masks = torch.softmax(self.ema_scores, dim=-1).unsqueeze(0).expand(b, -1, -1, -1)
            return SelectiveMaskSet(masks, b)
        return SelectiveMaskSet(torch.softmax(scores, dim=-1), 1)

    @staticmethod
    def masked_inputs(f_vis, mask_set: SelectiveMaskSet):
        """Channel-concatenated (content, identity) inputs, each ``(B, T, N*C)``."""
        masks = mask_set.masks
        if masks.shape[0] != f_vis.shape[0] or masks.shape[2:] != f_vis.shape[1:]:
            raise ValidationError(
                f"mask shape {tuple(masks.shape)} does not match features {tuple(f_vis.shape)}")
        x = f_vis.unsqueeze(1)
        content = (masks * x).permute(0, 2, 1, 3).flatten(2)
        identity = (mask_set.complements * x).permute(0, 2, 1, 3).flatten(2)
        return content, identity

    def select_features(self, f_vis, mask_set: SelectiveMaskSet) -> DisentangledFeatures:
        if mask_set.n_heads != self.n_heads:
            raise ValidationError(f"mask set has {mask_set.n_heads} heads, module expects {self.n_heads}")
        content, identity = self.masked_inputs(f_vis, mask_set)
        return DisentangledFeatures(self.embed_sc(content), self.embed_id(identity))

    def forward(self, f_vis):
        return self.select_features(f_vis, self.compute_masks(f_vis))

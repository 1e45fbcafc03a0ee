"""Visage-style encoder, style-coated mel synthesizer, postnet and vocoder."""
import numpy as np
import torch
import torch.nn as nn

from . import dsp
from .errors import PreconditionError, ValidationError

ADAIN_EPS = 1e-5


def adain(x, gamma, beta, eps=ADAIN_EPS):
    """``gamma * (x - mean) / (std + eps) + beta`` per channel over the length axis.

    ``x`` is ``(B, C, L)``; ``gamma``/``beta`` are ``(B, C)``. Channels that
    are exactly constant along L map to ``beta``.
    """
    if x.dim() != 3:
        raise ValidationError(f"adain expects (B, C, L), got {tuple(x.shape)}")
    if gamma.shape != x.shape[:2] or beta.shape != x.shape[:2]:
        raise ValidationError(
            f"style affine gives {tuple(gamma.shape)}/{tuple(beta.shape)}, features have {tuple(x.shape[:2])}")
    mean = x.mean(dim=-1, keepdim=True)
    constant = (x == x[..., :1]).all(dim=-1, keepdim=True)
    # sqrt'(0) is infinite: keep constant channels away from it so backward stays finite
    var = torch.where(constant, torch.ones_like(mean), x.var(dim=-1, unbiased=False, keepdim=True))
    std = var.sqrt()
    normed = torch.where(constant, torch.zeros_like(x), (x - mean) / (std + eps))
    return gamma.unsqueeze(-1) * normed + beta.unsqueeze(-1)


class AdaIN(nn.Module):
    """One style-injection site: style vector -> per-channel (gamma, beta)."""

    def __init__(self, channels, style_dim):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(style_dim, 2 * channels)
        with torch.no_grad():
            self.affine.bias[:channels].fill_(1.0)
            self.affine.bias[channels:].zero_()

    def forward(self, x, style):
        if x.shape[1] != self.channels:
            raise ValidationError(f"AdaIN site has {self.channels} channels, input has {x.shape[1]}")
        gamma, beta = self.affine(style).chunk(2, dim=-1)
        return adain(x, gamma, beta)


class StyleEncoder(nn.Module):
    """M strided temporal conv stages; style m is a projection of stage m's time average.

    Input ``(B, T, C)``; returns a list of M tensors ``(B, style_dim)``.
    """

    def __init__(self, channels=128, style_dim=64, n_styles=3):
        super().__init__()
        self.n_styles = n_styles
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv1d(channels, channels, 3, stride=2, padding=1), nn.LeakyReLU(0.2))
            for _ in range(n_styles))
        self.proj = nn.ModuleList(nn.Linear(channels, style_dim) for _ in range(n_styles))

    @property
    def min_length(self):
        return 2 ** self.n_styles

    def forward(self, f_id):
        if f_id.dim() != 3:
            raise ValidationError(f"identity features must be (B, T, C), got {tuple(f_id.shape)}")
        if f_id.shape[1] < self.min_length:
            raise ValidationError(f"T={f_id.shape[1]} is shorter than the style stride product {self.min_length}")
        h = f_id.transpose(1, 2)
        styles = []
        for stage, proj in zip(self.stages, self.proj):
            h = stage(h)
            styles.append(proj(h.mean(dim=-1)))
        return styles


class VSSynthesizer(nn.Module):
    """Content features ``(B, T, C)`` + M styles -> log-mel ``(B, n_mels, 4T)``."""

    def __init__(self, channels=128, hidden=128, n_mels=80, style_dim=64, n_styles=3, mel_bias=-6.0):
        super().__init__()
        act = nn.LeakyReLU(0.2)
        self.encoder = nn.Sequential(
            nn.Conv1d(channels, hidden, 5, padding=2), act,
            nn.Conv1d(hidden, hidden, 5, padding=2), act)
        self.upsample = nn.Sequential(
            nn.ConvTranspose1d(hidden, hidden, 4, stride=2, padding=1), act,
            nn.ConvTranspose1d(hidden, hidden, 4, stride=2, padding=1), act)
        self.blocks = nn.ModuleList(nn.Conv1d(hidden, hidden, 5, padding=2) for _ in range(n_styles))
        self.adains = nn.ModuleList(AdaIN(hidden, style_dim) for _ in range(n_styles))
        self.act = act
        self.head = nn.Conv1d(hidden, n_mels, 1)
        nn.init.constant_(self.head.bias, mel_bias)
        self.n_styles = n_styles
        self.channels = channels

    def forward(self, f_sc, styles):
        if f_sc.dim() != 3 or f_sc.shape[-1] != self.channels:
            raise ValidationError(f"content features must be (B, T, {self.channels}), got {tuple(f_sc.shape)}")
        if len(styles) != self.n_styles:
            raise ValidationError(f"expected {self.n_styles} styles, got {len(styles)}")
        h = self.upsample(self.encoder(f_sc.transpose(1, 2)))
        for conv, site, style in zip(self.blocks, self.adains, styles):
            h = self.act(site(conv(h), style))
        return self.head(h)


class Postnet(nn.Module):
    """Five 1-D convs: log-mel ``(B, n_mels, S)`` -> log linear magnitude ``(B, n_freq, S)``."""

    def __init__(self, n_mels=80, n_freq=257, hidden=256, kernel=5):
        super().__init__()
        dims = [n_mels, hidden, hidden, hidden, hidden, n_freq]
        layers = []
        for i in range(5):
            layers.append(nn.Conv1d(dims[i], dims[i + 1], kernel, padding=kernel // 2))
            if i < 4:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)
        self.n_mels = n_mels
        self.register_buffer("trained", torch.tensor(False))

    def forward(self, mel):
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ValidationError(f"postnet input must be (B, {self.n_mels}, S), got {tuple(mel.shape)}")
        return self.net(mel)

    def mark_trained(self):
        self.trained.fill_(True)


def postnet_linear(postnet: Postnet, mel) -> np.ndarray:
    """Linear magnitude ``(n_freq, S)`` for one mel ``(n_mels, S)``."""
    mel_t = torch.as_tensor(np.asarray(mel), dtype=torch.float32)
    if mel_t.dim() != 2:
        raise ValidationError(f"mel must be (n_mels, S), got {tuple(mel_t.shape)}")
    with torch.no_grad():
        log_lin = postnet(mel_t.unsqueeze(0))[0]
    return torch.exp(log_lin).double().numpy()


def vocode(postnet: Postnet, mel, params=dsp.SpectralParams(), n_iters=60, seed=0) -> np.ndarray:
    """Mel -> postnet -> exp -> Griffin-Lim waveform (float, length ``S * hop``)."""
    if not bool(postnet.trained):
        raise PreconditionError("postnet has not been trained; vocoding would produce noise")
    return dsp.griffin_lim(postnet_linear(postnet, mel), params, n_iters=n_iters, seed=seed)

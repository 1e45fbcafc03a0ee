"""Losses and auxiliary networks: identity classifiers, discriminator, GRL, total loss."""
import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError

PROB_CLAMP = 1e-7


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grl(x, lambd=1.0):
    """Identity forward, gradient multiplied by ``-lambd`` backward."""
    return GradReverse.apply(x, lambd)


class VisualIdClassifier(nn.Module):
    """Style vector -> logits over training subjects."""

    def __init__(self, style_dim, n_subjects, hidden=128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(style_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, n_subjects))

    def forward(self, style):
        return self.net(style)


class AudioIdClassifier(nn.Module):
    """Log-mel ``(B, n_mels, S)`` -> subject logits.

    Strided 2-D convs shrink frequency, a global average over time follows;
    frequency position is kept because pitch lives there.
    """

    def __init__(self, n_subjects, n_mels=80, width=32):
        super().__init__()
        act = nn.LeakyReLU(0.2)
        self.convs = nn.Sequential(
            nn.Conv2d(1, width // 2, 3, padding=1), act,
            nn.Conv2d(width // 2, width, 3, stride=(2, 1), padding=1), act,
            nn.Conv2d(width, width, 3, stride=(2, 1), padding=1), act)
        n_freq = n_mels
        for _ in range(2):
            n_freq = (n_freq + 1) // 2
        self.out = nn.Linear(width * n_freq, n_subjects)
        self.n_mels = n_mels
        self.width = width

    def forward(self, mel):
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ValidationError(f"audio classifier expects (B, {self.n_mels}, S), got {tuple(mel.shape)}")
        # log-mel sits in [-11.5, ~2]; recentre for the conv stack
        h = self.convs(((mel + 5.0) / 4.0).unsqueeze(1))
        return self.out(h.mean(dim=-1).flatten(1))


class Discriminator(nn.Module):
    """Shared trunk over the mel with an unconditional head and an ``s^M``-conditioned head.

    Both heads end in a sigmoid; the forward returns ``(p_uncond, p_cond)``.
    """

    def __init__(self, n_mels=80, style_dim=64, hidden=128):
        super().__init__()
        act = nn.LeakyReLU(0.2)
        self.trunk = nn.Sequential(
            nn.Conv1d(n_mels, hidden, 5, padding=2), act,
            nn.Conv1d(hidden, hidden, 5, stride=2, padding=2), act)
        self.uncond = nn.Conv1d(hidden, 1, 3, padding=1)
        self.cond = nn.Sequential(
            nn.Conv1d(hidden + style_dim, hidden, 3, padding=1), act,
            nn.Conv1d(hidden, 1, 3, padding=1))

    def forward(self, mel, style):
        h = self.trunk((mel + 5.0) / 4.0)
        s = style.unsqueeze(-1).expand(-1, -1, h.shape[-1])
        p_u = torch.sigmoid(self.uncond(h).mean(dim=(1, 2)))
        p_c = torch.sigmoid(self.cond(torch.cat([h, s], dim=1)).mean(dim=(1, 2)))
        return p_u, p_c


@contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _safe_log(p, name):
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    if torch.isnan(p).any():
        raise NumericError(f"discriminator output for {name} is NaN", component=name)
    return torch.log(p)


def visual_identification_loss(classifier, styles, styles_prime, content_styles, ids, ids_prime=None):
    """``(L_v_id, L_v_feat, L_v_sc, L_v)``.

    ``styles``/``styles_prime`` are the style lists of two clips of the same
    subject; ``content_styles`` is the style encoder applied to the content
    features. Classification uses the last style only; the feature loss
    averages over every style coordinate of all M styles.
    """
    if ids_prime is not None and not torch.equal(torch.as_tensor(ids), torch.as_tensor(ids_prime)):
        raise ValidationError("x and x' must come from the same subject")
    l_id = F.cross_entropy(classifier(styles[-1]), ids)
    l_feat = torch.stack([F.mse_loss(s, sp) for s, sp in zip(styles, styles_prime)]).mean()
    l_sc = F.cross_entropy(classifier(grl(content_styles[-1])), ids)
    return l_id, l_feat, l_sc, l_id + l_feat + l_sc


def audio_identification_loss(classifier, mel_self, mel_content_with_other_style,
                              mel_other_content_with_style, ids, ids_star):
    """``(L_a_self, L_a_cross, L_a)``.

    ``mel_self`` = synth(f_sc, s) -> id; ``mel_content_with_other_style`` =
    synth(f_sc, s*) -> id*; ``mel_other_content_with_style`` = synth(f_sc*, s) -> id.
    """
    ids, ids_star = torch.as_tensor(ids), torch.as_tensor(ids_star)
    if (ids == ids_star).any():
        raise ValidationError("cross-style pairs must come from different subjects")
    l_self = F.cross_entropy(classifier(mel_self), ids)
    l_cross = (F.cross_entropy(classifier(mel_content_with_other_style), ids_star)
               + F.cross_entropy(classifier(mel_other_content_with_style), ids))
    return l_self, l_cross, l_self + l_cross


def discriminator_loss(discriminator, real_mel, fake_mel, style_last):
    """L_D as a minimisation target; generator outputs are detached."""
    fake_mel, style_last = fake_mel.detach(), style_last.detach()
    real_u, real_c = discriminator(real_mel, style_last)
    fake_u, fake_c = discriminator(fake_mel, style_last)
    loss = -(_safe_log(real_u, "D(y)") + _safe_log(1 - fake_u, "1-D(f_mel)")
             + _safe_log(real_c, "D(y,s)") + _safe_log(1 - fake_c, "1-D(f_mel,s)"))
    return loss.mean()


def generator_adversarial_loss(discriminator, fake_mel, style_last):
    """L_G as a minimisation target; no gradient reaches the discriminator's parameters."""
    with frozen(discriminator):
        fake_u, fake_c = discriminator(fake_mel, style_last)
    return -(_safe_log(fake_u, "D(f_mel)") + _safe_log(fake_c, "D(f_mel,s)")).mean()


def adversarial_losses(discriminator, real_mel, fake_mel, style_last):
    """``(L_G, L_D)`` evaluated against the same discriminator state."""
    return (generator_adversarial_loss(discriminator, fake_mel, style_last),
            discriminator_loss(discriminator, real_mel, fake_mel, style_last))


def reconstruction_loss(target, estimate):
    """Mean squared error plus mean absolute error."""
    if target.shape != estimate.shape:
        raise ValidationError(f"shape mismatch {tuple(target.shape)} vs {tuple(estimate.shape)}")
    return F.mse_loss(estimate, target) + F.l1_loss(estimate, target)


@dataclass
class LossWeights:
    alpha1: float = 1.0     # visual identification
    alpha2: float = 1.0     # audio identification
    alpha3: float = 1.0     # adversarial
    alpha4: float = 50.0    # reconstruction


def total_loss(l_v, l_a, l_g, l_recon, weights: LossWeights = LossWeights()):
    parts = {"L_v": l_v, "L_a": l_a, "L_G": l_g, "L_recon": l_recon}
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if math.isnan(v) or math.isinf(v):
            raise NumericError(f"loss component {name} is {v}", component=name)
    return (weights.alpha1 * l_v + weights.alpha2 * l_a
            + weights.alpha3 * l_g + weights.alpha4 * l_recon)

"""Learnable discrete token space and the Gumbel-softmax quantizer."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module, init_param


class Codebook(Module):
    """T x D matrix of learnable semantic centroids."""

    def __init__(self, rng, t, d):
        if t < 2:
            raise ValueError(f"codebook needs T >= 2, got {t}")
        # entries start at feature scale: near-identical centroids make every
        # assignment interchangeable, which invites early collapse onto a
        # handful of entries
        self.entries = init_param(rng, (t, d), std=0.5)

    @property
    def t(self):
        return self.entries.shape[0]

    @property
    def d(self):
        return self.entries.shape[1]


@dataclass
class QuantizerOutput:
    z: ad.Tensor       # (..., T) assignment distribution, rows sum to 1
    mixed: ad.Tensor   # (..., D) = z @ entries
    tau: float


class Quantizer(Module):
    """Soft vector quantization: linear scores over the codebook, Gumbel-softmax mix.

    Training mode adds fresh Gumbel noise from the caller's rng; eval mode is
    the noise-free softmax. The whole path is differentiable (no straight-through).
    """

    def __init__(self, rng, c, codebook):
        # small score head: large initial logits get amplified by the low
        # late-schedule temperatures and push assignments into early collapse
        self.to_logits = Linear(rng, c, codebook.t, std=0.02)
        self.codebook = codebook

    def __call__(self, x, tau, rng=None, training=True):
        if tau <= 0:
            raise ValueError(f"quantizer temperature must be positive, got {tau}")
        logits = self.to_logits(x)
        if training:
            if rng is None:
                raise ValueError("training-mode quantization needs an rng for Gumbel noise")
            u = rng.random(logits.shape)
            noise = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
            logits = ad.add(logits, Tensor(noise))
        z = ad.row_softmax(ad.scalar_mul(logits, 1.0 / tau))
        mixed = ad.matmul(z, self.codebook.entries)
        return QuantizerOutput(z=z, mixed=mixed, tau=tau)

    def token_ids(self, x):
        """Argmax codebook assignment per row (eval diagnostic, no noise)."""
        with ad.no_grad():
            logits = self.to_logits(x)
        return logits.data.argmax(axis=-1)


def temperature(step, total_steps, schedule="cosine", tau_start=1.0, tau_end=0.0625):
    """Anneal the Gumbel-softmax temperature from tau_start down to tau_end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule == "constant":
        return tau_start
    if total_steps == 0:
        return tau_end
    frac = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return tau_end + (tau_start - tau_end) * frac


def perplexity(z_batch):
    """exp(entropy) of the mean assignment distribution; 1 = collapsed, T = uniform."""
    z = z_batch.data if isinstance(z_batch, ad.Tensor) else np.asarray(z_batch)
    z = z.reshape(-1, z.shape[-1])
    if z.shape[0] == 0:
        raise ValueError("perplexity of an empty batch")
    p = z.mean(axis=0)
    p = p / p.sum()
    h = -(p * np.log(np.clip(p, 1e-12, None))).sum()
    return float(np.exp(h))

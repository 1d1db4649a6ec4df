"""Transformer encoder (student/teacher) and the shared-weight siamese decoder."""

import math

from . import autodiff as ad
from .layers import LayerNorm, Linear, Module


class SelfAttention(Module):
    def __init__(self, rng, c, heads):
        if c % heads != 0:
            raise ValueError(f"width {c} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = c // heads
        self.q = Linear(rng, c, c)
        self.k = Linear(rng, c, c)
        self.v = Linear(rng, c, c)
        self.proj = Linear(rng, c, c)

    def __call__(self, x):
        lead = x.shape[:-2]
        m, c = x.shape[-2], x.shape[-1]
        h, d = self.heads, self.head_dim

        def split(t):  # (..., M, c) -> (..., h, M, d)
            return ad.swap_axes(ad.reshape(t, (*lead, m, h, d)), -2, -3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.scalar_mul(ad.matmul(q, ad.swap_axes(k, -1, -2)), 1.0 / math.sqrt(d))
        att = ad.row_softmax(scores)
        out = ad.swap_axes(ad.matmul(att, v), -2, -3)
        return self.proj(ad.reshape(out, (*lead, m, c)))


class Block(Module):
    """Pre-norm self-attention block with a 4x GELU MLP."""

    def __init__(self, rng, c, heads):
        self.ln1 = LayerNorm(c)
        self.attn = SelfAttention(rng, c, heads)
        self.ln2 = LayerNorm(c)
        self.fc1 = Linear(rng, c, 4 * c)
        self.fc2 = Linear(rng, 4 * c, c)

    def __call__(self, x):
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))


class EncoderStack(Module):
    """Stack of self-attention blocks; any hidden layer's output can be collected."""

    def __init__(self, rng, c, heads, depth):
        self.c = c
        self.blocks = [Block(rng, c, heads) for _ in range(depth)]
        self.ln_final = LayerNorm(c)

    @property
    def depth(self):
        return len(self.blocks)

    def __call__(self, tokens, pos, collect_layers=()):
        """Returns {layer_id: hidden state}; the final layer is always included.

        Positions are added once at the input. Layer id i is the output of
        block i (0-based); the final layer's entry is post-norm.
        """
        for lid in collect_layers:
            if not 0 <= lid < self.depth:
                raise ValueError(f"invalid layer id {lid} for depth {self.depth}")
        wanted = set(collect_layers) | {self.depth - 1}
        x = ad.add(tokens, pos)
        out = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in wanted:
                out[i] = x
        out[self.depth - 1] = self.ln_final(x)
        return out

    def final(self, tokens, pos):
        return self(tokens, pos)[self.depth - 1]


class SiameseDecoder(Module):
    """One 4-block parameter set serving both decoding roles.

    Positional embeddings are re-added at every block input, so masked slots
    keep their location identity throughout decoding.
    """

    def __init__(self, rng, c, heads, depth=4):
        self.blocks = [Block(rng, c, heads) for _ in range(depth)]
        self.ln_final = LayerNorm(c)

    def __call__(self, tokens, pos):
        x = tokens
        for block in self.blocks:
            x = block(ad.add(x, pos))
        return self.ln_final(x)

"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

import math

import numpy as np

from .autodiff import ShapeError


def lr_at(step, base_lr, total_steps, warmup=0, schedule="cosine"):
    """Learning rate for a 0-based step. Warmup is linear, then cosine to 0."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant" or total_steps <= warmup:
        return base_lr
    progress = (step - warmup) / max(1, total_steps - warmup)
    progress = min(1.0, progress)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05, total_steps=0, warmup=0, schedule="cosine"):
        self.params = dict(params)  # name -> Tensor
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.warmup = warmup
        self.schedule = schedule
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        lr = lr_at(t - 1, self.lr, self.total_steps, self.warmup, self.schedule)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"optimizer: grad shape {list(g.shape)} != param shape "
                    f"{list(p.data.shape)} for '{name}'")
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def state_arrays(self):
        """Flat name -> array view of optimizer state, for checkpointing."""
        out = {"opt.step": np.array([float(self.step_count)], dtype=np.float32)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["opt.step"][0])
        for k in self.params:
            self.m[k] = arrays[f"opt.m.{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = arrays[f"opt.v.{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape)

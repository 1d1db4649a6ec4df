"""The pretext task: masking, student/teacher passes, both losses, EMA, train loop."""

import copy
import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EncoderStack, SiameseDecoder
from .codebook import Codebook, Quantizer, perplexity, temperature
from .config import ModelConfig, PretrainConfig
from .data import augment
from .geometry import chamfer_batch, group
from .layers import Linear, Module, init_param
from .optim import AdamW
from .rng import make_rng
from .tokenizer import MiniPointNet, PosEmbed

METRICS_HEADER = ["step", "l_align", "l_rec", "l_total", "lambda", "tau", "perplexity"]


# ------------------------------------------------------------------- masking


@dataclass
class MaskSpec:
    masked: np.ndarray  # (G,) bool
    ratio: float
    kind: str

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        g = len(self.masked)
        want = round(self.ratio * g)
        have = int(self.masked.sum())
        if have != want:
            raise ValueError(f"mask count {have} != round(ratio*G) = {want}")
        if have == 0 or have == g:
            raise ValueError("mask must leave at least one visible and one masked patch")

    @property
    def masked_idx(self):
        return np.nonzero(self.masked)[0]

    @property
    def visible_idx(self):
        return np.nonzero(~self.masked)[0]


def _mask_count(g, ratio):
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    count = round(ratio * g)
    if count < 1 or count >= g:
        raise ValueError(f"degenerate mask: {count} of {g} patches")
    return count


def mask_random(g, ratio, rng):
    count = _mask_count(g, ratio)
    masked = np.zeros(g, dtype=bool)
    masked[rng.choice(g, size=count, replace=False)] = True
    return MaskSpec(masked=masked, ratio=ratio, kind="random")


def mask_block(centers, ratio, rng):
    """Mask a random seed patch plus its nearest neighbors (by center distance)."""
    centers = np.asarray(centers, dtype=np.float64)
    g = len(centers)
    count = _mask_count(g, ratio)
    seed = int(rng.integers(g))
    d = ((centers - centers[seed]) ** 2).sum(-1)
    order = np.argsort(d, kind="stable")
    masked = np.zeros(g, dtype=bool)
    masked[order[:count]] = True
    return MaskSpec(masked=masked, ratio=ratio, kind="block")


def make_mask(kind, g, ratio, rng, centers=None):
    if kind == "random":
        return mask_random(g, ratio, rng)
    if kind == "block":
        return mask_block(centers, ratio, rng)
    raise ValueError(f"unknown mask kind '{kind}'")


# --------------------------------------------------------------------- model


class PretrainModel(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.tokenizer = MiniPointNet(rng, cfg.c)
        self.pos_embed = PosEmbed(rng, cfg.c)
        self.encoder = EncoderStack(rng, cfg.c, cfg.heads, cfg.enc_depth)
        self.decoder = SiameseDecoder(rng, cfg.c, cfg.heads, cfg.dec_depth)
        if not cfg.siamese:
            self.point_decoder = SiameseDecoder(rng, cfg.c, cfg.heads, cfg.dec_depth)
        self.mask_token = init_param(rng, (cfg.c,), std=0.02)
        self.codebook = Codebook(rng, cfg.t, cfg.c)
        self.quantizer = Quantizer(rng, cfg.c, self.codebook)
        self.point_head = Linear(rng, cfg.c, cfg.s * 3)

    def point_branch_decoder(self):
        return self.decoder if self.cfg.siamese else self.point_decoder

    def embed(self, groups, centers):
        """Raw patches -> (tokens, pos), both (..., G, c)."""
        tokens = self.tokenizer(Tensor(groups))
        pos = self.pos_embed(Tensor(centers))
        return tokens, pos


# ----------------------------------------------------------------- EMA teacher


@dataclass
class EmaState:
    encoder: EncoderStack   # frozen copy; params never require grad
    lam_start: float = 0.996
    lam_end: float = 1.0

    def params(self):
        return {k: p.data for k, p in self.encoder.named_tensors().items()}


def init_teacher(model, lam_start=0.996, lam_end=1.0):
    enc = copy.deepcopy(model.encoder)
    for p in enc.named_tensors().values():
        p.requires_grad = False
        p.data = p.data.copy()
    return EmaState(encoder=enc, lam_start=lam_start, lam_end=lam_end)


def lam_at(state, step, total_steps):
    if total_steps <= 1:
        return state.lam_end
    f = min(1.0, step / (total_steps - 1))
    return state.lam_start + (state.lam_end - state.lam_start) * f


def ema_update(state, student_params, lam):
    """teacher <- lam * teacher + (1 - lam) * student, parameter by parameter."""
    teacher = state.encoder.named_tensors()
    if set(teacher) != set(student_params):
        raise ValueError("EMA update: teacher/student parameter sets differ")
    for name, tp in teacher.items():
        sp = student_params[name]
        if tp.data.shape != sp.data.shape:
            raise ValueError(f"EMA update: shape mismatch for '{name}'")
        tp.data *= lam
        tp.data += (1.0 - lam) * sp.data
    return state


# ------------------------------------------------------------------ forwards


def forward_targets(tokens, pos, mask, teacher):
    """Teacher encodes ALL patches; returns layer-normed targets at masked rows.

    Output is a constant (no gradient is recorded).
    """
    with ad.no_grad():
        tok = Tensor(tokens.data) if isinstance(tokens, Tensor) else Tensor(tokens)
        ps = Tensor(pos.data) if isinstance(pos, Tensor) else Tensor(pos)
        h = teacher.encoder.final(tok, ps)
        y = ad.layer_norm(h)
        y = ad.take(y, mask.masked_idx, axis=-2)
    return Tensor(y.data)


def _scatter_by_position(vis_part, masked_part, mask):
    """Reassemble a full-length sequence from visible and masked pieces."""
    perm = np.concatenate([mask.visible_idx, mask.masked_idx])
    inv = np.argsort(perm)
    return ad.take(ad.concat([vis_part, masked_part], axis=-2), inv, axis=-2)


def forward_student(model, tokens, pos, mask):
    """Student encodes visible patches only; the decoder fills masked slots.

    Returns (x, enc_vis): decoder outputs at masked positions and the encoded
    visible tokens (reused by the point branch).
    """
    vis, msk = mask.visible_idx, mask.masked_idx
    enc_vis = model.encoder.final(ad.take(tokens, vis, axis=-2), ad.take(pos, vis, axis=-2))
    lead = tokens.shape[:-2]
    mask_tokens = ad.add(ad.reshape(model.mask_token, (1,) * (len(lead) + 1) + (-1,)),
                         Tensor(np.zeros((*lead, len(msk), model.cfg.c))))
    seq = _scatter_by_position(enc_vis, mask_tokens, mask)
    dec = model.decoder(seq, pos)
    return ad.take(dec, msk, axis=-2), enc_vis


def align_loss(x, y, beta=1.0):
    return ad.smooth_l1(x, y, beta)


def point_loss(model, x, enc_vis, pos, mask, groups, tau, rng=None, training=True):
    """Quantize masked representations, decode with visible context, Chamfer vs truth."""
    qout = model.quantizer(x, tau, rng=rng, training=training)
    seq = _scatter_by_position(enc_vis, qout.mixed, mask)
    f = model.point_branch_decoder()(seq, pos)
    f_m = ad.take(f, mask.masked_idx, axis=-2)
    pred = model.point_head(f_m)
    s = model.cfg.s
    flat = (-1, s, 3)
    pred_pts = ad.reshape(pred, flat)
    target = np.asarray(groups)[..., mask.masked_idx, :, :].reshape(flat)
    loss = chamfer_batch(pred_pts, Tensor(target))
    return loss, qout


# ----------------------------------------------------------------- training


def train_step(model, teacher, opt, batch, step, mcfg, pcfg, seed):
    """One optimization step; returns the metrics record for the CSV stream."""
    groups, centers = batch["groups"], batch["centers"]
    tokens, pos = model.embed(groups, centers)
    mask_rng = make_rng(seed, 2, step)
    # one mask per step, shared across the batch (keeps every tensor dense);
    # block masking uses the first cloud's center geometry
    ref_centers = centers[0] if centers.ndim == 3 else centers
    mask = make_mask(pcfg.mask_kind, mcfg.g, pcfg.mask_ratio, mask_rng, centers=ref_centers)
    y = forward_targets(tokens, pos, mask, teacher)
    x, enc_vis = forward_student(model, tokens, pos, mask)
    l_align = align_loss(x, y, pcfg.beta)
    tau = temperature(step, pcfg.steps, pcfg.tau_schedule, pcfg.tau_start, pcfg.tau_end)
    l_rec, qout = point_loss(model, x, enc_vis, pos, mask, groups, tau,
                             rng=make_rng(seed, 3, step), training=True)
    l_total = ad.add(l_align, ad.scalar_mul(l_rec, pcfg.eta))
    if not np.isfinite(l_total.data):
        raise FloatingPointError(
            f"non-finite loss at step {step}: align={l_align.item()}, rec={l_rec.item()}")
    ad.backward(l_total)
    opt.step()
    opt.zero_grad()
    lam = lam_at(teacher, step, pcfg.steps)
    ema_update(teacher, model.encoder.params(), lam)
    return {
        "step": step,
        "l_align": l_align.item(),
        "l_rec": l_rec.item(),
        "l_total": l_total.item(),
        "lambda": lam,
        "tau": tau,
        "perplexity": perplexity(qout.z),
    }


def assemble_batch(dataset, batch_size, mcfg, rng):
    """Sample clouds, augment, group; returns dense (B,G,S,3) + (B,G,3) arrays."""
    picks = rng.integers(len(dataset.items), size=batch_size)
    all_groups, all_centers = [], []
    for i in picks:
        cloud = augment(dataset.items[int(i)][0], rng, out_points=mcfg.n_points)
        ps = group(cloud, mcfg.g, mcfg.s, start=int(rng.integers(cloud.n)))
        all_groups.append(ps.groups)
        all_centers.append(ps.centers)
    return {"groups": np.stack(all_groups), "centers": np.stack(all_centers)}


def pretrain_loop(dataset, mcfg: ModelConfig, pcfg: PretrainConfig, seed=0,
                  metrics_path=None, log_every=0):
    """Full pretraining run. Returns (model, teacher, optimizer, metrics list)."""
    model = PretrainModel(make_rng(seed, 0), mcfg)
    teacher = init_teacher(model, pcfg.lam_start, pcfg.lam_end)
    opt = AdamW(model.params(), lr=pcfg.lr, weight_decay=pcfg.weight_decay,
                total_steps=pcfg.steps, warmup=pcfg.warmup)
    metrics = []
    writer = fh = None
    if metrics_path:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
    try:
        for step in range(pcfg.steps):
            batch = assemble_batch(dataset, pcfg.batch_size, mcfg, make_rng(seed, 1, step))
            rec = train_step(model, teacher, opt, batch, step, mcfg, pcfg, seed)
            metrics.append(rec)
            if writer:
                writer.writerow(rec)
            if log_every and step % log_every == 0:
                print(f"step {step}: l_total={rec['l_total']:.4f} "
                      f"l_align={rec['l_align']:.4f} l_rec={rec['l_rec']:.4f} "
                      f"ppl={rec['perplexity']:.1f}")
    finally:
        if fh:
            fh.close()
    return model, teacher, opt, metrics

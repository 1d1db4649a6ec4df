"""Downstream adaptation: hybrid token aggregation over the codebook and heads."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EncoderStack
from .codebook import Codebook
from .config import FinetuneConfig, ModelConfig
from .data import Dataset, augment
from .geometry import PointCloud, group
from .layers import Linear, Module, init_param
from .optim import AdamW
from .rng import make_rng
from .tokenizer import MiniPointNet, PosEmbed


def netvlad(x, entries, w, b):
    """Soft-assignment residual statistic of tokens against codebook centroids.

    x: (..., N, c) tokens, entries: (T, D) with D == c, w: (T, c), b: (T,).
    Returns V: (..., T, D) where V_t = sum_j alpha_t(x_j) (x_j - C_t) and
    alpha is the row-softmax of the affine centroid scores.
    """
    if entries.shape[-1] != x.shape[-1]:
        raise ad.ShapeError(
            f"netvlad: token width {x.shape[-1]} != centroid width {entries.shape[-1]}")
    scores = ad.add(ad.matmul(x, ad.swap_axes(w, -1, -2)), b)   # (..., N, T)
    alpha = ad.row_softmax(scores)
    weighted = ad.matmul(ad.swap_axes(alpha, -1, -2), x)        # (..., T, c)
    mass = ad.reshape(ad.sum_reduce(alpha, axis=-2), (*x.shape[:-2], w.shape[0], 1))
    return ad.sub(weighted, ad.mul(mass, entries))


def hta(x_layers, entries, w, b):
    """Hybrid token aggregation: concat(avg-pool, max-pool, centroid statistic).

    Multiple selected hidden layers are averaged token-wise before aggregation.
    Output width is c + c + D.
    """
    if not x_layers:
        raise ValueError("hta needs at least one hidden-layer token set")
    x = x_layers[0]
    for extra in x_layers[1:]:
        x = ad.add(x, extra)
    if len(x_layers) > 1:
        x = ad.scalar_mul(x, 1.0 / len(x_layers))
    if x.shape[-2] < 1:
        raise ad.ShapeError("hta: empty token set")
    avg = ad.mean_reduce(x, axis=-2)
    mx = ad.max_reduce(x, axis=-2)
    v = netvlad(x, entries, w, b)
    stat = ad.mean_reduce(v, axis=-2)
    return ad.concat([avg, mx, stat], axis=-1)


def cross_entropy(logits, labels):
    logp = ad.log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logp.data.dtype)
    onehot[np.arange(len(labels)), np.asarray(labels)] = 1.0
    picked = ad.sum_reduce(ad.mul(logp, Tensor(onehot)))
    return ad.scalar_mul(picked, -1.0 / len(labels))


class ClassifierHead(Module):
    """3-layer MLP with dropout on the hidden activations."""

    def __init__(self, rng, d_in, hidden, n_classes, dropout=0.2):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.fc3 = Linear(rng, hidden, n_classes)
        self.dropout = dropout

    def __call__(self, x, rng=None, training=False):
        rate = self.dropout if training else 0.0
        x = ad.gelu(self.fc1(x))
        x = ad.dropout(x, rate, rng) if rate else x
        x = ad.gelu(self.fc2(x))
        x = ad.dropout(x, rate, rng) if rate else x
        return self.fc3(x)


class FinetuneModel(Module):
    def __init__(self, rng, mcfg: ModelConfig, n_classes, hidden=256, dropout=0.2):
        self.cfg = mcfg
        self.tokenizer = MiniPointNet(rng, mcfg.c)
        self.pos_embed = PosEmbed(rng, mcfg.c)
        self.encoder = EncoderStack(rng, mcfg.c, mcfg.heads, mcfg.enc_depth)
        self.codebook = Codebook(rng, mcfg.t, mcfg.c)
        self.vlad_w = init_param(rng, (mcfg.t, mcfg.c), std=0.02)
        self.vlad_b = init_param(rng, (mcfg.t,), std=0.0)
        self.head = ClassifierHead(rng, 3 * mcfg.c, hidden, n_classes, dropout)

    def resolve_layers(self, layers):
        return sorted({l % self.encoder.depth for l in layers})

    def forward(self, groups, centers, layers=(-1,), rng=None, training=False):
        tokens = self.tokenizer(Tensor(groups))
        pos = self.pos_embed(Tensor(centers))
        lids = self.resolve_layers(layers)
        hidden = self.encoder(tokens, pos, collect_layers=lids)
        x_layers = [hidden[l] for l in lids]
        o = hta(x_layers, self.codebook.entries, self.vlad_w, self.vlad_b)
        return self.head(o, rng=rng, training=training)


def load_pretrained(model, pretrain_model_or_arrays):
    """Copy shared-module weights (tokenizer, pos embed, encoder, codebook)."""
    src = pretrain_model_or_arrays
    arrays = src if isinstance(src, dict) else {k: p.data for k, p in src.params().items()}
    shared = {k: v for k, v in arrays.items()
              if k.split(".")[0] in ("tokenizer", "pos_embed", "encoder", "codebook")}
    model.load_params(shared)
    return model


# ------------------------------------------------------------------ training


def _cloud_batch(clouds, mcfg, rng, train=True):
    all_groups, all_centers = [], []
    for i, cloud in enumerate(clouds):
        if train:
            cloud = augment(cloud, rng, out_points=mcfg.n_points)
            start = int(rng.integers(cloud.n))
        else:
            if cloud.n != mcfg.n_points:
                idx = make_rng(7, i).choice(cloud.n, size=mcfg.n_points,
                                            replace=cloud.n < mcfg.n_points)
                cloud = PointCloud(points=cloud.points[idx], label=cloud.label)
            start = 0
        ps = group(cloud, mcfg.g, mcfg.s, start=start)
        all_groups.append(ps.groups)
        all_centers.append(ps.centers)
    return np.stack(all_groups), np.stack(all_centers)


def finetune_step(model, opt, clouds, labels, mcfg, fcfg, rng):
    """One supervised step; returns (loss, train accuracy) on the batch."""
    if model.head.fc3.b.shape[0] <= max(labels):
        raise ValueError(f"label {max(labels)} out of range for classifier head")
    groups, centers = _cloud_batch(clouds, mcfg, rng, train=True)
    logits = model.forward(groups, centers, layers=fcfg.layers, rng=rng, training=True)
    loss = cross_entropy(logits, labels)
    acc = float((logits.data.argmax(axis=-1) == np.asarray(labels)).mean())
    ad.backward(loss)
    opt.step()
    opt.zero_grad()
    return loss.item(), acc


def evaluate(model, dataset, mcfg, fcfg, batch=32):
    """Test accuracy over a dataset, deterministic grouping, no augmentation."""
    correct = total = 0
    with ad.no_grad():
        for lo in range(0, len(dataset.items), batch):
            chunk = dataset.items[lo:lo + batch]
            clouds = [c for c, _ in chunk]
            labels = np.array([l for _, l in chunk])
            groups, centers = _cloud_batch(clouds, mcfg, None, train=False)
            logits = model.forward(groups, centers, layers=fcfg.layers, training=False)
            correct += int((logits.data.argmax(axis=-1) == labels).sum())
            total += len(labels)
    return correct / total


def trainable_params(model, fcfg):
    params = model.params()
    if fcfg.freeze_codebook:
        model.codebook.entries.requires_grad = False
        params.pop("codebook.entries", None)
    return params


def finetune_loop(train_ds, test_ds, mcfg, fcfg, seed=0, init_arrays=None,
                  n_classes=None, metrics_path=None, log_every=0):
    """Supervised fine-tuning; returns (model, history, final test accuracy)."""
    n_classes = n_classes or len(train_ds.class_names)
    model = FinetuneModel(make_rng(seed, 10), mcfg, n_classes,
                          hidden=fcfg.hidden, dropout=fcfg.dropout)
    if init_arrays is not None:
        load_pretrained(model, init_arrays)
    opt = AdamW(trainable_params(model, fcfg), lr=fcfg.lr,
                weight_decay=fcfg.weight_decay, total_steps=fcfg.steps,
                warmup=fcfg.warmup)
    history = []
    all_idx = np.arange(len(train_ds.items))
    for step in range(fcfg.steps):
        rng = make_rng(seed, 11, step)
        picks = rng.choice(all_idx, size=min(fcfg.batch_size, len(all_idx)),
                           replace=len(all_idx) < fcfg.batch_size)
        clouds = [train_ds.items[int(i)][0] for i in picks]
        labels = [train_ds.items[int(i)][1] for i in picks]
        loss, acc = finetune_step(model, opt, clouds, labels, mcfg, fcfg, rng)
        history.append({"step": step, "loss": loss, "train_acc": acc})
        if log_every and step % log_every == 0:
            print(f"step {step}: loss={loss:.4f} train_acc={acc:.3f}")
    test_acc = evaluate(model, test_ds, mcfg, fcfg) if test_ds else None
    if metrics_path:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "loss", "train_acc"])
            writer.writeheader()
            writer.writerows(history)
    return model, history, test_acc


# ------------------------------------------------------------------ few-shot


@dataclass
class FewShotEpisode:
    way: int
    shot: int
    support: Dataset
    query: Dataset


def sample_episode(dataset, way, shot, query, rng):
    """K-way N-shot episode: N support + `query` query samples per class, disjoint."""
    buckets = dataset.by_class()
    eligible = [c for c, idxs in buckets.items() if len(idxs) >= shot + query]
    if len(eligible) < way:
        raise ValueError(
            f"few-shot needs {way} classes with >= {shot + query} samples, "
            f"have {len(eligible)}")
    classes = rng.choice(eligible, size=way, replace=False)
    sup_items, qry_items = [], []
    names = []
    for new_label, cls in enumerate(classes):
        names.append(dataset.class_names[int(cls)])
        chosen = rng.choice(buckets[int(cls)], size=shot + query, replace=False)
        for i in chosen[:shot]:
            sup_items.append((dataset.items[int(i)][0], new_label))
        for i in chosen[shot:]:
            qry_items.append((dataset.items[int(i)][0], new_label))
    return FewShotEpisode(
        way=way, shot=shot,
        support=Dataset(items=sup_items, class_names=names, split="support"),
        query=Dataset(items=qry_items, class_names=names, split="query"))


def few_shot(dataset, way, shot, runs, mcfg, fcfg, seed=0, query=20, init_arrays=None):
    """Episodic evaluation; returns (records, mean, std) over independent runs."""
    records = []
    for run in range(runs):
        ep_seed = seed + run
        episode = sample_episode(dataset, way, shot, query, make_rng(ep_seed, 20))
        _, _, acc = finetune_loop(episode.support, episode.query, mcfg, fcfg,
                                  seed=ep_seed, init_arrays=init_arrays,
                                  n_classes=way)
        records.append({"run": run, "seed": ep_seed, "accuracy": acc})
    accs = np.array([r["accuracy"] for r in records])
    return records, float(accs.mean()), float(accs.std())

"""Point-cloud structures, FPS + k-NN patch construction, and the Chamfer loss."""

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, _record, as_tensor


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ShapeError(f"point cloud must be (N>=1, 3), got {list(self.points.shape)}")
        if not np.all(np.isfinite(self.points)):
            raise FloatingPointError("point cloud contains non-finite coordinates")

    @property
    def n(self):
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray         # (G, 3)
    groups: np.ndarray          # (G, S, 3) center-relative
    source_indices: np.ndarray  # (G, S), row j starts with the center index


def _sqdists(a, b):
    # (M, N) squared euclidean distances
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def fps(cloud, g, start=0):
    """Farthest point sampling: greedy max-min selection of g indices."""
    pts = cloud.points
    n = len(pts)
    if not 1 <= g <= n:
        raise ValueError(f"fps: need 1 <= G <= N, got G={g}, N={n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start index {start} out of range for N={n}")
    chosen = [start]
    dmin = ((pts - pts[start]) ** 2).sum(-1)
    for _ in range(g - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((pts - pts[nxt]) ** 2).sum(-1))
    return np.asarray(chosen, dtype=np.int64)


def knn(query, cloud, k):
    """Per query row, the k nearest cloud indices sorted by distance, ties to lower index."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if k > cloud.n:
        raise ValueError(f"knn: k={k} exceeds cloud size {cloud.n}")
    d = _sqdists(query, cloud.points)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def group(cloud, g, s, start=0):
    """FPS centers + (s-1)-NN groups in center-relative coordinates."""
    if s > cloud.n:
        raise ValueError(f"group: S={s} exceeds cloud size {cloud.n}")
    center_idx = fps(cloud, g, start)
    centers = cloud.points[center_idx]
    idx = knn(centers, cloud, s)
    # a duplicate point can tie at distance 0; keep the center in slot 0
    for i, ci in enumerate(center_idx):
        if idx[i, 0] != ci:
            where = np.nonzero(idx[i] == ci)[0]
            j = int(where[0]) if len(where) else 0
            idx[i, j] = idx[i, 0]
            idx[i, 0] = ci
    groups = cloud.points[idx] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups, source_indices=idx)


def chamfer(pred, target):
    """Symmetric Chamfer loss between two point sets (M,3) and (M',3).

    Mean over each set of the squared distance to its nearest point in the
    other set; differentiable w.r.t. both sides.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.ndim != 2 or pred.shape[-1] != 3 or pred.shape[0] < 1:
        raise ShapeError(f"chamfer: pred must be (M>=1, 3), got {list(pred.shape)}")
    if target.ndim != 2 or target.shape[-1] != 3 or target.shape[0] < 1:
        raise ShapeError(f"chamfer: target must be (M'>=1, 3), got {list(target.shape)}")
    p, q = pred.data, target.data
    d = _sqdists(p, q)
    jstar = d.argmin(axis=1)  # nearest target per pred
    istar = d.argmin(axis=0)  # nearest pred per target
    m, mp = len(p), len(q)
    out = Tensor(d[np.arange(m), jstar].mean() + d[istar, np.arange(mp)].mean())

    def vjp(g):
        g = float(g)
        gp = (2.0 * g / m) * (p - q[jstar])
        np.add.at(gp, istar, (2.0 * g / mp) * (p[istar] - q))
        gq = (2.0 * g / mp) * (q - p[istar])
        np.add.at(gq, jstar, (2.0 * g / m) * (q[jstar] - p))
        return gp, gq

    return _record(out, (pred, target), vjp)


def chamfer_batch(pred, target):
    """Mean Chamfer loss over K aligned pairs: pred (K,S,3) vs target (K,S',3)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.ndim != 3 or target.ndim != 3 or pred.shape[0] != target.shape[0]:
        raise ShapeError(
            f"chamfer_batch: need (K,S,3) vs (K,S',3), got {list(pred.shape)} vs {list(target.shape)}")
    p, q = pred.data, target.data
    k, s, sp = p.shape[0], p.shape[1], q.shape[1]
    d = ((p[:, :, None, :] - q[:, None, :, :]) ** 2).sum(-1)  # (K,S,S')
    jstar = d.argmin(axis=2)
    istar = d.argmin(axis=1)
    ar = np.arange(k)[:, None]
    fwd = d[ar, np.arange(s)[None, :], jstar].mean(axis=1)
    bwd = d[ar, istar, np.arange(sp)[None, :]].mean(axis=1)
    out = Tensor((fwd + bwd).mean())

    def vjp(g):
        g = float(g) / k
        qj = np.take_along_axis(q, jstar[:, :, None], axis=1)
        pi = np.take_along_axis(p, istar[:, :, None], axis=1)
        gp = (2.0 * g / s) * (p - qj)
        gq = (2.0 * g / sp) * (q - pi)
        for b in range(k):
            np.add.at(gp[b], istar[b], (2.0 * g / sp) * (p[b][istar[b]] - q[b]))
            np.add.at(gq[b], jstar[b], (2.0 * g / s) * (q[b][jstar[b]] - p[b]))
        return gp, gq

    return _record(out, (pred, target), vjp)

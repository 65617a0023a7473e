"""Off-the-shelf evaluation of frozen features: extraction, probes and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import grad as G
from .errors import ContractError, DegenerateInputError
from .grad import ParamSet
from .hunet import HUNetConfig, forward_full
from .scene import NUM_CLASSES, THING_CLASSES, PointCloud
from .train import AdamState, adamw_step, lr_schedule
from .views import voxel_inputs
from .voxel import build_hierarchy, trilinear_sample, voxelize

IGNORE = -1


# ----------------------------------------------------------------------------
# hierarchical features

@dataclass
class HierFeatures:
    features: np.ndarray
    levels: tuple
    widths: tuple

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.widths)]).astype(np.int64)

    def level_columns(self, level: int) -> slice:
        i = self.levels.index(level)
        off = self.offsets
        return slice(int(off[i]), int(off[i + 1]))

    def select(self, levels) -> "HierFeatures":
        levels = tuple(levels)
        cols = [self.features[:, self.level_columns(lv)] for lv in levels]
        return HierFeatures(np.concatenate(cols, axis=1), levels,
                            tuple(self.widths[self.levels.index(lv)] for lv in levels))


def extract_hier_features(params: ParamSet, config: HUNetConfig, cloud: PointCloud, voxel_size: float,
                          levels=None) -> HierFeatures:
    """Decoder features of every selected level, trilinearly sampled at each point.

    Levels are concatenated finest first.
    """
    levels = tuple(sorted(range(config.levels) if levels is None else set(levels)))
    if not levels or levels[0] < 0 or levels[-1] >= config.levels:
        raise ContractError(f"levels {levels} not within 0..{config.levels - 1}")
    grid = voxelize(cloud.positions, cloud.colors, cloud.labels, voxel_size)
    hier = build_hierarchy(grid, config.levels)
    with G.no_grad():
        outs = forward_full(params.bind(requires_grad=False), config, hier, voxel_inputs(grid))
    cols = [trilinear_sample(hier.levels[lv], outs[lv].value, cloud.positions) for lv in levels]
    return HierFeatures(np.concatenate(cols, axis=1), levels, tuple(config.dec_channels[lv] for lv in levels))


# ----------------------------------------------------------------------------
# metrics

def confusion_matrix(pred, gt, k: int, ignore: int = IGNORE) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    keep = gt != ignore
    p, g = pred[keep], gt[keep]
    if ((p < 0) | (p >= k)).any() or (g >= k).any() or (g < 0).any():
        raise ContractError("labels outside 0..K-1")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def miou(pred, gt, k: int = NUM_CLASSES, ignore: int = IGNORE) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan for classes absent from both) and their mean."""
    cm = confusion_matrix(pred, gt, k, ignore)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = denom > 0
    iou = np.full(k, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou, float(np.mean(iou[present])) if present.any() else 0.0


def average_precision(scores, is_true, num_gt: int) -> float:
    """Area under the interpolated precision/recall curve (all-point form)."""
    if num_gt == 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    hits = np.asarray(is_true, dtype=np.float64)[order]
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class InstancePrediction:
    scene: int
    points: np.ndarray
    label: int
    score: float


def map_at_50(predictions: list[InstancePrediction], gt_instances: list[list[tuple[int, np.ndarray]]],
              classes=THING_CLASSES, threshold: float = 0.5) -> tuple[float, dict]:
    """mAP at IoU >= threshold, averaged over classes that have ground truth.

    ``gt_instances[s]`` lists (class, point ids) of scene s.  Predictions of a
    class are visited by descending score; each claims the unclaimed
    same-class ground truth instance of highest IoU if it passes the
    threshold.
    """
    per_class = {}
    for c in classes:
        gts = {s: [(i, set(p.tolist())) for i, (gc, p) in enumerate(inst) if gc == c]
               for s, inst in enumerate(gt_instances)}
        num_gt = sum(len(v) for v in gts.values())
        if num_gt == 0:
            continue
        preds = sorted([p for p in predictions if p.label == c], key=lambda p: -p.score)
        claimed = set()
        hits = []
        for p in preds:
            pset = set(p.points.tolist())
            best, best_iou = None, threshold
            for i, g in gts.get(p.scene, []):
                if (p.scene, i) in claimed:
                    continue
                inter = len(pset & g)
                iou = inter / (len(pset) + len(g) - inter)
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = i, iou
            if best is not None:
                claimed.add((p.scene, best))
            hits.append(best is not None)
        per_class[c] = average_precision([p.score for p in preds], hits, num_gt)
    vals = list(per_class.values())
    return (float(np.mean(vals)) if vals else 0.0), per_class


# ----------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeConfig:
    epochs: int = 40
    lr: float = 0.01
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    warmup_epochs: int = 2
    batch_points: int = 4096
    max_train_points: int = 60000
    standardize: bool = True
    seed: int = 0
    num_classes: int = NUM_CLASSES


@dataclass
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(feats), axis=1)


def _standardizer(x: np.ndarray, on: bool):
    if not on:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def cross_entropy(logits, onehot):
    return G.reduce_mean(G.reduce_sum(G.mul(G.log_softmax(logits, axis=1), -onehot), axis=1))


def _subsample(n: int, limit: int, rng) -> np.ndarray:
    return np.arange(n) if n <= limit else np.sort(rng.choice(n, size=limit, replace=False))


def _train_steps(n: int, cfg: ProbeConfig):
    per_epoch = max(1, math.ceil(n / cfg.batch_points))
    return per_epoch, per_epoch * cfg.epochs, per_epoch * cfg.warmup_epochs


def linear_probe(train_x, train_y, val_x, val_y, cfg: ProbeConfig | None = None) -> tuple[LinearHead, float]:
    """Affine softmax classifier on frozen features; returns the best-epoch head and val mIoU."""
    cfg = cfg or ProbeConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if train_x.shape[1] != val_x.shape[1]:
        raise ContractError("train and val feature widths differ")
    rng = np.random.default_rng(cfg.seed)
    labeled = np.flatnonzero(train_y != IGNORE)
    if labeled.size == 0:
        raise DegenerateInputError("no labeled training points")
    labeled = labeled[_subsample(labeled.size, cfg.max_train_points, rng)]
    x, y = train_x[labeled], train_y[labeled]
    mean, scale = _standardizer(x, cfg.standardize)
    x = (x - mean) / scale
    k = cfg.num_classes
    onehot = np.eye(k)[y]
    params = ParamSet({"w": np.zeros((x.shape[1], k)), "b": np.zeros(k)})
    adam = AdamState.zeros_like(params)
    per_epoch, total, warm = _train_steps(len(y), cfg)
    best = (-1.0, None)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(y))
        for b in range(per_epoch):
            idx = perm[b * cfg.batch_points:(b + 1) * cfg.batch_points]
            step += 1
            params.zero_grad()
            P = params.bind()
            loss = cross_entropy(G.add(G.matmul(x[idx], P["w"]), P["b"]), onehot[idx])
            G.backward(loss, params)
            adamw_step(params, params.grads, adam, lr_schedule(step, warm, total, cfg.lr),
                       cfg.betas, cfg.weight_decay)
        head = LinearHead(params["w"].copy(), params["b"].copy(), mean, scale)
        score = miou(head.predict(val_x), val_y, k)[1]
        if score > best[0]:
            best = (score, head)
    return best[1], best[0]


# ----------------------------------------------------------------------------
# nearest-neighbor probe

def build_superpoints(cloud: PointCloud, cell: float = 0.25) -> np.ndarray:
    """Dense ids of (grid cell, instance id) groups, ordered by (cell key, instance).

    The grid is anchored at the cloud's minimum corner, so a cell at least as
    large as the scene holds every point.
    """
    keys = np.floor((cloud.positions - cloud.positions.min(axis=0)) / cell).astype(np.int64)
    table = np.concatenate([keys, cloud.instance_ids[:, None]], axis=1)
    _, ids = np.unique(table, axis=0, return_inverse=True)
    return ids.reshape(-1).astype(np.int64)


def superpoint_means(features, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    n = int(ids.max()) + 1
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    out = np.zeros((n, features.shape[1]))
    np.add.at(out, ids, features)
    return out / counts[:, None]


def majority_label(labels, ids, n: int) -> np.ndarray:
    """Majority valid label per group, ties to the smallest class, -1 if none."""
    labels = np.asarray(labels, dtype=np.int64)
    ok = labels != IGNORE
    out = np.full(n, IGNORE, dtype=np.int64)
    if not ok.any():
        return out
    k = int(labels[ok].max()) + 1
    votes = np.bincount(ids[ok] * k + labels[ok], minlength=n * k).reshape(n, k)
    has = votes.sum(axis=1) > 0
    out[has] = np.argmax(votes[has], axis=1)
    return out


_METRICS = {"L1": "cityblock", "L2": "euclidean", "cosine": "cosine"}


def nearest_neighbor(queries, keys, metric: str = "L2", chunk: int = 1024) -> np.ndarray:
    """Index of the nearest key row for every query row (first index on ties)."""
    if metric not in _METRICS:
        raise ContractError(f"unknown metric {metric!r}; expected one of {sorted(_METRICS)}")
    if len(keys) == 0:
        raise DegenerateInputError("empty key set")
    out = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        d = cdist(queries[s:s + chunk], keys, _METRICS[metric])
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


def nn_probe(train_feats: list[np.ndarray], train_labels: list[np.ndarray], train_sp: list[np.ndarray],
             val_feats: list[np.ndarray], val_sp: list[np.ndarray], metric: str = "L2",
             unit_norm: bool = False) -> list[np.ndarray]:
    """Label every val point with the majority label of its superpoint's nearest train superpoint."""
    keys, key_labels = [], []
    for f, y, sp in zip(train_feats, train_labels, train_sp):
        n = int(sp.max()) + 1
        lab = majority_label(y, sp, n)
        ok = lab != IGNORE
        keys.append(superpoint_means(f, sp)[ok])
        key_labels.append(lab[ok])
    keys = np.concatenate(keys) if keys else np.zeros((0, 1))
    key_labels = np.concatenate(key_labels) if key_labels else np.zeros(0, dtype=np.int64)
    if unit_norm:
        keys = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), 1e-12)
    out = []
    for f, sp in zip(val_feats, val_sp):
        q = superpoint_means(f, sp)
        if unit_norm:
            q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        out.append(key_labels[nearest_neighbor(q, keys, metric)][sp])
    return out


# ----------------------------------------------------------------------------
# instance probe

@dataclass
class InstanceConfig:
    epochs: int = 30
    lr: float = 0.01
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    hidden: int = 64
    batch_points: int = 4096
    max_train_points: int = 60000
    radius: float = 0.15
    min_points: int = 10
    seed: int = 0
    classes: tuple = THING_CLASSES


@dataclass
class OffsetHead:
    params: dict
    mean: np.ndarray
    scale: np.ndarray

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        x = (feats - self.mean) / self.scale
        with G.no_grad():
            return _offset_mlp({k: G.constant(v) for k, v in self.params.items()}, x).value


def _offset_mlp(P, x):
    h = G.gelu(G.add(G.matmul(x, P["w1"]), P["b1"]))
    return G.add(G.matmul(h, P["w2"]), P["b2"])


def instance_centroid_offsets(cloud: PointCloud) -> np.ndarray:
    _, inv = np.unique(cloud.instance_ids, return_inverse=True)
    inv = inv.reshape(-1)
    n = int(inv.max()) + 1
    cnt = np.bincount(inv, minlength=n).astype(np.float64)
    cent = np.stack([np.bincount(inv, weights=cloud.positions[:, a], minlength=n) for a in range(3)], 1)
    return cent[inv] / cnt[inv, None] - cloud.positions


def train_offset_head(feats, offsets, cfg: InstanceConfig) -> OffsetHead:
    rng = np.random.default_rng(cfg.seed)
    idx = _subsample(len(feats), cfg.max_train_points, rng)
    x, t = np.asarray(feats[idx], dtype=np.float64), offsets[idx]
    mean, scale = _standardizer(x, True)
    x = (x - mean) / scale
    d = x.shape[1]
    params = ParamSet({
        "w1": rng.uniform(-1, 1, (d, cfg.hidden)) * np.sqrt(6.0 / d), "b1": np.zeros(cfg.hidden),
        "w2": rng.uniform(-1, 1, (cfg.hidden, 3)) * np.sqrt(6.0 / cfg.hidden), "b2": np.zeros(3),
    })
    adam = AdamState.zeros_like(params)
    per_epoch, total, _ = _train_steps(len(x), ProbeConfig(epochs=cfg.epochs, batch_points=cfg.batch_points))
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x))
        for b in range(per_epoch):
            sel = perm[b * cfg.batch_points:(b + 1) * cfg.batch_points]
            step += 1
            params.zero_grad()
            P = params.bind()
            loss = G.reduce_mean(G.absolute(G.sub(_offset_mlp(P, x[sel]), t[sel])))
            G.backward(loss, params)
            adamw_step(params, params.grads, adam, lr_schedule(step, 0, total, cfg.lr), cfg.betas,
                       cfg.weight_decay)
    return OffsetHead({k: v.copy() for k, v in params.items()}, mean, scale)


def radius_clusters(points: np.ndarray, radius: float) -> np.ndarray:
    """Connected components of the radius graph (single linkage)."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp.astype(np.int64)


def cluster_instances(positions, offsets, sem_pred, sem_prob, cfg: InstanceConfig, scene: int = 0
                      ) -> list[InstancePrediction]:
    shifted = positions + offsets
    out = []
    for c in cfg.classes:
        rows = np.flatnonzero(sem_pred == c)
        if rows.size == 0:
            continue
        comp = radius_clusters(shifted[rows], cfg.radius)
        for k in range(int(comp.max()) + 1):
            members = rows[comp == k]
            if members.size < cfg.min_points:
                continue
            out.append(InstancePrediction(scene, members, int(c), float(sem_prob[members, c].mean())))
    return out


def gt_instance_sets(cloud: PointCloud, classes=THING_CLASSES) -> list[tuple[int, np.ndarray]]:
    out = []
    for inst in np.unique(cloud.instance_ids):
        rows = np.flatnonzero(cloud.instance_ids == inst)
        cls = int(np.bincount(cloud.labels[rows][cloud.labels[rows] >= 0], minlength=1).argmax())
        if cls in classes:
            out.append((cls, rows))
    return out


def instance_probe(train_feats, train_clouds, val_feats, val_clouds, cfg: InstanceConfig | None = None,
                   probe_cfg: ProbeConfig | None = None) -> float:
    """Class head + offset head on frozen features, radius clustering, mAP@50 on val."""
    cfg = cfg or InstanceConfig()
    tx = np.concatenate(train_feats)
    ty = np.concatenate([c.labels for c in train_clouds])
    vx = np.concatenate(val_feats)
    vy = np.concatenate([c.labels for c in val_clouds])
    head, _ = linear_probe(tx, ty, vx, vy, probe_cfg or ProbeConfig(seed=cfg.seed))
    offs = np.concatenate([instance_centroid_offsets(c) for c in train_clouds])
    thing = np.isin(ty, cfg.classes)
    off_head = train_offset_head(tx[thing], offs[thing], cfg)
    preds, gts = [], []
    for s, (f, cloud) in enumerate(zip(val_feats, val_clouds)):
        logits = head.logits(f)
        prob = np.exp(logits - logits.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        preds += cluster_instances(cloud.positions, off_head(f), prob.argmax(axis=1), prob, cfg, s)
        gts.append(gt_instance_sets(cloud, cfg.classes))
    return map_at_50(preds, gts, cfg.classes)[0]


# ----------------------------------------------------------------------------
# limited annotations

def limited_annotation_split(labels: list[np.ndarray], mode: str, amount: float, seed) -> list[np.ndarray]:
    """Hide labels: keep ceil(amount * S) whole scenes, or exactly ``amount`` points per scene."""
    rng = np.random.default_rng(seed)
    out = [np.asarray(y, dtype=np.int64).copy() for y in labels]
    if mode == "scenes":
        if not 0.0 < amount <= 1.0:
            raise ContractError("scene fraction must be in (0, 1]")
        keep = set(rng.choice(len(out), size=math.ceil(amount * len(out) - 1e-9), replace=False).tolist())
        for i, y in enumerate(out):
            if i not in keep:
                y[:] = IGNORE
    elif mode == "points":
        n_keep = int(amount)
        if n_keep < 1 or n_keep != amount:
            raise ContractError("points per scene must be a positive integer")
        for y in out:
            valid = np.flatnonzero(y != IGNORE)
            chosen = rng.choice(valid, size=min(n_keep, valid.size), replace=False)
            mask = np.ones(len(y), dtype=bool)
            mask[chosen] = False
            y[mask] = IGNORE
    else:
        raise ContractError(f"unknown limited-annotation mode {mode!r}")
    return out


# ----------------------------------------------------------------------------
# PCA colors

def top_components(x: np.ndarray, k: int = 3, iters: int = 500, tol: float = 1e-12, seed: int = 0):
    """Leading ``k`` eigenpairs of x^T x / n by orthogonal (block power) iteration."""
    n, d = x.shape
    cov = x.T @ x / n
    k_eff = min(k, d)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, k_eff)))
    for _ in range(iters):
        z, _ = np.linalg.qr(cov @ q)
        done = np.max(np.abs(np.abs(np.sum(z * q, axis=0)) - 1.0)) < tol
        q = z
        if done:
            break
    vals = np.sum(q * (cov @ q), axis=0)
    order = np.argsort(-vals, kind="stable")
    q, vals = q[:, order], vals[order]
    # deterministic signs: largest-magnitude loading positive
    flip = np.sign(q[np.argmax(np.abs(q), axis=0), np.arange(q.shape[1])])
    q = q * np.where(flip == 0, 1.0, flip)
    return vals, q


def pca_colors(features: np.ndarray) -> np.ndarray:
    """Project centered features on the top-3 principal directions and rescale each to [0, 1]."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 3:
        raise DegenerateInputError("PCA coloring needs at least three points")
    x = x - x.mean(axis=0)
    _, q = top_components(x, 3)
    proj = x @ q
    if proj.shape[1] < 3:
        proj = np.concatenate([proj, np.zeros((len(x), 3 - proj.shape[1]))], axis=1)
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = hi - lo
    scale = max(float(np.max(np.abs(x))), 1.0)
    flat = span <= 1e-9 * scale
    rgb = np.where(flat, 0.5, (proj - lo) / np.where(flat, 1.0, span))
    return np.clip(rgb, 0.0, 1.0)


# ----------------------------------------------------------------------------
# layer importance

def layer_importance(train: HierFeatures, train_y, val: HierFeatures, val_y, cfg: ProbeConfig | None = None
                     ) -> list[tuple[str, int, float]]:
    """Linear-probe mIoU with every level alone and with every level removed, plus all levels."""
    rows = [("all", -1, linear_probe(train.features, train_y, val.features, val_y, cfg)[1])]
    for lv in train.levels:
        alone = (lv,)
        rest = tuple(x for x in train.levels if x != lv)
        rows.append(("alone", lv, linear_probe(train.select(alone).features, train_y,
                                               val.select(alone).features, val_y, cfg)[1]))
        if rest:
            rows.append(("remove", lv, linear_probe(train.select(rest).features, train_y,
                                                    val.select(rest).features, val_y, cfg)[1]))
    return rows

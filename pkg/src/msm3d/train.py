"""Self-supervised training: cross-view masked feature prediction with an EMA teacher."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .errors import ContractError, DegenerateBatchError, DegenerateViewError, NumericError, ShapeError
from .grad import ParamSet, Tensor
from .hunet import Checkpoint, HUNetConfig, forward_full, forward_masked, init_params, load_checkpoint, save_checkpoint
from .scene import PointCloud
from .views import AugConfig, ViewConfig, ViewPair, build_view_pair, voxel_inputs


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 1
    lr: float = 0.0015
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    batch_size: int = 4
    mask_ratio: float = 0.4
    momentum_start: float = 0.98
    momentum_end: float = 1.0
    seed: int = 0
    level_weights: tuple | None = None
    topdown_mask: bool = False
    supervise_last_only: bool = False
    no_mask: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.level_weights is not None:
            self.level_weights = tuple(self.level_weights)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ContractError("warmup must be shorter than training")
        for m in (self.momentum_start, self.momentum_end):
            if not 0.0 <= m <= 1.0:
                raise ContractError(f"teacher momentum {m} outside [0, 1]")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ContractError("mask ratio outside [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ----------------------------------------------------------------------------
# schedules and optimizer

def momentum_schedule(step: int, total_steps: int, m0: float, m1: float) -> float:
    """Cosine ramp from m0 at step 0 to m1 at the last step."""
    t = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return m1 - (m1 - m0) * (math.cos(math.pi * t) + 1.0) / 2.0


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(ParamSet({k: np.zeros_like(v) for k, v in params.items()}),
                   ParamSet({k: np.zeros_like(v) for k, v in params.items()}))


def adamw_step(params: ParamSet, grads: dict[str, np.ndarray], moments: AdamState, lr: float,
               betas=(0.9, 0.95), weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """Adam with bias correction and decoupled weight decay, applied in place.

    New values are computed for every tensor first and committed only if all
    of them are finite, so a failing step leaves the state untouched.
    """
    b1, b2 = betas
    t = moments.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    staged = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        new = p * (1.0 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.isfinite(new).all():
            raise NumericError(f"optimizer produced non-finite values in {name}")
        staged[name] = (new, m, v)
    for name, (new, m, v) in staged.items():
        params.values[name][...] = new
        moments.m.values[name][...] = m
        moments.v.values[name][...] = v
    moments.t = t


def ema_update(teacher: ParamSet, student: ParamSet, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student for every tensor, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"momentum {momentum} outside [0, 1]")
    if not teacher.same_shapes(student):
        raise ShapeError("teacher and student parameter shapes differ")
    for name, t in teacher.items():
        # increment form: exact when teacher and student already agree
        t += (1.0 - momentum) * (student[name] - t)


# ----------------------------------------------------------------------------
# predictors, loss, monitoring

def add_predictors(params: ParamSet, config: HUNetConfig, seed) -> ParamSet:
    """Per-level 2-layer MLP (hidden 2x width, GELU) from decoder width to decoder width."""
    rng = np.random.default_rng(seed)
    for lv, c in enumerate(config.dec_channels):
        b1, b2 = np.sqrt(6.0 / c), np.sqrt(6.0 / (2 * c))
        params.add(f"pred{lv}.w1", rng.uniform(-b1, b1, (c, 2 * c)))
        params.add(f"pred{lv}.b1", np.zeros(2 * c))
        params.add(f"pred{lv}.w2", rng.uniform(-b2, b2, (2 * c, c)))
        params.add(f"pred{lv}.b2", np.zeros(c))
    return params


def init_model(config: HUNetConfig, seed) -> ParamSet:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_net, s_pred = ss.spawn(2)
    return add_predictors(init_params(config, s_net), config, s_pred)


def predict(P: dict, level: int, x: Tensor) -> Tensor:
    h = G.gelu(G.add(G.matmul(x, P[f"pred{level}.w1"]), P[f"pred{level}.b1"]))
    return G.add(G.matmul(h, P[f"pred{level}.w2"]), P[f"pred{level}.b2"])


def msm_loss(preds, targets, levels) -> tuple[Tensor, list[float]]:
    """Cross-view reconstruction loss.

    ``preds[d][l]`` are the student predictions of view d at level l on its
    matched rows (a Tensor, or None when nothing matched) and
    ``targets[d][l]`` the teacher features of the *other* view at the
    corresponding rows.  Each direction contributes the mean absolute error
    over its rows and channels; levels are summed.
    """
    total = None
    per_level = []
    for lv in levels:
        level_val = 0.0
        for d in range(2):
            p, t = preds[d][lv], targets[d][lv]
            if p is None or p.shape[0] == 0:
                continue
            if p.shape != t.shape:
                raise ShapeError(f"prediction {p.shape} vs target {t.shape} at level {lv}")
            term = G.reduce_mean(G.absolute(G.sub(p, t)))
            level_val += term.item()
            total = term if total is None else G.add(total, term)
        per_level.append(level_val)
    if total is None:
        raise DegenerateBatchError("no matched masked voxels at any supervised level")
    return total, per_level


def collapse_metric(features) -> list[float]:
    """Per level: population std across rows, averaged over channels."""
    out = []
    for f in features:
        f = np.asarray(f.value if isinstance(f, Tensor) else f, dtype=np.float64)
        out.append(float(np.mean(np.std(f, axis=0))) if f.shape[0] else 0.0)
    return out


def matched_rows(pair: ViewPair, view: int, level: int, masked_only: bool = True):
    """Student rows of ``view`` at ``level`` paired with teacher rows of the other view."""
    sv = pair.students[view]
    rows = sv.mask.masked_rows(level) if masked_only else np.arange(len(sv.hierarchy.levels[level]))
    a, b = pair.correspondence[level]
    n_self = len(pair.teachers[view].levels[level])
    partner = np.full(n_self, -1, dtype=np.int64)
    if view == 0:
        partner[a] = b
    else:
        partner[b] = a
    other = partner[sv.full_rows[level][rows]]
    ok = other >= 0
    return rows[ok], other[ok]


# ----------------------------------------------------------------------------
# training state and steps

@dataclass
class TrainState:
    student: ParamSet
    teacher: ParamSet
    adam: AdamState
    step: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: HUNetConfig, seed) -> "TrainState":
        student = init_model(model, seed)
        return cls(student, student.copy(), AdamState.zeros_like(student))


def levels_used(config: TrainConfig, num_levels: int) -> list[int]:
    return [0] if config.supervise_last_only else list(range(num_levels))


def scene_loss(P: dict, teacher_feats, pair: ViewPair, model: HUNetConfig, config: TrainConfig):
    """Student forward on both crops and the loss against the teacher targets."""
    levels = levels_used(config, model.levels)
    preds, targets = [[None] * model.levels for _ in range(2)], [[None] * model.levels for _ in range(2)]
    for d, sv in enumerate(pair.students):
        hier = sv.hierarchy
        mask = None if config.no_mask else sv.mask
        outs = forward_masked(P, model, hier, voxel_inputs(hier.levels[0]), mask, topdown=config.topdown_mask)
        for lv in levels:
            rows, other = matched_rows(pair, d, lv, masked_only=not config.no_mask)
            if rows.size == 0:
                continue
            preds[d][lv] = predict(P, lv, G.gather_rows(outs[lv], rows))
            targets[d][lv] = teacher_feats[1 - d][lv][other]
    return msm_loss(preds, targets, levels)


def _schedule(state_step: int, config: TrainConfig, steps_per_epoch: int) -> tuple[float, float]:
    total = config.epochs * steps_per_epoch
    lr = lr_schedule(state_step, config.warmup_epochs * steps_per_epoch, total, config.lr)
    mom = momentum_schedule(state_step, total, config.momentum_start, config.momentum_end)
    return lr, mom


def train_step(state: TrainState, batch: list[ViewPair], model: HUNetConfig, config: TrainConfig,
               steps_per_epoch: int) -> dict:
    """One optimizer update on a batch of view pairs; scene losses are averaged."""
    if not batch:
        raise ContractError("empty batch")
    step = state.step + 1
    lr, mom = _schedule(step, config, steps_per_epoch)
    grads = {k: np.zeros_like(v) for k, v in state.student.items()}
    losses, level_losses, stds = [], [], []
    with G.no_grad():
        TP = state.teacher.bind(requires_grad=False)
        teacher_out = [[[f.value for f in forward_full(TP, model, t, voxel_inputs(t.levels[0]))]
                        for t in pair.teachers] for pair in batch]
    used = 0
    for pair, tfeat in zip(batch, teacher_out):
        stds.append(np.mean([collapse_metric(t) for t in tfeat], axis=0))
        state.student.zero_grad()
        P = state.student.bind()
        try:
            loss, per_level = scene_loss(P, tfeat, pair, model, config)
        except DegenerateBatchError:
            continue
        if not np.isfinite(loss.item()):
            raise NumericError("non-finite loss")
        G.backward(loss, state.student)
        for k in grads:
            grads[k] += state.student.grads[k]
        losses.append(loss.item())
        level_losses.append(per_level)
        used += 1
    if used == 0:
        raise DegenerateBatchError("no scene in the batch has matched masked voxels")
    for k in grads:
        grads[k] /= used
        if not np.isfinite(grads[k]).all():
            raise NumericError(f"non-finite gradient for {k}")
    adamw_step(state.student, grads, state.adam, lr, config.betas, config.weight_decay)
    ema_update(state.teacher, state.student, mom)
    state.step = step
    full_levels = levels_used(config, model.levels)
    per_level = np.zeros(model.levels)
    per_level[full_levels] = np.mean(level_losses, axis=0)
    return {"loss": float(np.mean(losses)), "level_loss": per_level.tolist(), "lr": lr,
            "momentum": mom, "std": np.mean(stds, axis=0).tolist()}


# ----------------------------------------------------------------------------
# pretraining loop

def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def scene_seed(seed: int, epoch: int, scene: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, scene])


def _view_config(views: ViewConfig, config: TrainConfig) -> ViewConfig:
    return ViewConfig(aug=views.aug, voxel_size=views.voxel_size, levels=views.levels,
                      crop_max_points=views.crop_max_points, mask_ratio=config.mask_ratio)


def metrics_header(levels: int) -> list[str]:
    return (["epoch", "loss"] + [f"loss_l{lv}" for lv in range(levels)] + ["lr", "momentum"]
            + [f"std_l{lv}" for lv in range(levels)])


def format_metrics(row: dict, levels: int) -> str:
    vals = [str(row["epoch"]), f"{row['loss']:.9g}"] + [f"{v:.9g}" for v in row["level_loss"]]
    vals += [f"{row['lr']:.9g}", f"{row['momentum']:.9g}"] + [f"{v:.9g}" for v in row["std"]]
    assert len(vals) == len(metrics_header(levels))
    return "\t".join(vals)


def write_metrics(path, log: list[dict], levels: int, settings: dict | None = None) -> None:
    """Per-epoch TSV; ``settings`` are written first as ``# key=value`` comment lines."""
    with open(path, "w") as fh:
        for k, v in sorted((settings or {}).items()):
            fh.write(f"# {k}={v}\n")
        fh.write("\t".join(metrics_header(levels)) + "\n")
        for row in log:
            fh.write(format_metrics(row, levels) + "\n")


def save_state(path, state: TrainState, model: HUNetConfig, config: TrainConfig, views: ViewConfig) -> None:
    meta = {"epoch": state.epoch, "step": state.step, "adam_t": state.adam.t, "log": state.log,
            "train": config.to_dict(), "views": {**asdict(views), "aug": asdict(views.aug)}}
    tmp = f"{path}.tmp"
    save_checkpoint(tmp, model, {"student": state.student, "teacher": state.teacher,
                                 "adam_m": state.adam.m, "adam_v": state.adam.v}, meta)
    os.replace(tmp, path)


def load_state(path, model: HUNetConfig | None = None) -> tuple[TrainState, Checkpoint]:
    ck = load_checkpoint(path, model)
    p = ck.params
    adam = AdamState(p["adam_m"], p["adam_v"], int(ck.meta.get("adam_t", 0)))
    state = TrainState(p["student"], p["teacher"], adam, int(ck.meta["step"]), int(ck.meta["epoch"]),
                       list(ck.meta.get("log", [])))
    return state, ck


def view_config_from_dict(d: dict) -> ViewConfig:
    d = dict(d)
    d["aug"] = AugConfig(**d["aug"])
    return ViewConfig(**d)


def pretrain(scenes: list[PointCloud], model: HUNetConfig, config: TrainConfig, views: ViewConfig,
             checkpoint=None, metrics=None, resume=None, stop_after: int | None = None, jobs: int = 1,
             progress=None) -> TrainState:
    """Run the full pretraining schedule.

    After every epoch the state is written to ``checkpoint`` and the per-epoch
    metrics to ``metrics`` (either may be None).  ``resume`` restarts from such
    a checkpoint; because every random draw is derived from (seed, epoch, scene)
    the resumed run reproduces the uninterrupted one.
    """
    if not scenes:
        raise ContractError("no scenes to train on")
    views = _view_config(views, config)
    if resume is not None:
        state, _ = load_state(resume, model)
    else:
        state = TrainState.fresh(model, config.seed)
    n = len(scenes)
    steps_per_epoch = math.ceil(n / config.batch_size)
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while state.epoch < config.epochs:
            if stop_after is not None and state.epoch >= stop_after:
                break
            epoch = state.epoch
            order = epoch_order(config.seed, epoch, n)

            def make(i):
                try:
                    return build_view_pair(scenes[i], views, scene_seed(config.seed, epoch, int(i)))
                except DegenerateViewError:
                    return None

            pairs = list(pool.map(make, order)) if pool else [make(i) for i in order]
            rows = []
            for b in range(0, n, config.batch_size):
                batch = [p for p in pairs[b:b + config.batch_size] if p is not None]
                if not batch:
                    continue
                try:
                    rows.append(train_step(state, batch, model, config, steps_per_epoch))
                except DegenerateBatchError:
                    # nothing usable in this batch; the schedule simply skips a step
                    continue
            if not rows:
                raise DegenerateBatchError(f"epoch {epoch + 1} produced no usable batch")
            state.epoch = epoch + 1
            entry = {"epoch": state.epoch, "loss": float(np.mean([r["loss"] for r in rows])),
                     "level_loss": np.mean([r["level_loss"] for r in rows], axis=0).tolist(),
                     "lr": rows[-1]["lr"], "momentum": rows[-1]["momentum"],
                     "std": np.mean([r["std"] for r in rows], axis=0).tolist()}
            state.log.append(entry)
            if progress is not None:
                progress(entry)
            if checkpoint is not None:
                save_state(checkpoint, state, model, config, views)
            if metrics is not None:
                settings = {f"train.{k}": v for k, v in config.to_dict().items()}
                write_metrics(metrics, state.log, model.levels, settings)
    finally:
        if pool:
            pool.shutdown()
    return state

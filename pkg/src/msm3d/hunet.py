"""Hybrid sparse-conv / windowed-attention UNet over voxel hierarchies.

The network is a set of pure functions of a parameter dict (name -> Tensor)
and a :class:`HierarchyContext`, which holds every integer table a forward
pass needs (stencil neighbors, parent/octant maps, serialization windows).
Encoder levels run ResNet blocks (and attention blocks where configured),
levels are linked by a strided 2x2x2 convolution; the decoder walks back up
with per-octant transposed convolutions and concatenating skips.

Masked voxels are removed from the encoder entirely: the encoder is simply
run on the hierarchy restricted to unmasked voxels.  The decoder runs on the
full hierarchy and fills masked rows with a learned per-level token.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .curves import CURVES
from .errors import CheckpointError, ContractError, DegenerateInputError, ShapeError
from .grad import ParamSet, RowIndex, Tensor
from .voxel import GridHierarchy, VoxelGrid, kernel_neighbors, octant_of, serialize

CHECKPOINT_VERSION = 1
_MASK_BIAS = -1e9


@dataclass
class HUNetConfig:
    in_channels: int = 4
    levels: int = 4
    enc_channels: tuple = (16, 32, 64, 96)
    dec_channels: tuple = (24, 32, 64, 96)
    enc_resnet: tuple = (2, 2, 2, 2)
    dec_resnet: tuple = (2, 2, 2, 2)
    enc_attention: tuple = (0, 0, 2, 2)
    dec_attention: tuple = (0, 0, 2, 2)
    window: int = 64
    heads: tuple = (0, 0, 4, 4)
    ff_ratio: int = 4
    curves: tuple = CURVES
    output_norm: bool = True

    def __post_init__(self):
        for name in ("enc_channels", "dec_channels", "enc_resnet", "dec_resnet",
                     "enc_attention", "dec_attention", "heads", "curves"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        L = self.levels
        if L < 2:
            raise ContractError("the network needs at least two levels")
        for name in ("enc_channels", "dec_channels", "enc_resnet", "dec_resnet",
                     "enc_attention", "dec_attention", "heads"):
            if len(getattr(self, name)) != L:
                raise ContractError(f"{name} must have one entry per level ({L})")
        if any(b <= a for a, b in zip(self.enc_channels, self.enc_channels[1:])):
            raise ContractError("encoder channels must strictly increase with depth")
        for lv in range(L):
            if self.enc_attention[lv] or self.dec_attention[lv]:
                h = self.heads[lv]
                if h < 1 or self.enc_channels[lv] % h or self.dec_channels[lv] % h:
                    raise ContractError(f"level {lv}: channels not divisible into {h} heads")
        if self.window < 1:
            raise ContractError("attention window must be >= 1")
        if not self.curves or any(c not in CURVES for c in self.curves):
            raise ContractError(f"curves must be drawn from {CURVES}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HUNetConfig":
        return cls(**d)


def tiny_config(**overrides) -> HUNetConfig:
    """Smallest configuration exercising every block type (used by gradient checks)."""
    base = dict(in_channels=3, levels=3, enc_channels=(4, 6, 8), dec_channels=(4, 6, 8),
                enc_resnet=(1, 1, 1), dec_resnet=(1, 1, 1), enc_attention=(0, 1, 1),
                dec_attention=(0, 1, 1), window=4, heads=(0, 2, 2), ff_ratio=2)
    base.update(overrides)
    return HUNetConfig(**base)


# ----------------------------------------------------------------------------
# parameters

def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_resblock(ps: ParamSet, rng, prefix: str, c: int) -> None:
    ps.add(f"{prefix}.conv1", _he_uniform(rng, (27, c, c), 27 * c))
    ps.add(f"{prefix}.norm1", np.ones(c))
    ps.add(f"{prefix}.conv2", _he_uniform(rng, (27, c, c), 27 * c))
    ps.add(f"{prefix}.norm2", np.ones(c))


def _add_attnblock(ps: ParamSet, rng, prefix: str, c: int, ff: int) -> None:
    ps.add(f"{prefix}.norm1", np.ones(c))
    for w in ("wq", "wk", "wv", "wo"):
        ps.add(f"{prefix}.{w}", _he_uniform(rng, (c, c), c))
    ps.add(f"{prefix}.norm2", np.ones(c))
    ps.add(f"{prefix}.ff1", _he_uniform(rng, (c, 2 * ff * c), c))
    ps.add(f"{prefix}.ff2", _he_uniform(rng, (ff * c, c), ff * c))


def init_params(config: HUNetConfig, seed) -> ParamSet:
    """He-uniform weights, zero biases, N(0, 0.02) mask tokens."""
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    enc, dec = config.enc_channels, config.dec_channels
    ps.add("stem.w", _he_uniform(rng, (27, config.in_channels, enc[0]), 27 * config.in_channels))
    ps.add("stem.b", np.zeros(enc[0]))
    for lv in range(config.levels):
        if lv > 0:
            ps.add(f"enc{lv}.down.w", _he_uniform(rng, (8, enc[lv - 1], enc[lv]), 8 * enc[lv - 1]))
            ps.add(f"enc{lv}.down.b", np.zeros(enc[lv]))
        for i in range(config.enc_resnet[lv]):
            _add_resblock(ps, rng, f"enc{lv}.res{i}", enc[lv])
        for i in range(config.enc_attention[lv]):
            _add_attnblock(ps, rng, f"enc{lv}.attn{i}", enc[lv], config.ff_ratio)
    for lv in range(config.levels):
        ps.add(f"token{lv}", rng.normal(0.0, 0.02, size=(1, enc[lv])))
    top = config.levels - 1
    if enc[top] != dec[top]:
        ps.add(f"dec{top}.proj.w", _he_uniform(rng, (enc[top], dec[top]), enc[top]))
        ps.add(f"dec{top}.proj.b", np.zeros(dec[top]))
    for lv in range(top, -1, -1):
        if lv < top:
            ps.add(f"dec{lv}.up.w", _he_uniform(rng, (dec[lv + 1], 8, dec[lv]), dec[lv + 1]))
            ps.add(f"dec{lv}.up.b", np.zeros(dec[lv]))
            ps.add(f"dec{lv}.skip.w", _he_uniform(rng, (dec[lv] + enc[lv], dec[lv]), dec[lv] + enc[lv]))
            ps.add(f"dec{lv}.skip.b", np.zeros(dec[lv]))
        for i in range(config.dec_resnet[lv]):
            _add_resblock(ps, rng, f"dec{lv}.res{i}", dec[lv])
        for i in range(config.dec_attention[lv]):
            _add_attnblock(ps, rng, f"dec{lv}.attn{i}", dec[lv], config.ff_ratio)
        if config.output_norm:
            ps.add(f"dec{lv}.out_norm", np.ones(dec[lv]))
    return ps


# ----------------------------------------------------------------------------
# index tables

def window_table(permutation: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(N, W) key rows and validity for a sliding window over a serialization.

    Token at sequence position t sees positions t - h .. t + h with
    h = window // 2, clipped to the sequence; invalid slots are flagged.
    """
    perm = np.asarray(permutation, dtype=np.int64)
    n = perm.shape[0]
    h = min(window // 2, max(n - 1, 0))
    pos = np.empty(n, dtype=np.int64)
    pos[perm] = np.arange(n)
    t = pos[:, None] - h + np.arange(2 * h + 1)[None, :]
    valid = (t >= 0) & (t < n)
    return perm[np.clip(t, 0, max(n - 1, 0))], valid


class LevelContext:
    """Index tables for one level's voxel rows.

    Serialization orders are computed on first use, since only levels with
    attention blocks need them.
    """

    def __init__(self, n: int, neighbors: np.ndarray, orders: dict[str, np.ndarray] | None = None,
                 grid: VoxelGrid | None = None):
        self.n = n
        self.neighbors = neighbors
        self.orders = dict(orders or {})
        self.grid = grid
        table = np.where(neighbors >= 0, neighbors, n)
        self.conv_index = RowIndex(table.reshape(-1))
        self._windows: dict = {}

    @classmethod
    def from_grid(cls, grid: VoxelGrid) -> "LevelContext":
        return cls(len(grid), kernel_neighbors(grid), grid=grid)

    def order(self, curve: str) -> np.ndarray:
        if curve not in self.orders:
            if self.grid is None:
                raise ContractError(f"no serialization for curve {curve!r}")
            self.orders[curve] = serialize(self.grid, curve).permutation
        return self.orders[curve]

    def window(self, curve: str, window: int):
        key = (curve, window)
        if key not in self._windows:
            idx, valid = window_table(self.order(curve), window)
            bias = np.where(valid, 0.0, _MASK_BIAS)[:, :, None]
            self._windows[key] = (RowIndex(idx.reshape(-1)), idx.shape[1], bias)
        return self._windows[key]

    def permuted(self, perm: np.ndarray, curves=CURVES) -> "LevelContext":
        """Context for rows reordered so that new row i is old row perm[i]."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.shape[0])
        nb = self.neighbors[perm]
        nb = np.where(nb >= 0, inv[np.maximum(nb, 0)], -1)
        return LevelContext(self.n, nb, {c: inv[self.order(c)] for c in curves})


class HierarchyContext:
    """Per-level contexts plus parent/octant tables linking adjacent levels."""

    def __init__(self, levels: list[LevelContext], parent_of: list[np.ndarray], octants: list[np.ndarray]):
        self.levels = levels
        self.parent_of = parent_of
        self.octants = octants
        self.down_index, self.up_index = [], []
        for lv in range(len(levels) - 1):
            n_fine, n_coarse = levels[lv].n, levels[lv + 1].n
            slots = np.full((n_coarse, 8), n_fine, dtype=np.int64)
            slots[parent_of[lv], octants[lv]] = np.arange(n_fine)
            self.down_index.append(RowIndex(slots.reshape(-1)))
            self.up_index.append(RowIndex(parent_of[lv] * 8 + octants[lv]))

    @classmethod
    def from_hierarchy(cls, hier: GridHierarchy) -> "HierarchyContext":
        levels = [LevelContext.from_grid(g) for g in hier.levels]
        octs = [octant_of(hier.levels[lv].keys) for lv in range(hier.num_levels - 1)]
        return cls(levels, list(hier.parent_of), octs)

    @property
    def sizes(self) -> list[int]:
        return [c.n for c in self.levels]

    def permuted(self, perms: list[np.ndarray], curves=CURVES) -> "HierarchyContext":
        invs = []
        for p in perms:
            inv = np.empty_like(p)
            inv[p] = np.arange(p.shape[0])
            invs.append(inv)
        levels = [c.permuted(p, curves) for c, p in zip(self.levels, perms)]
        parent_of = [invs[lv + 1][self.parent_of[lv][perms[lv]]] for lv in range(len(perms) - 1)]
        octs = [self.octants[lv][perms[lv]] for lv in range(len(perms) - 1)]
        return HierarchyContext(levels, parent_of, octs)


# ----------------------------------------------------------------------------
# layers

def _zero_row(c: int) -> Tensor:
    return G.constant(np.zeros((1, c)))


def sparse_conv(x: Tensor, weight: Tensor, conv_index: RowIndex, bias: Tensor | None = None) -> Tensor:
    """Submanifold 3x3x3 convolution: out[v] = sum_o W[o] in[nbr(v, o)] (+ bias)."""
    n, cin = x.shape
    if weight.shape[:2] != (27, cin):
        raise ShapeError(f"kernel {weight.shape} does not fit {cin} input channels")
    if len(conv_index) != 27 * n:
        raise ShapeError("neighbor table does not match the feature rows")
    cols = G.gather_rows(G.concat([x, _zero_row(cin)], axis=0), conv_index)
    out = G.matmul(G.reshape(cols, (n, 27 * cin)), G.reshape(weight, (27 * cin, weight.shape[2])))
    return out if bias is None else G.add(out, bias)


def downsample(x: Tensor, weight: Tensor, bias: Tensor, down_index: RowIndex, n_parent: int) -> Tensor:
    """Strided 2x2x2 convolution: out[p] = sum over children W[octant] in[child] + bias."""
    cin = x.shape[1]
    cols = G.gather_rows(G.concat([x, _zero_row(cin)], axis=0), down_index)
    out = G.matmul(G.reshape(cols, (n_parent, 8 * cin)), G.reshape(weight, (8 * cin, weight.shape[2])))
    return G.add(out, bias)


def upsample(x: Tensor, weight: Tensor, bias: Tensor, up_index: RowIndex) -> Tensor:
    """Transposed 2x2x2 convolution: child = W[:, octant]^T parent + bias.

    ``weight`` has shape (Cin, 8, Cout).
    """
    n, cin = x.shape
    cout = weight.shape[2]
    y = G.matmul(x, G.reshape(weight, (cin, 8 * cout)))
    y = G.gather_rows(G.reshape(y, (n * 8, cout)), up_index)
    return G.add(y, bias)


def _head_matrix(c: int, heads: int) -> np.ndarray:
    dh = c // heads
    return np.kron(np.eye(heads), np.ones((dh, 1)))  # (c, heads)


def attention_core(q: Tensor, k: Tensor, v: Tensor, key_index: RowIndex, width: int,
                   bias: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention of each row over ``width`` gathered keys."""
    n, c = q.shape
    if c % heads:
        raise ShapeError(f"{c} channels do not split into {heads} heads")
    hm = _head_matrix(c, heads)
    kg = G.reshape(G.gather_rows(k, key_index), (n, width, c))
    vg = G.reshape(G.gather_rows(v, key_index), (n, width, c))
    scores = G.matmul(G.mul(G.reshape(q, (n, 1, c)), kg), hm / np.sqrt(c // heads))
    probs = G.softmax(G.add(scores, bias), axis=1)
    weights = G.matmul(probs, hm.T)
    return G.reduce_sum(G.mul(weights, vg), axis=1)


def windowed_attention(x: Tensor, P: dict, prefix: str, ctx: LevelContext, curve: str,
                       window: int, heads: int) -> Tensor:
    """Project to queries/keys/values, attend within the serialized window, project out."""
    key_index, width, bias = ctx.window(curve, window)
    q = G.matmul(x, P[f"{prefix}.wq"])
    k = G.matmul(x, P[f"{prefix}.wk"])
    v = G.matmul(x, P[f"{prefix}.wv"])
    return G.matmul(G.window_attention(q, k, v, key_index, width, bias, heads), P[f"{prefix}.wo"])


def resblock(x: Tensor, P: dict, prefix: str, ctx: LevelContext) -> Tensor:
    h = G.gelu(G.rmsnorm(sparse_conv(x, P[f"{prefix}.conv1"], ctx.conv_index), P[f"{prefix}.norm1"]))
    h = G.rmsnorm(sparse_conv(h, P[f"{prefix}.conv2"], ctx.conv_index), P[f"{prefix}.norm2"])
    return G.gelu(G.add(h, x))


def attnblock(x: Tensor, P: dict, prefix: str, ctx: LevelContext, curve: str,
              window: int, heads: int) -> Tensor:
    h = G.rmsnorm(x, P[f"{prefix}.norm1"])
    x = G.add(x, windowed_attention(h, P, prefix, ctx, curve, window, heads))
    h = G.rmsnorm(x, P[f"{prefix}.norm2"])
    h = G.matmul(G.geglu(G.matmul(h, P[f"{prefix}.ff1"])), P[f"{prefix}.ff2"])
    return G.add(x, h)


class _CurveCycle:
    def __init__(self, curves):
        self.curves = curves
        self.i = 0

    def next(self) -> str:
        c = self.curves[self.i % len(self.curves)]
        self.i += 1
        return c


def _level_blocks(x, P, side: str, lv: int, ctx: LevelContext, config: HUNetConfig, cycle: _CurveCycle):
    n_res = (config.enc_resnet if side == "enc" else config.dec_resnet)[lv]
    n_att = (config.enc_attention if side == "enc" else config.dec_attention)[lv]
    for i in range(n_res):
        x = resblock(x, P, f"{side}{lv}.res{i}", ctx)
    for i in range(n_att):
        x = attnblock(x, P, f"{side}{lv}.attn{i}", ctx, cycle.next(), config.window, config.heads[lv])
    return x


# ----------------------------------------------------------------------------
# encoder / decoder

def _replace_rows(x: Tensor, masked: np.ndarray, token: Tensor) -> Tensor:
    col = masked.astype(np.float64)[:, None]
    return G.add(G.mul(x, 1.0 - col), G.mul(col, token))


def encoder_pass(P: dict, config: HUNetConfig, ctx: HierarchyContext, inputs,
                 token_rows: list[np.ndarray] | None = None) -> list[Tensor]:
    """Encoder over exactly the rows described by ``ctx``.

    ``token_rows`` (per level boolean) replaces those rows by the level token
    at the entry of every level; it is only used by the top-down ablation.
    """
    x = G.constant(inputs) if not isinstance(inputs, Tensor) else inputs
    if token_rows is not None:
        x = G.mul(x, 1.0 - token_rows[0].astype(np.float64)[:, None])
    cycle = _CurveCycle(config.curves)
    outs = []
    for lv in range(config.levels):
        lctx = ctx.levels[lv]
        if lv == 0:
            x = sparse_conv(x, P["stem.w"], lctx.conv_index, P["stem.b"])
        else:
            x = downsample(x, P[f"enc{lv}.down.w"], P[f"enc{lv}.down.b"], ctx.down_index[lv - 1], lctx.n)
        if token_rows is not None and token_rows[lv].any():
            x = _replace_rows(x, token_rows[lv], P[f"token{lv}"])
        x = _level_blocks(x, P, "enc", lv, lctx, config, cycle)
        outs.append(x)
    return outs


def decoder_pass(P: dict, config: HUNetConfig, ctx: HierarchyContext, enc_feats: list[Tensor],
                 masked: list[np.ndarray] | None = None) -> list[Tensor]:
    """Decoder over the full rows of ``ctx``.

    ``enc_feats[l]`` covers the unmasked rows of level l (all rows when
    ``masked`` is None); masked rows are filled with the level token.
    """
    top = config.levels - 1
    cycle = _CurveCycle(config.curves)
    # the decoder continues the curve cycle where the encoder stopped
    for lv in range(config.levels):
        for _ in range(config.enc_attention[lv]):
            cycle.next()
    outs = [None] * config.levels
    x = None
    for lv in range(top, -1, -1):
        n = ctx.levels[lv].n
        comb = enc_feats[lv]
        if masked is not None and masked[lv].any():
            keep = np.flatnonzero(~masked[lv])
            comb = G.scatter_add_rows(comb, keep, n)
            comb = G.add(comb, G.mul(masked[lv].astype(np.float64)[:, None], P[f"token{lv}"]))
        if comb.shape[0] != n:
            raise ShapeError(f"level {lv}: {comb.shape[0]} encoder rows for {n} voxels")
        if lv == top:
            x = comb
            if f"dec{top}.proj.w" in P:
                x = G.add(G.matmul(x, P[f"dec{top}.proj.w"]), P[f"dec{top}.proj.b"])
        else:
            up = upsample(x, P[f"dec{lv}.up.w"], P[f"dec{lv}.up.b"], ctx.up_index[lv])
            x = G.add(G.matmul(G.concat([up, comb], axis=1), P[f"dec{lv}.skip.w"]), P[f"dec{lv}.skip.b"])
        x = _level_blocks(x, P, "dec", lv, ctx.levels[lv], config, cycle)
        if config.output_norm:
            # bounded per-level outputs keep the teacher targets on a fixed scale
            x = G.rmsnorm(x, P[f"dec{lv}.out_norm"])
        outs[lv] = x
    return outs


def _unmasked_keep(mask) -> list[np.ndarray]:
    keep = [~m for m in mask.masked]
    if not keep[-1].any():
        raise DegenerateInputError("every voxel is masked; nothing to encode")
    return keep


def encode(P: dict, config: HUNetConfig, hier: GridHierarchy, inputs, mask=None,
           ctx: HierarchyContext | None = None) -> list[Tensor]:
    """Per-level encoder features over the unmasked rows only.

    ``inputs`` may cover all level-0 rows or just the unmasked ones; masked
    rows never enter any neighbor table, window or downsampling.
    """
    inputs = np.asarray(inputs, dtype=np.float64) if not isinstance(inputs, Tensor) else inputs
    if mask is None or mask.empty:
        return encoder_pass(P, config, ctx or HierarchyContext.from_hierarchy(hier), inputs)
    keep = _unmasked_keep(mask)
    if inputs.shape[0] == len(hier.levels[0]):
        inputs = inputs[keep[0]] if not isinstance(inputs, Tensor) else G.gather_rows(inputs, np.flatnonzero(keep[0]))
    sub = ctx or HierarchyContext.from_hierarchy(hier.subset(keep))
    return encoder_pass(P, config, sub, inputs)


def decode(P: dict, config: HUNetConfig, hier: GridHierarchy, enc_feats: list[Tensor], mask=None,
           ctx: HierarchyContext | None = None) -> list[Tensor]:
    ctx = ctx or HierarchyContext.from_hierarchy(hier)
    masked = None if mask is None or mask.empty else mask.masked
    return decoder_pass(P, config, ctx, enc_feats, masked)


def forward_full(P: dict, config: HUNetConfig, hier: GridHierarchy, inputs,
                 ctx: HierarchyContext | None = None) -> list[Tensor]:
    """Unmasked encode + decode (teacher and inference path)."""
    ctx = ctx or HierarchyContext.from_hierarchy(hier)
    return decoder_pass(P, config, ctx, encoder_pass(P, config, ctx, inputs))


def forward_masked(P: dict, config: HUNetConfig, hier: GridHierarchy, inputs, mask,
                   topdown: bool = False) -> list[Tensor]:
    """Student path: encoder on unmasked voxels, decoder with tokens on masked ones.

    With ``topdown`` the encoder instead sees every voxel, masked rows being
    replaced by the level token at each level entry.
    """
    full = HierarchyContext.from_hierarchy(hier)
    if mask is None or mask.empty:
        return decoder_pass(P, config, full, encoder_pass(P, config, full, inputs))
    if topdown:
        _unmasked_keep(mask)
        return decoder_pass(P, config, full, encoder_pass(P, config, full, inputs, mask.masked))
    enc = encode(P, config, hier, inputs, mask)
    return decoder_pass(P, config, full, enc, mask.masked)


# ----------------------------------------------------------------------------
# checkpoints

def _fixed_zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path, config: HUNetConfig, params: dict[str, ParamSet], meta: dict | None = None) -> None:
    """Write named parameter sets and the producing config to one archive.

    The archive is a plain .npz (zip of .npy members) with fixed timestamps,
    so identical state gives identical bytes.
    """
    header = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "meta": meta or {},
              "sets": sorted(params)}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_fixed_zipinfo("header.json"), json.dumps(header, sort_keys=True))
        for set_name in sorted(params):
            for name, value in params[set_name].items():
                buf = io.BytesIO()
                np.save(buf, value, allow_pickle=False)
                zf.writestr(_fixed_zipinfo(f"{set_name}/{name}.npy"), buf.getvalue())


@dataclass
class Checkpoint:
    config: HUNetConfig
    params: dict[str, ParamSet]
    meta: dict = field(default_factory=dict)


def load_checkpoint(path, expected: HUNetConfig | None = None) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no header") from None
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
        config = HUNetConfig.from_dict(header["config"])
        if expected is not None and expected.to_dict() != config.to_dict():
            diff = [k for k, v in expected.to_dict().items() if config.to_dict().get(k) != v]
            raise CheckpointError(f"checkpoint config differs in {', '.join(diff)}")
        sets = {s: ParamSet() for s in header["sets"]}
        for member in zf.namelist():
            if member == "header.json":
                continue
            set_name, fname = member.split("/", 1)
            sets[set_name].add(fname[:-4], np.load(io.BytesIO(zf.read(member)), allow_pickle=False))
    return Checkpoint(config, sets, header.get("meta", {}))

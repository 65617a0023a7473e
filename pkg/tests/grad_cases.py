"""Random small graphs, one per autodiff primitive, for finite-difference checks.

Every case returns (values, builder): ``values`` are the leaves to perturb and
``builder`` maps bound leaves to a scalar loss.  Losses contract the
primitive's output with a fixed random tensor so every output element
contributes an O(1) gradient.
"""

import numpy as np

from msm3d import grad as G
from msm3d.hunet import window_table


def _contract(out, rng):
    r = rng.normal(size=out.shape)
    return G.reduce_sum(G.mul(out, r))


def _away_from_zero(rng, shape, margin=0.3):
    return np.sign(rng.normal(size=shape)) * (margin + rng.random(shape))


def case_add(rng):
    vals = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
    return vals, lambda P: _contract(G.add(P["a"], P["b"]), np.random.default_rng(1))


def case_sub(rng):
    vals = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 1))}
    return vals, lambda P: _contract(G.sub(P["a"], P["b"]), np.random.default_rng(1))


def case_mul(rng):
    vals = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4))}
    return vals, lambda P: _contract(G.mul(P["a"], P["b"]), np.random.default_rng(1))


def case_matmul(rng):
    vals = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}
    return vals, lambda P: _contract(G.matmul(P["a"], P["b"]), np.random.default_rng(1))


def case_gelu(rng):
    # unit-scale inputs, as after RMSNorm; far in the negative tail the
    # derivative is ~1e-8 and a central difference of an O(1) loss cannot
    # resolve it to 1e-4 relative
    vals = {"x": rng.normal(size=(5, 3))}
    return vals, lambda P: _contract(G.gelu(P["x"]), np.random.default_rng(1))


def case_geglu(rng):
    vals = {"x": rng.normal(size=(4, 6))}
    return vals, lambda P: _contract(G.geglu(P["x"]), np.random.default_rng(1))


def case_rmsnorm(rng):
    vals = {"x": rng.normal(size=(4, 5)), "gain": 1.0 + 0.3 * rng.normal(size=(5,))}
    return vals, lambda P: _contract(G.rmsnorm(P["x"], P["gain"]), np.random.default_rng(1))


def case_softmax(rng):
    vals = {"x": rng.normal(size=(3, 5))}
    return vals, lambda P: _contract(G.softmax(P["x"], axis=-1), np.random.default_rng(1))


def case_log_softmax(rng):
    vals = {"x": rng.normal(size=(3, 5))}
    return vals, lambda P: _contract(G.log_softmax(P["x"], axis=-1), np.random.default_rng(1))


def case_gather_rows(rng):
    index = rng.integers(0, 5, size=7)
    vals = {"x": rng.normal(size=(5, 3))}
    return vals, lambda P: _contract(G.gather_rows(P["x"], index), np.random.default_rng(1))


def case_scatter_add_rows(rng):
    index = rng.integers(0, 5, size=7)
    vals = {"x": rng.normal(size=(7, 3))}
    return vals, lambda P: _contract(G.scatter_add_rows(P["x"], index, 5), np.random.default_rng(1))


def case_sum(rng):
    vals = {"x": rng.normal(size=(4, 3))}
    return vals, lambda P: _contract(G.reduce_sum(P["x"], axis=0, keepdims=True), np.random.default_rng(1))


def case_mean(rng):
    vals = {"x": rng.normal(size=(4, 3))}
    return vals, lambda P: _contract(G.reduce_mean(P["x"], axis=1), np.random.default_rng(1))


def case_abs(rng):
    vals = {"x": _away_from_zero(rng, (4, 3))}
    return vals, lambda P: _contract(G.absolute(P["x"]), np.random.default_rng(1))


def case_concat(rng):
    vals = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 4))}
    return vals, lambda P: _contract(G.concat([P["a"], P["b"]], axis=1), np.random.default_rng(1))


def case_slice(rng):
    vals = {"x": rng.normal(size=(5, 4))}
    key = (slice(1, 4), slice(None, None, 2))
    return vals, lambda P: _contract(G.slice_(P["x"], key), np.random.default_rng(1))


def case_reshape(rng):
    vals = {"x": rng.normal(size=(3, 4))}
    return vals, lambda P: _contract(G.reshape(P["x"], (2, 6)), np.random.default_rng(1))


def case_window_attention(rng):
    n, c, heads, window = 6, 4, 2, 3
    idx, valid = window_table(rng.permutation(n), window)
    bias = np.where(valid, 0.0, -1e9)[:, :, None]
    vals = {k: rng.normal(size=(n, c)) for k in ("q", "k", "v")}

    def build(P):
        out = G.window_attention(P["q"], P["k"], P["v"], idx.reshape(-1), idx.shape[1], bias, heads)
        return _contract(out, np.random.default_rng(1))
    return vals, build


PRIMITIVE_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "matmul": case_matmul,
    "gelu": case_gelu,
    "geglu": case_geglu,
    "rmsnorm": case_rmsnorm,
    "softmax": case_softmax,
    "log_softmax": case_log_softmax,
    "gather_rows": case_gather_rows,
    "scatter_add_rows": case_scatter_add_rows,
    "sum": case_sum,
    "mean": case_mean,
    "abs": case_abs,
    "concat": case_concat,
    "slice": case_slice,
    "reshape": case_reshape,
    "window_attention": case_window_attention,
}


def max_primitive_error(name: str, seed: int) -> float:
    values, builder = PRIMITIVE_CASES[name](np.random.default_rng(seed))
    report = G.check_gradients(builder, values, h=1e-5)
    return max(report.values())

"""Finite-difference verification suite behind the `gradcheck` command.

Every differentiable operation, every layer, and the three full model
compositions are checked against central finite differences (h=1e-6,
float64, dropout off) at a 1e-5 max-relative-error tolerance.

Checks run at a generic parameter point (weights scaled from Glorot init,
biases random) with targets placed a small residual away from the initial
predictions. That keeps every gradient element comfortably above the
finite-difference noise floor of ~|loss|*1e-10; zero-bias points
under-excite recurrent weights and would drown their tiny gradients in
that noise. Model rows run the full composition (five timesteps, four
gated attention layers, head) at a reduced verification width for the
same conditioning reason; the derivative code paths are width-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geo, models, train
from . import tensor as T

GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def random_sequence(n_nodes, seed, record_id="check"):
    """Sequence shaped like prepared data: z-scored features, min-max weights."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.05, 1.0, size=(n_nodes, n_nodes))
    w = (w + w.T) / 2.0
    np.fill_diagonal(w, 0.0)
    adj = geo.AdjacencyMatrix(weights=w, normalization="minmax")
    graphs = [
        geo.FeatureGraph(year=y, features=rng.normal(size=(n_nodes, 4)), adjacency=adj)
        for y in geo.FEATURE_YEARS
    ]
    targets = rng.uniform(5.0, 30.0, size=(n_nodes, 10))
    return geo.TemporalGraphSequence(record_id=record_id, graphs=graphs, targets=targets)


def generic_point(model, seed, weight_scale=1.5, bias_scale=0.5):
    """Move a freshly initialized model to a well-conditioned generic point."""
    rng = np.random.default_rng(seed + 500)
    for name, p in model.params.items():
        v = p.value.data
        if name.endswith((".W", ".Wx", ".Wh", ".a")):
            p.assign(v * weight_scale)
        else:
            p.assign(rng.uniform(-bias_scale, bias_scale, size=v.shape))
    return model


def _near_prediction_targets(model, seq, seed, residual_scale=0.3):
    pred = models.forward(model, seq).data
    rng = np.random.default_rng(seed)
    return pred + residual_scale * rng.normal(size=pred.shape)


def _param_grid(seed, shape=(4, 4), scale=0.9, name="p"):
    rng = np.random.default_rng(seed)
    return T.Parameter(rng.normal(size=shape) * scale, name)


def _mse_of(out, target):
    diff = T.sub(out, target)
    return T.mean_all(T.mul(diff, diff))


# --- operation checks -------------------------------------------------------


def _op_check(build, seed):
    p = _param_grid(seed)
    const = T.Tensor(np.random.default_rng(seed + 1).normal(size=(4, 4)))
    out_shape = build(p.value, const).data.shape
    target = np.random.default_rng(seed + 2).normal(size=out_shape)

    def f():
        return _mse_of(build(p.value, const), target)

    return f, [p]


def _dropout_check(seed):
    p = _param_grid(seed, shape=(3, 6))

    def f():
        rng = np.random.default_rng(404)  # frozen mask: same every call
        out = T.dropout(p.value, 0.25, training=True, rng=rng)
        return T.mean_all(T.mul(out, out))

    return f, [p]


def _mse_loss_check(seed):
    p = _param_grid(seed, shape=(3, 10))
    target = np.random.default_rng(seed + 2).normal(size=(3, 10))

    def f():
        return train.mse_loss(p.value, target)

    return f, [p]


_OP_BUILDERS = {
    "op:matmul": lambda v, c: T.matmul(c, v),
    "op:add": lambda v, c: T.add(v, c),
    "op:sub": lambda v, c: T.sub(c, v),
    "op:mul": lambda v, c: T.mul(v, c),
    "op:transpose": lambda v, c: T.matmul(c, T.transpose(v)),
    "op:reshape": lambda v, c: T.reshape(T.reshape(v, (2, 8)), (4, 4)),
    "op:concat_cols": lambda v, c: T.concat_cols(v, c),
    "op:slice_rows": lambda v, c: T.slice_rows(v, 1, 3),
    "op:softmax_rows": lambda v, c: T.softmax_rows(v),
    "op:hardswish": lambda v, c: T.hardswish(v),
    "op:leaky_relu": lambda v, c: T.leaky_relu(v, 0.2),
    "op:sigmoid": lambda v, c: T.sigmoid(v),
    "op:tanh": lambda v, c: T.tanh(v),
    "op:relu6": lambda v, c: T.relu6(v),
    "op:sum": lambda v, c: T.mul(c, T.sum_all(v)),
    "op:mean": lambda v, c: T.mul(c, T.mean_all(v)),
}


# --- layer checks -----------------------------------------------------------


def _gat_layer_check(seed=71, n_nodes=6, in_dim=4, out_dim=5, heads=2):
    rng = np.random.default_rng(seed)
    head_params = []
    for k in range(heads):
        w = T.Parameter(rng.normal(size=(in_dim, out_dim)) * 0.5, f"W{k}")
        a = T.Parameter(rng.normal(size=(2 * out_dim, 1)) * 0.5, f"a{k}")
        head_params.append((w, a))
    x = T.Tensor(rng.normal(size=(n_nodes, in_dim)))
    target = rng.normal(size=(n_nodes, out_dim)) * 0.3

    def f():
        return _mse_of(models.gat_layer(x, head_params, slope=0.2), target)

    return f, [p for pair in head_params for p in pair]


def _gcn_layer_check(seed=72, n_nodes=6, in_dim=4, out_dim=5):
    rng = np.random.default_rng(seed)
    w = T.Parameter(rng.normal(size=(in_dim, out_dim)) * 0.5, "W")
    raw = rng.uniform(0.0, 1.0, size=(n_nodes, n_nodes))
    raw = (raw + raw.T) / 2.0
    np.fill_diagonal(raw, 0.0)
    s = models.gcn_propagation(raw)
    x = T.Tensor(rng.normal(size=(n_nodes, in_dim)))
    target = rng.normal(size=(n_nodes, out_dim)) * 0.3

    def f():
        return _mse_of(models.gcn_layer(x, s, w), target)

    return f, [w]


def _lstm_cell_check(seed=76, n_rows=4, in_dim=3, hidden=4):
    rng = np.random.default_rng(seed)
    params = {}
    for gate in models.GATES:
        for suffix, shape in (
            ("Wx", (in_dim, hidden)),
            ("Wh", (hidden, hidden)),
            ("b", (1, hidden)),
        ):
            name = f"lstm.{gate}.{suffix}"
            params[name] = T.Parameter(rng.normal(size=shape) * 0.6, name)
    x = T.Tensor(rng.normal(size=(n_rows, in_dim)))
    target = rng.normal(size=(n_rows, hidden)) * 0.3

    def f():
        h = T.Tensor(np.zeros((n_rows, hidden)))
        c = T.Tensor(np.zeros((n_rows, hidden)))
        for _ in range(3):
            h, c = models.lstm_cell(x, h, c, params)
        return _mse_of(h, target)

    return f, list(params.values())


def _gat_lstm_cell_check(seed=84, n_nodes=5, hidden=4):
    cfg = models.ModelConfig(kind="gat_lstm", hidden=hidden, head_widths=(3, 3, 10))
    model = generic_point(models.init_model(cfg, seed), seed)
    rng = np.random.default_rng(seed + 7)
    seq = random_sequence(n_nodes, seed + 8)
    target = rng.normal(size=(n_nodes, hidden)) * 0.3
    cell_params = [p for name, p in model.params.items() if name.startswith("cell.")]

    def f():
        h = T.Tensor(np.zeros((n_nodes, hidden)))
        c = T.Tensor(np.zeros((n_nodes, hidden)))
        for graph in seq.graphs[:2]:
            h, c = models.gat_lstm_cell(
                T.Tensor(graph.features), h, c, model.params, cfg
            )
        return _mse_of(h, target)

    return f, cell_params


def _mlp_head_check(seed=74, n_rows=5, hidden=6):
    cfg = models.ModelConfig(kind="gcn", hidden=hidden, head_widths=(5, 4, 10))
    model = generic_point(models.init_model(cfg, seed), seed)
    rng = np.random.default_rng(seed + 7)
    x = T.Tensor(rng.normal(size=(n_rows, hidden)))
    head_params = [p for name, p in model.params.items() if name.startswith("head.")]
    target = models.mlp_head(x, model.params, p=0.0, training=False).data
    target = target + 0.3 * rng.normal(size=target.shape)

    def f():
        out = models.mlp_head(x, model.params, p=0.0, training=False)
        return _mse_of(out, target)

    return f, head_params


# --- full-model checks ------------------------------------------------------

# verification widths: the complete architecture at a size where every
# gradient element stays well above the h=1e-6 noise floor
_MODEL_ROW_SETTINGS = {
    "gat_lstm": {"hidden": 4, "head_widths": (3, 3, 10), "n_nodes": 4, "seed": 58},
    "gcn": {"hidden": 6, "head_widths": (5, 4, 10), "n_nodes": 6, "seed": 31},
    "lstm": {"hidden": 4, "head_widths": (3, 3, 10), "n_nodes": 8, "seed": 49},
}


def full_model_check(kind, n_nodes=None, seed=None, hidden=None, head_widths=None):
    row = _MODEL_ROW_SETTINGS[kind]
    n_nodes = n_nodes if n_nodes is not None else row["n_nodes"]
    seed = seed if seed is not None else row["seed"]
    cfg = models.ModelConfig(
        kind=kind,
        hidden=hidden if hidden is not None else row["hidden"],
        head_widths=head_widths if head_widths is not None else row["head_widths"],
    )
    model = generic_point(models.init_model(cfg, seed), seed)
    seq = random_sequence(n_nodes, seed + 30)
    target = _near_prediction_targets(model, seq, seed + 60)

    def f():
        return train.mse_loss(models.forward(model, seq), target)

    return f, model.parameters()


# --- suite ------------------------------------------------------------------


def suite_components():
    components = []
    for i, (name, build) in enumerate(_OP_BUILDERS.items()):
        components.append((name, lambda b=build, s=200 + i: _op_check(b, s)))
    components.append(("op:dropout", lambda: _dropout_check(88)))
    components.append(("op:mse_loss", lambda: _mse_loss_check(89)))
    components.append(("layer:gat", _gat_layer_check))
    components.append(("layer:gcn", _gcn_layer_check))
    components.append(("layer:lstm_cell", _lstm_cell_check))
    components.append(("layer:gat_lstm_cell", _gat_lstm_cell_check))
    components.append(("layer:mlp_head", _mlp_head_check))
    for kind in models.MODEL_KINDS:
        components.append((f"model:{kind}", lambda k=kind: full_model_check(k)))
    return components


def run_suite(only=None):
    """Run every registered check; returns CheckResults in suite order."""
    results = []
    for name, builder in suite_components():
        if only is not None and name not in only:
            continue
        f, params = builder()
        err = T.gradient_check(f, params, h=GRADCHECK_STEP)
        results.append(CheckResult(name=name, max_rel_error=err))
    return results

"""The proposed graph-attention LSTM and its two baselines.

Three architectures share one prediction head (48 -> 32 -> 24 -> 10 with
Hardswish between layers and dropout between the fully connected ones):

* ``gat_lstm`` - a recurrent cell over the five yearly graphs in which
  every LSTM gate's affine map is replaced by graph attention over the
  concatenation of current features and previous hidden state.
* ``gcn`` - non-temporal baseline: the five graphs collapse into one
  static graph with 8 features per node (lat, lon, elevation, five yearly
  thicknesses) pushed through a single renormalized graph convolution.
* ``lstm`` - non-geometric baseline: each node runs through a shared
  plain LSTM cell with no adjacency information at all.

Attention logits are fully learned; the haversine weights only enter the
attention path when ``edge_bias="log_weight"`` is selected, as an additive
log-weight bias for ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .flatfile import read_flat, write_flat
from .geo import N_TARGET_LAYERS, TemporalGraphSequence

MODEL_KINDS = ("gat_lstm", "gcn", "lstm")
GATES = ("input", "forget", "cell", "output")
EDGE_BIAS_MODES = ("none", "log_weight")
EDGE_BIAS_EPS = 1e-8

N_NODE_FEATURES = 4
N_STATIC_FEATURES = 8  # lat, lon, elev + five yearly thicknesses


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "gat_lstm"
    hidden: int = 48
    head_widths: tuple[int, ...] = (32, 24, 10)
    dropout_p: float = 0.2
    attention_heads: int = 1
    leaky_slope: float = 0.2
    edge_bias: str = "none"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.head_widths[-1] != N_TARGET_LAYERS:
            raise ConfigError(
                f"head must end in {N_TARGET_LAYERS} outputs (one per target year), "
                f"got {self.head_widths}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.hidden < 1 or self.attention_heads < 1:
            raise ConfigError("hidden width and attention_heads must be >= 1")
        if self.edge_bias not in EDGE_BIAS_MODES:
            raise ConfigError(
                f"edge_bias must be one of {EDGE_BIAS_MODES}, got {self.edge_bias!r}"
            )

    def to_dict(self):
        return {
            "kind": self.kind,
            "hidden": self.hidden,
            "head_widths": list(self.head_widths),
            "dropout_p": self.dropout_p,
            "attention_heads": self.attention_heads,
            "leaky_slope": self.leaky_slope,
            "edge_bias": self.edge_bias,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["head_widths"] = tuple(d.get("head_widths", (32, 24, 10)))
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(repr=False)  # name -> Parameter, in creation order

    def parameters(self):
        return list(self.params.values())


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(config: ModelConfig, seed: int) -> dict:
    """Glorot-uniform weights and attention vectors, zero biases except the
    forget gate's, which starts at 1.0 for stable long training runs."""
    rng = np.random.default_rng(seed)
    params = {}

    def add(name, values):
        params[name] = T.Parameter(np.asarray(values, dtype=np.float64), name)

    h = config.hidden
    if config.kind == "gat_lstm":
        in_dim = N_NODE_FEATURES + h
        for gate in GATES:
            for k in range(config.attention_heads):
                add(f"cell.{gate}.h{k}.W", _glorot(rng, in_dim, h, (in_dim, h)))
                add(f"cell.{gate}.h{k}.a", _glorot(rng, 2 * h, 1, (2 * h, 1)))
            bias = np.full((1, h), 1.0) if gate == "forget" else np.zeros((1, h))
            add(f"cell.{gate}.bias", bias)
    elif config.kind == "gcn":
        add("gcn.W", _glorot(rng, N_STATIC_FEATURES, h, (N_STATIC_FEATURES, h)))
    else:  # lstm
        for gate in GATES:
            add(f"lstm.{gate}.Wx", _glorot(rng, N_NODE_FEATURES, h, (N_NODE_FEATURES, h)))
            add(f"lstm.{gate}.Wh", _glorot(rng, h, h, (h, h)))
            bias = np.full((1, h), 1.0) if gate == "forget" else np.zeros((1, h))
            add(f"lstm.{gate}.b", bias)

    widths = (h,) + tuple(config.head_widths)
    for i in range(len(config.head_widths)):
        fan_in, fan_out = widths[i], widths[i + 1]
        add(f"head.fc{i + 1}.W", _glorot(rng, fan_in, fan_out, (fan_in, fan_out)))
        add(f"head.fc{i + 1}.b", np.zeros((1, fan_out)))
    return params


def init_model(config: ModelConfig, seed: int) -> Model:
    return Model(config=config, params=init_parameters(config, seed))


# ---------------------------------------------------------------------------
# layers


def gat_layer(x, head_params, slope, edge_bias=None, attn_sink=None):
    """Single graph-attention layer over a fully connected graph.

    `head_params` is a list of (W, a) parameter pairs, one per head; head
    outputs are averaged. Attention logits use the standard split of the
    attention vector: e_ij = leaky_relu(a_src . h_i + a_dst . h_j), every
    ordered pair including self. `edge_bias`, when given, is a constant
    (N, N) logit offset.
    """
    outs = []
    for w_param, a_param in head_params:
        out_dim = w_param.value.data.shape[1]
        if a_param.value.data.shape != (2 * out_dim, 1):
            raise ShapeError(
                f"attention vector {a_param.name!r} must be ({2 * out_dim}, 1), "
                f"got {a_param.value.data.shape}"
            )
        h = T.matmul(x, w_param.value)
        src = T.matmul(h, T.slice_rows(a_param.value, 0, out_dim))
        dst = T.matmul(h, T.slice_rows(a_param.value, out_dim, 2 * out_dim))
        logits = T.leaky_relu(T.add(src, T.transpose(dst)), slope)
        if edge_bias is not None:
            logits = T.add(logits, edge_bias)
        alpha = T.softmax_rows(logits)
        if attn_sink is not None:
            attn_sink.append(alpha.data)
        outs.append(T.matmul(alpha, h))
    if len(outs) == 1:
        return outs[0]
    acc = outs[0]
    for o in outs[1:]:
        acc = T.add(acc, o)
    return T.mul(acc, 1.0 / len(outs))


def log_weight_bias(adj_weights: np.ndarray) -> np.ndarray:
    """Additive attention-logit bias ln(A_ij + eps) off-diagonal, 0 for self."""
    bias = np.log(adj_weights + EDGE_BIAS_EPS)
    np.fill_diagonal(bias, 0.0)
    return bias


def gcn_propagation(adj_weights: np.ndarray) -> np.ndarray:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2 with unit self-loops."""
    a_hat = adj_weights + np.eye(adj_weights.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def gcn_layer(x, propagation: np.ndarray, w_param):
    return T.matmul(T.Tensor(propagation), T.matmul(x, w_param.value))


def lstm_cell(x, h_prev, c_prev, params, prefix="lstm"):
    """Standard LSTM step; rows of x are independent instances."""
    gates = {}
    for gate in GATES:
        pre = T.add(
            T.add(
                T.matmul(x, params[f"{prefix}.{gate}.Wx"].value),
                T.matmul(h_prev, params[f"{prefix}.{gate}.Wh"].value),
            ),
            params[f"{prefix}.{gate}.b"].value,
        )
        gates[gate] = pre
    i = T.sigmoid(gates["input"])
    f = T.sigmoid(gates["forget"])
    o = T.sigmoid(gates["output"])
    c_tilde = T.tanh(gates["cell"])
    c = T.add(T.mul(f, c_prev), T.mul(i, c_tilde))
    h = T.mul(o, T.tanh(c))
    return h, c


def gat_lstm_cell(x, h_prev, c_prev, params, config, edge_bias=None, attn_sink=None):
    """LSTM gate equations with every affine map replaced by graph attention
    over the concatenation of current features and previous hidden state."""
    z = T.concat_cols(x, h_prev)
    gates = {}
    for gate in GATES:
        heads = [
            (params[f"cell.{gate}.h{k}.W"], params[f"cell.{gate}.h{k}.a"])
            for k in range(config.attention_heads)
        ]
        agg = gat_layer(z, heads, config.leaky_slope, edge_bias, attn_sink)
        gates[gate] = T.add(agg, params[f"cell.{gate}.bias"].value)
    i = T.sigmoid(gates["input"])
    f = T.sigmoid(gates["forget"])
    o = T.sigmoid(gates["output"])
    c_tilde = T.tanh(gates["cell"])
    c = T.add(T.mul(f, c_prev), T.mul(i, c_tilde))
    h = T.mul(o, T.tanh(c))
    return h, c


def mlp_head(h, params, p, training, rng=None):
    """48 -> 32 -> 24 -> 10 affine chain; Hardswish after the recurrent layer
    and each non-final affine, dropout between the fully connected layers,
    final layer linear so predictions can reach any pixel thickness."""
    x = T.hardswish(h)
    n_layers = len([k for k in params if k.startswith("head.fc") and k.endswith(".W")])
    for i in range(1, n_layers + 1):
        x = T.add(T.matmul(x, params[f"head.fc{i}.W"].value), params[f"head.fc{i}.b"].value)
        if i < n_layers:
            x = T.hardswish(x)
            x = T.dropout(x, p, training, rng)
    return x


# ---------------------------------------------------------------------------
# full forward passes


def consolidated_features(seq: TemporalGraphSequence) -> np.ndarray:
    """Static 8-feature layout for the non-temporal baseline:
    lat, lon, elevation, then the five yearly thicknesses in order."""
    base = seq.graphs[0].features[:, :3]
    thickness = np.column_stack([g.features[:, 3] for g in seq.graphs])
    return np.concatenate([base, thickness], axis=1)


def forward(model: Model, seq: TemporalGraphSequence, training=False, rng=None, attn_sink=None):
    """Predict the (N, 10) target matrix for one sequence."""
    config = model.config
    params = model.params
    n = seq.n_nodes
    if config.kind == "gat_lstm":
        edge_bias = (
            log_weight_bias(seq.adjacency.weights)
            if config.edge_bias == "log_weight"
            else None
        )
        h = T.Tensor(np.zeros((n, config.hidden)))
        c = T.Tensor(np.zeros((n, config.hidden)))
        for graph in seq.graphs:
            x = T.Tensor(graph.features)
            h, c = gat_lstm_cell(x, h, c, params, config, edge_bias, attn_sink)
        return mlp_head(h, params, config.dropout_p, training, rng)
    if config.kind == "gcn":
        propagation = gcn_propagation(seq.adjacency.weights)
        x = T.Tensor(consolidated_features(seq))
        hidden = gcn_layer(x, propagation, params["gcn.W"])
        return mlp_head(hidden, params, config.dropout_p, training, rng)
    if config.kind == "lstm":
        h = T.Tensor(np.zeros((n, config.hidden)))
        c = T.Tensor(np.zeros((n, config.hidden)))
        for graph in seq.graphs:
            h, c = lstm_cell(T.Tensor(graph.features), h, c, params)
        return mlp_head(h, params, config.dropout_p, training, rng)
    raise ContractError(f"no forward path for model kind {config.kind!r}")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "icegraph-checkpoint-v1"


def save_checkpoint(model: Model, seed: int, path, fmt: str = "json") -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": seed,
        "parameter_names": list(model.params),
    }
    if fmt == "json":
        payload = dict(meta)
        payload["parameters"] = {
            name: {"shape": list(p.value.data.shape), "values": p.value.data.ravel().tolist()}
            for name, p in model.params.items()
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
        )
    elif fmt == "flat":
        write_flat(path, meta, {name: p.value.data for name, p in model.params.items()})
    else:
        raise ConfigError(f"checkpoint format must be 'json' or 'flat', got {fmt!r}")


def load_checkpoint(path) -> tuple[Model, int]:
    path = Path(path)
    head = path.read_bytes()[:9]
    if head == b"ICEGFLAT1":
        meta, arrays = read_flat(path)
        values = {name: arrays[name] for name in meta["parameter_names"]}
    else:
        payload = json.loads(path.read_text())
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unknown checkpoint format {payload.get('format')!r}")
        meta = payload
        values = {
            name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["parameters"].items()
        }
    config = ModelConfig.from_dict(meta["config"])
    params = {name: T.Parameter(values[name], name) for name in meta["parameter_names"]}
    return Model(config=config, params=params), meta["seed"]

"""The optimization protocol: MSE, Adam with weight decay, halving schedule.

One optimizer step per echogram sequence (batch size 1), 500 epochs, the
learning rate starting at 0.01 and halving every 125 epochs. Weight decay
defaults to the coupled form (decay added to the gradient before the Adam
moments); a decoupled switch exists. The validation split is scored every
epoch and the checkpoint policy picks either the best-validation epoch
(default) or the final one.

Every random choice (init, per-epoch shuffle, dropout) derives from the
master seed through fixed role offsets, so a trial is a pure function of
(config, prepared data).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate, models
from . import tensor as T
from .errors import ConfigError, NumericalError, ShapeError

CHECKPOINT_POLICIES = ("best_val", "final")

# master-seed fan-out: seed + role offset + stride * trial + model index
_ROLE_OFFSETS = {"init": 10_000, "shuffle": 20_000, "dropout": 30_000}
_TRIAL_STRIDE = 100


def derive_seed(master_seed: int, role: str, trial: int, model_index: int = 0) -> int:
    if role not in _ROLE_OFFSETS:
        raise ConfigError(f"unknown seed role {role!r}")
    return master_seed + _ROLE_OFFSETS[role] + _TRIAL_STRIDE * trial + model_index


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr0: float = 0.01
    halve_every: int = 125
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    master_seed: int = 0
    checkpoint_policy: str = "best_val"
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if min(self.lr0, self.halve_every, self.eps) <= 0:
            raise ConfigError("lr0, halve_every, and eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ConfigError(
                f"checkpoint_policy must be one of {CHECKPOINT_POLICIES}, "
                f"got {self.checkpoint_policy!r}"
            )

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "lr0": self.lr0,
            "halve_every": self.halve_every,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "master_seed": self.master_seed,
            "checkpoint_policy": self.checkpoint_policy,
            "decoupled_weight_decay": self.decoupled_weight_decay,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def mse_loss(pred, target):
    """Mean over all entries of the squared difference; differentiable."""
    target_data = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if pred.data.shape != target_data.shape:
        raise ShapeError(
            f"mse_loss: shape mismatch {pred.data.shape} vs {target_data.shape}"
        )
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * 0.5 ** (epoch // config.halve_every)


class AdamState:
    """First/second moments per parameter plus the shared step count."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value.data) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in params}
        self.t = 0


def adam_step(params, state: AdamState, lr: float, config: TrainConfig) -> None:
    """One Adam update from the gradients currently held by the parameters.

    Coupled decay folds wd*theta into the gradient before the moment
    updates; decoupled mode applies lr*wd*theta directly to the weights.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
        theta = p.value.data
        if config.weight_decay and not config.decoupled_weight_decay:
            g = g + config.weight_decay * theta
        m = state.m[p.name] = config.beta1 * state.m[p.name] + (1.0 - config.beta1) * g
        v = state.v[p.name] = config.beta2 * state.v[p.name] + (1.0 - config.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay and config.decoupled_weight_decay:
            update = update + lr * config.weight_decay * theta
        p.assign(theta - update)


@dataclass
class TrialResult:
    model_kind: str
    trial: int
    checkpoint: dict = field(repr=False)  # parameter name -> ndarray
    train_loss: list[float] = field(repr=False)
    val_rmse: list[float] = field(repr=False)
    lr_curve: list[float] = field(repr=False)
    selected_epoch: int = 0
    steps: int = 0


def _score_split(model, prepared, ids):
    preds = [models.forward(model, prepared.sequences[rid]).data for rid in ids]
    targets = [prepared.sequences[rid].targets for rid in ids]
    return np.concatenate(preds), np.concatenate(targets)


def run_trial(model_config: models.ModelConfig, prepared, config: TrainConfig) -> TrialResult:
    """Train one (model, trial) pair through the full protocol.

    Deterministic: identical (configs, prepared data) reproduce identical
    loss curves and checkpoints bit for bit.
    """
    split = prepared.split
    if not split.train or not split.val:
        raise ConfigError(f"trial {prepared.trial}: empty train or validation split")
    trial = prepared.trial
    model_index = models.MODEL_KINDS.index(model_config.kind)
    seed = config.master_seed
    model = models.init_model(
        model_config, derive_seed(seed, "init", trial, model_index)
    )
    params = model.parameters()
    state = AdamState(params)
    dropout_rng = np.random.default_rng(
        derive_seed(seed, "dropout", trial, model_index)
    )
    shuffle_base = derive_seed(seed, "shuffle", trial, model_index)

    train_ids = list(split.train)
    train_curve = []
    val_curve = []
    lr_curve = []
    best_val = np.inf
    best_epoch = 0
    best_params = None
    steps = 0

    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, config)
        order = np.random.default_rng(shuffle_base + 1_000_000 * epoch).permutation(
            len(train_ids)
        )
        epoch_losses = np.empty(len(order))
        for i, idx in enumerate(order):
            rid = train_ids[idx]
            seq = prepared.sequences[rid]
            T.zero_grads(params)
            tape = T.Tape()
            with tape:
                pred = models.forward(model, seq, training=True, rng=dropout_rng)
                loss = mse_loss(pred, seq.targets)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, record {rid!r}"
                )
            T.backward(loss, tape)
            adam_step(params, state, lr, config)
            steps += 1
            epoch_losses[i] = value
        train_curve.append(float(epoch_losses.mean()))
        lr_curve.append(lr)

        pred, target = _score_split(model, prepared, split.val)
        _, val_total = evaluate.rmse(pred, target)
        val_curve.append(val_total)
        if config.checkpoint_policy == "best_val" and val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_params = {name: p.value.data.copy() for name, p in model.params.items()}

    if config.checkpoint_policy == "final" or best_params is None:
        best_epoch = config.epochs - 1
        best_params = {name: p.value.data.copy() for name, p in model.params.items()}

    return TrialResult(
        model_kind=model_config.kind,
        trial=trial,
        checkpoint=best_params,
        train_loss=train_curve,
        val_rmse=val_curve,
        lr_curve=lr_curve,
        selected_epoch=best_epoch,
        steps=steps,
    )


def restore_model(model_config: models.ModelConfig, checkpoint: dict) -> models.Model:
    params = {
        name: T.Parameter(values.copy(), name) for name, values in checkpoint.items()
    }
    return models.Model(config=model_config, params=params)


def evaluate_on_test(model, prepared) -> evaluate.TrialReport:
    pred, target = _score_split(model, prepared, prepared.split.test)
    return evaluate.make_trial_report(
        model.config.kind, prepared.trial, pred, target
    )


def write_training_log(path, result: TrialResult) -> None:
    lines = ["epoch,train_loss,val_rmse,lr"]
    for e, (tl, vr, lr) in enumerate(
        zip(result.train_loss, result.val_rmse, result.lr_curve)
    ):
        lines.append(f"{e},{tl!r},{vr!r},{lr!r}")
    Path(path).write_text("\n".join(lines) + "\n")

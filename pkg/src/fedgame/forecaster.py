"""Per-client quantile-regression forecasters with explicit gradients.

Two small architectures share one flat-parameter contract: an MLP with
tanh hidden layers (the default for tests and desk-scale runs) and a
stacked LSTM, both ending in a dense output layer of width
``horizon * len(quantiles)``.  That final layer is flagged
``output_head`` in the layer registry and is the only slice exchanged
for personalized aggregation.

Gradients come from the internal reverse-mode tape
(:mod:`fedgame.autodiff`); no external ML framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NumericError, StructuralError, UsageError
from .params import LayerSpec, ParameterVector

ARCHS = ("mlp", "lstm")


@dataclass(frozen=True)
class ForecasterConfig:
    """Architecture and local-training settings for one client model."""

    history_len: int
    horizon: int
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    hidden_sizes: tuple[int, ...] = (32,)
    arch: str = "mlp"
    local_lr: float = 0.0005
    local_epochs: int = 1
    prox_mu: float = 0.2
    batch_size: int = 32
    features: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        object.__setattr__(self, "hidden_sizes", tuple(int(w) for w in self.hidden_sizes))
        if self.history_len < 1 or self.horizon < 1:
            raise ConfigError("history_len and horizon must be >= 1")
        if not self.quantiles or any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ConfigError("quantiles must lie strictly inside (0, 1)")
        if any(b >= a for a, b in zip(self.quantiles[1:], self.quantiles)):
            raise ConfigError("quantiles must be strictly increasing")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "lstm" and not self.hidden_sizes:
            raise ConfigError("lstm arch needs at least one hidden size")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be >= 0")
        if self.local_lr <= 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_lr, local_epochs and batch_size must be positive")
        if self.features < 1:
            raise ConfigError("features must be >= 1")

    @property
    def output_dim(self) -> int:
        return self.horizon * len(self.quantiles)


def layer_plan(cfg: ForecasterConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every parameter block, in storage order.

    LSTM gate pre-activations are packed as 4*H columns in i, f, g, o
    order (input, forget, cell, output).
    """
    plan: list[tuple[str, tuple[int, ...], str]] = []
    if cfg.arch == "mlp":
        in_dim = cfg.history_len * cfg.features
        for i, width in enumerate(cfg.hidden_sizes):
            plan.append((f"hidden{i}.w", (in_dim, width), "dense"))
            plan.append((f"hidden{i}.b", (width,), "dense"))
            in_dim = width
    else:
        in_dim = cfg.features
        for i, width in enumerate(cfg.hidden_sizes):
            plan.append((f"lstm{i}.wx", (in_dim, 4 * width), "recurrent"))
            plan.append((f"lstm{i}.wh", (width, 4 * width), "recurrent"))
            plan.append((f"lstm{i}.b", (4 * width,), "recurrent"))
            in_dim = width
    plan.append(("out.w", (in_dim, cfg.output_dim), "output_head"))
    plan.append(("out.b", (cfg.output_dim,), "output_head"))
    return plan


def build_spec(cfg: ForecasterConfig) -> tuple[LayerSpec, ...]:
    spec = []
    offset = 0
    for name, shape, kind in layer_plan(cfg):
        length = int(np.prod(shape))
        spec.append(LayerSpec(name=name, offset=offset, length=length, kind=kind))
        offset += length
    return tuple(spec)


@dataclass
class ForecasterModel:
    """Flat parameters plus the config that interprets them."""

    params: ParameterVector
    config: ForecasterConfig

    def __post_init__(self) -> None:
        if self.params.spec != build_spec(self.config):
            raise StructuralError("parameter spec does not match the configured architecture")

    @property
    def spec(self) -> tuple[LayerSpec, ...]:
        return self.params.spec

    def with_params(self, values: np.ndarray) -> "ForecasterModel":
        return ForecasterModel(ParameterVector(values, self.params.spec), self.config)


def _fan_in(cfg: ForecasterConfig, name: str, shape: tuple[int, ...]) -> int:
    """Input width of a block; LSTM blocks all scale by their hidden size."""
    if name.startswith("lstm"):
        return shape[0] if name.endswith(".wh") else shape[-1] // 4
    if name.endswith(".b"):
        base = name[: -len(".b")]
        for other, other_shape, _ in layer_plan(cfg):
            if other == f"{base}.w":
                return other_shape[0]
    return shape[0]


def init_forecaster(cfg: ForecasterConfig, rng: np.random.Generator) -> ForecasterModel:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in) per block."""
    chunks = []
    for name, shape, _ in layer_plan(cfg):
        s = 1.0 / np.sqrt(_fan_in(cfg, name, shape))
        chunks.append(rng.uniform(-s, s, size=int(np.prod(shape))))
    return ForecasterModel(ParameterVector(np.concatenate(chunks), build_spec(cfg)), cfg)


def _param_tensors(model: ForecasterModel) -> dict[str, Tensor]:
    out = {}
    values = model.params.values
    for (name, shape, _), spec in zip(layer_plan(model.config), model.params.spec):
        out[name] = Tensor(values[spec.offset : spec.stop].reshape(shape))
    return out


def _as_batch(windows: np.ndarray, cfg: ForecasterConfig) -> np.ndarray:
    """Coerce windows to (batch, history_len, features)."""
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim == 1:
        w = w[np.newaxis, :, np.newaxis]
    elif w.ndim == 2:
        # either one (h, f) window or an (n, h) univariate batch
        if w.shape == (cfg.history_len, cfg.features) and cfg.features > 1:
            w = w[np.newaxis, :, :]
        elif w.shape[1] == cfg.history_len and cfg.features == 1:
            w = w[:, :, np.newaxis]
        else:
            w = w[np.newaxis, :, :]
    if w.shape[1:] != (cfg.history_len, cfg.features):
        raise StructuralError(
            f"window batch has shape {w.shape}, expected (*, {cfg.history_len}, {cfg.features})"
        )
    return w


def _forward_graph(tensors: dict[str, Tensor], cfg: ForecasterConfig, batch: np.ndarray) -> Tensor:
    """Batched forward pass; returns (batch, output_dim) predictions."""
    n = batch.shape[0]
    if cfg.arch == "mlp":
        a = Tensor(batch.reshape(n, -1))
        for i in range(len(cfg.hidden_sizes)):
            a = (a @ tensors[f"hidden{i}.w"] + tensors[f"hidden{i}.b"]).tanh()
        return a @ tensors["out.w"] + tensors["out.b"]

    seq = [Tensor(batch[:, t, :]) for t in range(cfg.history_len)]
    for i, width in enumerate(cfg.hidden_sizes):
        wx, wh, b = tensors[f"lstm{i}.wx"], tensors[f"lstm{i}.wh"], tensors[f"lstm{i}.b"]
        h = Tensor(np.zeros((n, width)))
        c = Tensor(np.zeros((n, width)))
        outputs = []
        for x_t in seq:
            pre = x_t @ wx + h @ wh + b
            gi = pre[:, 0 * width : 1 * width].sigmoid()
            gf = pre[:, 1 * width : 2 * width].sigmoid()
            gg = pre[:, 2 * width : 3 * width].tanh()
            go = pre[:, 3 * width : 4 * width].sigmoid()
            c = gf * c + gi * gg
            h = go * c.tanh()
            outputs.append(h)
        seq = outputs
    return seq[-1] @ tensors["out.w"] + tensors["out.b"]


def forward(model: ForecasterModel, window: np.ndarray) -> np.ndarray:
    """Quantile predictions for one window, shaped (horizon, n_quantiles).

    Deterministic in (params, window); no state survives between calls.
    """
    cfg = model.config
    batch = _as_batch(window, cfg)
    if batch.shape[0] != 1:
        raise StructuralError("forward takes a single window; use forward_batch for batches")
    pred = _forward_graph(_param_tensors(model), cfg, batch).data
    if not np.all(np.isfinite(pred)):
        raise NumericError("forward produced non-finite predictions")
    return pred.reshape(cfg.horizon, len(cfg.quantiles))


def forward_batch(model: ForecasterModel, windows: np.ndarray) -> np.ndarray:
    """Predictions for many windows, shaped (n, horizon, n_quantiles)."""
    cfg = model.config
    batch = _as_batch(windows, cfg)
    pred = _forward_graph(_param_tensors(model), cfg, batch).data
    return pred.reshape(batch.shape[0], cfg.horizon, len(cfg.quantiles))


def _pinball_weights(diff: np.ndarray, q_flat: np.ndarray) -> np.ndarray:
    """Piecewise slope of the pinball loss w.r.t. the prediction.

    diff = pred - target.  Where diff > 0 (over-prediction) the slope is
    1 - q; where diff <= 0 it is -q, which makes the tie at diff == 0
    take the y >= yhat branch.
    """
    return np.where(diff > 0, 1.0 - q_flat, -q_flat)


def pinball_loss(pred: np.ndarray, target: np.ndarray, quantiles: Sequence[float]) -> float:
    """Mean asymmetric deviation over steps and quantiles; >= 0."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    q = np.asarray(quantiles, dtype=np.float64)
    if pred.shape != (target.size, q.size):
        raise StructuralError(
            f"pred has shape {pred.shape}, expected ({target.size}, {q.size})"
        )
    diff = pred - target[:, np.newaxis]
    return float(np.mean(_pinball_weights(diff, q[np.newaxis, :]) * diff))


def _batch_loss_graph(
    model: ForecasterModel, windows: np.ndarray, targets: np.ndarray
) -> tuple[Tensor, dict[str, Tensor]]:
    cfg = model.config
    batch = _as_batch(windows, cfg)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[np.newaxis, :]
    if targets.shape != (batch.shape[0], cfg.horizon):
        raise StructuralError(
            f"targets have shape {targets.shape}, expected ({batch.shape[0]}, {cfg.horizon})"
        )
    tensors = _param_tensors(model)
    pred = _forward_graph(tensors, cfg, batch)
    nq = len(cfg.quantiles)
    target_flat = np.repeat(targets, nq, axis=1)
    q_flat = np.tile(np.asarray(cfg.quantiles), cfg.horizon)
    diff = pred - target_flat
    weights = _pinball_weights(diff.data, q_flat[np.newaxis, :])
    loss = (diff * weights).mean()
    return loss, tensors


def _flatten_grads(tensors: dict[str, Tensor], cfg: ForecasterConfig) -> np.ndarray:
    return np.concatenate([tensors[name].grad.reshape(-1) for name, _, _ in layer_plan(cfg)])


def task_loss(model: ForecasterModel, windows: np.ndarray, targets: np.ndarray) -> float:
    """Mean pinball loss of the model on a batch."""
    loss, _ = _batch_loss_graph(model, windows, targets)
    return float(loss.data)


def task_gradient(model: ForecasterModel, windows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean pinball loss w.r.t. all parameters, flat."""
    if np.asarray(windows).size == 0:
        raise UsageError("task_gradient needs a non-empty batch")
    loss, tensors = _batch_loss_graph(model, windows, targets)
    loss.backward()
    return _flatten_grads(tensors, model.config)


def task_loss_and_gradient(
    model: ForecasterModel, windows: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    loss, tensors = _batch_loss_graph(model, windows, targets)
    loss.backward()
    return float(loss.data), _flatten_grads(tensors, model.config)


def fedprox_gradient(
    model: ForecasterModel,
    windows: np.ndarray,
    targets: np.ndarray,
    global_params: ParameterVector,
    mu: float,
) -> np.ndarray:
    """Gradient of task loss + (mu/2) * |w - w_global|^2."""
    if model.params.spec != global_params.spec:
        raise StructuralError("model and global parameters use different layer specs")
    grad = task_gradient(model, windows, targets)
    return grad + mu * (model.params.values - global_params.values)


def local_train(
    model: ForecasterModel,
    data,
    global_params: ParameterVector,
    cfg: ForecasterConfig,
    rng: np.random.Generator,
) -> tuple[ForecasterModel, float]:
    """Mini-batch SGD on the proximally regularized objective.

    ``data`` must expose ``inputs`` (n, history_len[, features]) and
    ``targets`` (n, horizon).  Runs ``cfg.local_epochs`` passes; batch
    order is drawn from the client's own rng stream.  The proximal pull
    mu * (w - w_global) is added to every mini-batch gradient exactly.
    Returns the trained model and the mean mini-batch task loss.
    """
    inputs = np.asarray(data.inputs, dtype=np.float64)
    targets = np.asarray(data.targets, dtype=np.float64)
    n = inputs.shape[0]
    if n == 0:
        raise UsageError("local_train called with an empty dataset")
    if model.params.spec != global_params.spec:
        raise StructuralError("model and global parameters use different layer specs")

    values = model.params.values.copy()
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            current = model.with_params(values)
            loss, grad = task_loss_and_gradient(current, inputs[idx], targets[idx])
            if not np.isfinite(loss):
                raise NumericError("non-finite training loss")
            losses.append(float(loss))
            grad += cfg.prox_mu * (values - global_params.values)
            values = values - cfg.local_lr * grad
            if not np.all(np.isfinite(values)):
                raise NumericError("non-finite parameters after gradient step")
    return model.with_params(values), float(np.mean(losses))

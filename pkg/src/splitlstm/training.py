"""Losses, backpropagation through time, Adam, and the training loops.

The distillation loss blends the true-label MSE with an MSE against the
frozen teacher's predictions:

    loss = alpha * mse(y, student) + (1 - alpha) * mse(teacher, student)

Gradients are exact analytic BPTT over all window timesteps; the L2
penalty (no 1/2 factor) applies to weight matrices only, never biases.
All loop state is float64 and every source of randomness is seeded, so a
run is bit-reproducible from (seed, config, dataset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ForecastDataset
from .model import (
    DENSE,
    LSTM,
    DenseWeights,
    LayerSpec,
    LSTMWeights,
    ModelSpec,
    Parameters,
    ShapeError,
    init_params,
    sigmoid,
    validate_forecast_model,
)

MSE_LOSS = "MSE"
KD_LOSS = "KD"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 32
    learning_rate: float = 0.001
    l2_lambda: float = 0.001
    alpha: float = 0.1
    seed: int = 0
    loss_kind: str = MSE_LOSS

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.loss_kind not in (MSE_LOSS, KD_LOSS):
            raise ValueError(f"unknown loss kind: {self.loss_kind!r}")


def teacher_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(batch_size=8, epochs=32, learning_rate=0.001,
                       l2_lambda=0.001, seed=seed, loss_kind=MSE_LOSS)


def student_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(batch_size=16, epochs=32, learning_rate=0.001,
                       l2_lambda=0.01, alpha=0.1, seed=seed, loss_kind=KD_LOSS)


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    val_r2: float


# ---------------------------------------------------------------------------
# losses and metrics

def mse(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ShapeError("mse: length mismatch")
    if y.size == 0:
        raise ValueError("mse: empty input")
    return float(np.mean((y - yhat) ** 2))


def kd_loss(y, yhat_student, w_teacher, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return alpha * mse(y, yhat_student) + (1.0 - alpha) * mse(w_teacher, yhat_student)


def metrics(y, yhat) -> tuple[float, float, float]:
    """(mse, mae, r2); r2 is NaN when y is constant."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise ShapeError("metrics: inputs must be equal-length and nonempty")
    residual = y - yhat
    m = float(np.mean(residual**2))
    a = float(np.mean(np.abs(residual)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = math.nan if ss_tot == 0.0 else 1.0 - float(np.sum(residual**2)) / ss_tot
    return m, a, r2


# ---------------------------------------------------------------------------
# batched forward/backward

def _lstm_forward_batch(layer: LayerSpec, w: LSTMWeights, X):
    """X [B, T, n] -> (output, cache). Output is [B, T, h] or [B, h]."""
    B, T, _ = X.shape
    h_dim = layer.output_size
    A_in = X @ w.W.T  # input projections for every timestep at once
    I = np.empty((B, T, h_dim))
    F = np.empty_like(I)
    G = np.empty_like(I)
    O = np.empty_like(I)
    C = np.empty_like(I)
    H = np.empty_like(I)
    h = np.zeros((B, h_dim))
    c = np.zeros((B, h_dim))
    for t in range(T):
        a = A_in[:, t] + h @ w.U.T + w.b
        i = sigmoid(a[:, :h_dim])
        f = sigmoid(a[:, h_dim : 2 * h_dim])
        g = np.tanh(a[:, 2 * h_dim : 3 * h_dim])
        o = sigmoid(a[:, 3 * h_dim :])
        c = f * c + i * g
        h = o * np.tanh(c)
        I[:, t], F[:, t], G[:, t], O[:, t], C[:, t], H[:, t] = i, f, g, o, c, h
    cache = (X, I, F, G, O, C, H)
    return (H if layer.return_sequences else H[:, -1]), cache


def _lstm_backward_batch(layer: LayerSpec, w: LSTMWeights, cache, d_out):
    X, I, F, G, O, C, H = cache
    B, T, _ = X.shape
    h_dim = layer.output_size
    C_prev = np.concatenate([np.zeros((B, 1, h_dim)), C[:, :-1]], axis=1)
    TC = np.tanh(C)
    dA = np.empty((B, T, 4 * h_dim))
    dh = np.zeros((B, h_dim))
    dc = np.zeros((B, h_dim))
    for t in reversed(range(T)):
        if layer.return_sequences:
            dht = dh + d_out[:, t]
        else:
            dht = dh + d_out if t == T - 1 else dh
        i, f, g, o = I[:, t], F[:, t], G[:, t], O[:, t]
        tc = TC[:, t]
        dct = dc + dht * o * (1.0 - tc * tc)
        dA[:, t, :h_dim] = (dct * g) * i * (1.0 - i)
        dA[:, t, h_dim : 2 * h_dim] = (dct * C_prev[:, t]) * f * (1.0 - f)
        dA[:, t, 2 * h_dim : 3 * h_dim] = (dct * i) * (1.0 - g * g)
        dA[:, t, 3 * h_dim :] = (dht * tc) * o * (1.0 - o)
        dh = dA[:, t] @ w.U
        dc = dct * f
    H_prev = np.concatenate([np.zeros((B, 1, h_dim)), H[:, :-1]], axis=1)
    grads = LSTMWeights(
        W=np.einsum("btk,btn->kn", dA, X),
        U=np.einsum("btk,bth->kh", dA, H_prev),
        b=dA.sum(axis=(0, 1)),
    )
    return dA @ w.W, grads


def _dense_forward_batch(layer: LayerSpec, w: DenseWeights, V):
    pre = V @ w.W.T + w.b  # works for [B, n] and [B, T, n]
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return out, (V, pre)


def _dense_backward_batch(layer: LayerSpec, w: DenseWeights, cache, d_out):
    V, pre = cache
    d_pre = d_out * (pre > 0.0) if layer.activation == "relu" else d_out
    if V.ndim == 3:  # time-distributed
        dW = np.einsum("bto,btn->on", d_pre, V)
        db = d_pre.sum(axis=(0, 1))
    else:
        dW = d_pre.T @ V
        db = d_pre.sum(axis=0)
    return d_pre @ w.W, DenseWeights(W=dW, b=db)


def _forward_batch(spec: ModelSpec, params: Parameters, X):
    caches = []
    value = X
    for layer, w in zip(spec.layers, params):
        if layer.kind == LSTM:
            value, cache = _lstm_forward_batch(layer, w, value)
        else:
            value, cache = _dense_forward_batch(layer, w, value)
        caches.append(cache)
    return value, caches


def predict(spec: ModelSpec, params: Parameters, x):
    """Batched forecasts for x of shape [B, T] or [B, T, features]."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[1:] != (spec.window_length, spec.feature_count):
        raise ShapeError(f"bad window batch shape {x.shape}")
    out, _ = _forward_batch(spec, params, x)
    if out.ndim != 2 or out.shape[1] != 1:
        raise ShapeError("model does not produce a scalar forecast")
    return out[:, 0]


def _loss_and_dyhat(y, yhat, loss_kind, teacher_outputs, alpha):
    n = y.size
    if loss_kind == MSE_LOSS:
        loss = float(np.mean((y - yhat) ** 2))
        d = 2.0 * (yhat - y) / n
    else:
        loss = kd_loss(y, yhat, teacher_outputs, alpha)
        d = 2.0 * (alpha * (yhat - y) + (1.0 - alpha) * (yhat - teacher_outputs)) / n
    return loss, d


def _weight_matrices(lw):
    """Arrays subject to L2 and pruning: kernels, never biases."""
    if isinstance(lw, LSTMWeights):
        return (lw.W, lw.U)
    return (lw.W,)


def batch_loss(spec, params, batch, loss_kind, teacher_outputs=None,
               alpha: float = 0.1, l2_lambda: float = 0.0) -> float:
    x, y = batch
    yhat = predict(spec, params, x)
    loss, _ = _loss_and_dyhat(np.asarray(y, dtype=float), yhat,
                              loss_kind, teacher_outputs, alpha)
    if l2_lambda:
        loss += l2_lambda * sum(
            float(np.sum(w * w)) for lw in params for w in _weight_matrices(lw)
        )
    return loss


def backward(spec: ModelSpec, params: Parameters, batch, loss_kind,
             teacher_outputs=None, alpha: float = 0.1,
             l2_lambda: float = 0.0):
    """Exact gradients of (loss + l2_lambda * sum w^2) for one minibatch.

    Returns (grads, loss); grads mirror the Parameters layout and are
    already scaled by 1/batch through the loss derivative.
    """
    x, y = batch
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if y.size == 0:
        raise ValueError("backward: empty batch")
    if (teacher_outputs is None) != (loss_kind != KD_LOSS):
        raise ValueError("teacher_outputs must be given exactly for KD loss")
    out, caches = _forward_batch(spec, params, x)
    yhat = out[:, 0]
    loss, d_yhat = _loss_and_dyhat(y, yhat, loss_kind, teacher_outputs, alpha)

    d_value = np.zeros_like(out)
    d_value[:, 0] = d_yhat
    grads: list = [None] * len(spec.layers)
    for k in reversed(range(len(spec.layers))):
        layer, w, cache = spec.layers[k], params[k], caches[k]
        if layer.kind == LSTM:
            d_value, grads[k] = _lstm_backward_batch(layer, w, cache, d_value)
        else:
            d_value, grads[k] = _dense_backward_batch(layer, w, cache, d_value)

    if l2_lambda:
        loss += l2_lambda * sum(
            float(np.sum(w * w)) for lw in params for w in _weight_matrices(lw)
        )
        penalized = []
        for lw, g in zip(params, grads):
            if isinstance(lw, LSTMWeights):
                penalized.append(LSTMWeights(
                    W=g.W + 2.0 * l2_lambda * lw.W,
                    U=g.U + 2.0 * l2_lambda * lw.U,
                    b=g.b,
                ))
            else:
                penalized.append(DenseWeights(W=g.W + 2.0 * l2_lambda * lw.W, b=g.b))
        grads = penalized
    return Parameters(tuple(grads)), loss


# ---------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    m: Parameters
    v: Parameters
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def initial(params: Parameters) -> "AdamState":
        zeros = Parameters(tuple(
            type(lw)(*(np.zeros_like(a) for a in lw.arrays())) for lw in params
        ))
        zeros2 = Parameters(tuple(
            type(lw)(*(np.zeros_like(a) for a in lw.arrays())) for lw in params
        ))
        return AdamState(m=zeros, v=zeros2)


def adam_step(params: Parameters, grads: Parameters, state: AdamState,
              lr: float):
    """One bias-corrected Adam update; returns (params', state')."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for lw, gw, mw, vw in zip(params, grads, state.m, state.v):
        ps, ms, vs = [], [], []
        for p, g, m, v in zip(lw.arrays(), gw.arrays(), mw.arrays(), vw.arrays()):
            m2 = state.beta1 * m + (1.0 - state.beta1) * g
            v2 = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            step = lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + state.eps)
            ps.append(p - step)
            ms.append(m2)
            vs.append(v2)
        new_p.append(type(lw)(*ps))
        new_m.append(type(lw)(*ms))
        new_v.append(type(lw)(*vs))
    return (
        Parameters(tuple(new_p)),
        replace(state, m=Parameters(tuple(new_m)), v=Parameters(tuple(new_v)), t=t),
    )


# ---------------------------------------------------------------------------
# training loops

def _train_loop(spec: ModelSpec, dataset: ForecastDataset, config: TrainConfig,
                teacher=None):
    validate_forecast_model(spec)
    if spec.window_length != dataset.window_length:
        raise ShapeError("model window length does not match the dataset")
    if len(dataset.train) == 0:
        raise ValueError("empty training set")

    params = init_params(spec, config.seed)
    opt = AdamState.initial(params)
    rng = np.random.default_rng(config.seed)
    train_x = dataset.train.x[:, :, None]
    train_y = dataset.train.y
    val_x = dataset.val.x
    n = len(dataset.train)

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            xb, yb = train_x[sel], train_y[sel]
            w_out = None
            if teacher is not None:
                t_spec, t_params = teacher
                w_out = predict(t_spec, t_params, xb)
            grads, loss = backward(
                spec, params, (xb, yb), config.loss_kind,
                teacher_outputs=w_out, alpha=config.alpha,
                l2_lambda=config.l2_lambda,
            )
            params, opt = adam_step(params, grads, opt, config.learning_rate)
            batch_losses.append(loss)
        val_pred = predict(spec, params, val_x)
        v_mse, v_mae, v_r2 = metrics(dataset.val.y, val_pred)
        history.append(EpochReport(epoch, float(np.mean(batch_losses)),
                                   v_mse, v_mae, v_r2))
    return params, history


def train_teacher(spec: ModelSpec, dataset: ForecastDataset,
                  config: TrainConfig):
    """Plain-MSE training; returns (params, per-epoch history)."""
    if config.loss_kind != MSE_LOSS:
        raise ValueError("train_teacher expects an MSE config")
    return _train_loop(spec, dataset, config)


def distill(teacher, student_spec: ModelSpec, dataset: ForecastDataset,
            config: TrainConfig):
    """Train a student against the frozen teacher's soft predictions.

    ``teacher`` is a (spec, params) pair; its parameters are never touched.
    Soft targets are recomputed per batch in float64.
    """
    if config.loss_kind != KD_LOSS:
        raise ValueError("distill expects a KD config")
    t_spec, _ = teacher
    if t_spec.window_length != student_spec.window_length:
        raise ShapeError("teacher and student window lengths differ")
    return _train_loop(student_spec, dataset, config, teacher=teacher)


# ---------------------------------------------------------------------------
# gradient verification

def _flatten(params: Parameters) -> np.ndarray:
    return np.concatenate([a.ravel() for lw in params for a in lw.arrays()])


def _unflatten(template: Parameters, vec: np.ndarray) -> Parameters:
    out, pos = [], 0
    for lw in template:
        arrays = []
        for a in lw.arrays():
            arrays.append(vec[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        out.append(type(lw)(*arrays))
    return Parameters(tuple(out))


def finite_diff_check(spec: ModelSpec, params: Parameters, datum, loss_kind,
                      alpha: float = 0.1, l2_lambda: float = 0.001,
                      teacher_output: float | None = None,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    Relative error uses the guarded denominator max(|a|, |b|, 1e-8).
    """
    x, y = datum
    batch = (np.asarray(x, dtype=float)[None, :], np.array([y], dtype=float))
    w_out = None
    if loss_kind == KD_LOSS:
        w_out = np.array([0.0 if teacher_output is None else teacher_output])
    grads, _ = backward(spec, params, batch, loss_kind, teacher_outputs=w_out,
                        alpha=alpha, l2_lambda=l2_lambda)
    analytic = _flatten(grads)
    theta = _flatten(params)
    numeric = np.empty_like(theta)
    for k in range(theta.size):
        bump = np.zeros_like(theta)
        bump[k] = step
        hi = batch_loss(spec, _unflatten(params, theta + bump), batch, loss_kind,
                        teacher_outputs=w_out, alpha=alpha, l2_lambda=l2_lambda)
        lo = batch_loss(spec, _unflatten(params, theta - bump), batch, loss_kind,
                        teacher_outputs=w_out, alpha=alpha, l2_lambda=l2_lambda)
        numeric[k] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def history_csv_lines(history) -> list[str]:
    lines = ["epoch,train_loss,val_mse,val_mae,val_r2"]
    for rep in history:
        lines.append(
            f"{rep.epoch},{rep.train_loss!r},{rep.val_mse!r},"
            f"{rep.val_mae!r},{rep.val_r2!r}"
        )
    return lines

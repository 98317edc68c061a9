"""Model architectures, parameter storage, and the float forward pass.

Layer stacks are described by :class:`ModelSpec` and evaluated one window
at a time.  LSTM gate blocks are stored in the fixed order
[input, forget, candidate, output]; the forget-gate bias block is
initialised to 1.0 so saved models stay portable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LSTM = "lstm"
DENSE = "dense"

GATE_ORDER = ("input", "forget", "candidate", "output")

DEFAULT_WINDOW_LENGTH = 15


class ShapeError(ValueError):
    """A tensor or layer dimension does not line up."""


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack: an LSTM or a dense (fully connected) layer.

    ``return_sequences`` applies to LSTM layers only; ``time_distributed``
    and ``activation`` apply to dense layers only.
    """

    kind: str
    input_size: int
    output_size: int
    return_sequences: bool = False
    time_distributed: bool = False
    activation: str = "linear"

    def __post_init__(self):
        if self.kind not in (LSTM, DENSE):
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if self.input_size < 1 or self.output_size < 1:
            raise ValueError("layer sizes must be >= 1")
        if self.kind == LSTM:
            if self.time_distributed:
                raise ValueError("time_distributed is a dense-layer option")
            if self.activation != "linear":
                raise ValueError("activation is a dense-layer option")
        else:
            if self.return_sequences:
                raise ValueError("return_sequences is an LSTM option")
            if self.activation not in ("linear", "relu"):
                raise ValueError(f"unknown activation: {self.activation!r}")

    @property
    def param_count(self) -> int:
        h, n = self.output_size, self.input_size
        if self.kind == LSTM:
            return 4 * (h * (n + h) + h)
        return h * n + h


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack plus the input window geometry.

    ``vector_input`` marks sub-models (server halves) whose input is a flat
    vector of ``feature_count`` values rather than a [T, features] window.
    """

    layers: tuple[LayerSpec, ...]
    window_length: int = DEFAULT_WINDOW_LENGTH
    feature_count: int = 1
    vector_input: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.window_length < 1 or self.feature_count < 1:
            raise ValueError("window_length and feature_count must be >= 1")
        object.__setattr__(self, "layers", tuple(self.layers))
        # walk the stack once to check shape compatibility
        is_seq, width = not self.vector_input, self.feature_count
        for k, layer in enumerate(self.layers):
            if layer.input_size != width:
                raise ShapeError(
                    f"layer {k} expects input width {layer.input_size}, gets {width}"
                )
            if layer.kind == LSTM:
                if not is_seq:
                    raise ShapeError(f"layer {k} (LSTM) needs a sequence input")
                is_seq = layer.return_sequences
            else:
                if layer.time_distributed and not is_seq:
                    raise ShapeError(
                        f"layer {k} is time-distributed but gets a vector input"
                    )
                if not layer.time_distributed and is_seq:
                    raise ShapeError(
                        f"layer {k} (dense) gets a sequence input; "
                        "mark it time_distributed"
                    )
            width = layer.output_size

    @property
    def output_is_sequence(self) -> bool:
        is_seq = not self.vector_input
        for layer in self.layers:
            if layer.kind == LSTM:
                is_seq = layer.return_sequences
            elif not layer.time_distributed:
                is_seq = False
        return is_seq

    @property
    def output_size(self) -> int:
        width = self.layers[-1].output_size
        return self.window_length * width if self.output_is_sequence else width

    def sublayers(self, start: int, stop: int) -> "ModelSpec":
        """Spec for the layer slice [start, stop); used by partitioning."""
        if not (0 <= start < stop <= len(self.layers)):
            raise ValueError(f"bad layer slice [{start}, {stop})")
        return replace(self, layers=self.layers[start:stop])


def validate_forecast_model(spec: ModelSpec) -> None:
    """Reject specs that cannot produce a single next-value forecast."""
    if spec.output_is_sequence or spec.layers[-1].output_size != 1:
        raise ShapeError("forecast model must end in a single scalar output")


@dataclass(frozen=True)
class LSTMWeights:
    """Gate-blocked kernels: W [4h, in], U [4h, h], b [4h]."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h4, n = self.W.shape
        if h4 % 4 != 0 or self.U.shape != (h4, h4 // 4) or self.b.shape != (h4,):
            raise ShapeError("inconsistent LSTM weight shapes")
        for a in (self.W, self.U, self.b):
            a.setflags(write=False)

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.W, self.U, self.b)


@dataclass(frozen=True)
class DenseWeights:
    """W [out, in], b [out]."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("inconsistent dense weight shapes")
        for a in (self.W, self.b):
            a.setflags(write=False)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.W, self.b)


LayerWeights = LSTMWeights | DenseWeights


@dataclass(frozen=True)
class Parameters:
    """Per-layer weights, ordered as in the owning ModelSpec."""

    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def count(self) -> int:
        return sum(a.size for lw in self.layers for a in lw.arrays())

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            tuple(
                type(lw)(*(a.astype(dtype) for a in lw.arrays()))
                for lw in self.layers
            )
        )

    def sublayers(self, start: int, stop: int) -> "Parameters":
        return Parameters(self.layers[start:stop])


def _check_params(spec: ModelSpec, params: Parameters) -> None:
    if len(params) != len(spec.layers):
        raise ShapeError("parameter/layer count mismatch")
    for k, (layer, lw) in enumerate(zip(spec.layers, params)):
        h, n = layer.output_size, layer.input_size
        if layer.kind == LSTM:
            ok = isinstance(lw, LSTMWeights) and lw.W.shape == (4 * h, n)
        else:
            ok = isinstance(lw, DenseWeights) and lw.W.shape == (h, n)
        if not ok:
            raise ShapeError(f"weights for layer {k} do not match its spec")


# ---------------------------------------------------------------------------
# architectures

def build_student() -> ModelSpec:
    """Deployment model: two stacked LSTMs feeding two dense layers (871 params)."""
    return ModelSpec(
        layers=(
            LayerSpec(LSTM, 1, 10, return_sequences=True),
            LayerSpec(LSTM, 10, 5),
            LayerSpec(DENSE, 5, 10, activation="relu"),
            LayerSpec(DENSE, 10, 1),
        ),
        window_length=15,
        feature_count=1,
    )


def build_teacher(h1: int, d: int, h2: int) -> ModelSpec:
    """Reference model: LSTM, time-distributed dense, LSTM, dense head."""
    if min(h1, d, h2) < 1:
        raise ValueError("teacher dims must be >= 1")
    return ModelSpec(
        layers=(
            LayerSpec(LSTM, 1, h1, return_sequences=True),
            LayerSpec(DENSE, h1, d, time_distributed=True, activation="relu"),
            LayerSpec(LSTM, d, h2),
            LayerSpec(DENSE, h2, 1),
        ),
        window_length=15,
        feature_count=1,
    )


def param_count(spec: ModelSpec) -> int:
    return sum(layer.param_count for layer in spec.layers)


def search_teacher_dims(target: int, h_max: int) -> list[tuple[int, int, int]]:
    """Enumerate teacher dims (h1, d, h2) in [1, h_max]^3 with an exact
    parameter count match, sorted by (|d - h1|, h1, d, h2).

    Empty when no exact match exists; callers fall back to
    :func:`closest_teacher_dims`.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    r = np.arange(1, h_max + 1, dtype=np.int64)
    h1, d, h2 = np.meshgrid(r, r, r, indexing="ij")
    counts = (
        4 * (h1 * (1 + h1) + h1)
        + d * (h1 + 1)
        + 4 * (h2 * (d + h2) + h2)
        + (h2 + 1)
    )
    idx = np.argwhere(counts == target)
    triples = [(int(i) + 1, int(j) + 1, int(k) + 1) for i, j, k in idx]
    triples.sort(key=lambda t: (abs(t[1] - t[0]), t[0], t[1], t[2]))
    return triples


def closest_teacher_dims(target: int, h_max: int) -> tuple[int, int, int]:
    """Dims minimising |param_count - target|; ties use the same key as
    :func:`search_teacher_dims`."""
    r = np.arange(1, h_max + 1, dtype=np.int64)
    h1, d, h2 = np.meshgrid(r, r, r, indexing="ij")
    counts = (
        4 * (h1 * (1 + h1) + h1)
        + d * (h1 + 1)
        + 4 * (h2 * (d + h2) + h2)
        + (h2 + 1)
    )
    gap = np.abs(counts - target)
    best = gap.min()
    idx = np.argwhere(gap == best)
    triples = [(int(i) + 1, int(j) + 1, int(k) + 1) for i, j, k in idx]
    triples.sort(key=lambda t: (abs(t[1] - t[0]), t[0], t[1], t[2]))
    return triples[0]


def model_size_kb(count: int) -> float:
    """Stored size at 32-bit precision, rounded to 2 decimals for reporting."""
    if count < 0:
        raise ValueError("count must be >= 0")
    return round(count * 4 / 1024, 2)


# ---------------------------------------------------------------------------
# initialisation

def init_params(spec: ModelSpec, seed: int) -> Parameters:
    """Deterministic Glorot-uniform kernels; zero biases except the LSTM
    forget-gate block, which starts at 1.0."""
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    weights = []
    for layer in spec.layers:
        h, n = layer.output_size, layer.input_size
        if layer.kind == LSTM:
            W = glorot((4 * h, n), n, h)
            U = glorot((4 * h, h), h, h)
            b = np.zeros(4 * h)
            b[h : 2 * h] = 1.0
            weights.append(LSTMWeights(W, U, b))
        else:
            W = glorot((h, n), n, h)
            b = np.zeros(h)
            weights.append(DenseWeights(W, b))
    return Parameters(tuple(weights))


# ---------------------------------------------------------------------------
# forward pass

def lstm_cell_step(w: LSTMWeights, x_t, h_prev, c_prev):
    """One LSTM cell update; returns (h, c). Pure."""
    x_t = np.asarray(x_t, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    h = w.hidden_size
    if x_t.shape != (w.W.shape[1],) or h_prev.shape != (h,) or c_prev.shape != (h,):
        raise ShapeError("lstm_cell_step input dimensions do not match weights")
    a = w.W @ x_t + w.U @ h_prev + w.b
    i = sigmoid(a[:h])
    f = sigmoid(a[h : 2 * h])
    g = np.tanh(a[2 * h : 3 * h])
    o = sigmoid(a[3 * h :])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _lstm_forward(layer: LayerSpec, w: LSTMWeights, seq: np.ndarray) -> np.ndarray:
    T = seq.shape[0]
    h = np.zeros(layer.output_size)
    c = np.zeros(layer.output_size)
    if layer.return_sequences:
        out = np.empty((T, layer.output_size))
        for t in range(T):
            h, c = lstm_cell_step(w, seq[t], h, c)
            out[t] = h
        return out
    for t in range(T):
        h, c = lstm_cell_step(w, seq[t], h, c)
    return h


def _dense_forward(layer: LayerSpec, w: DenseWeights, value: np.ndarray) -> np.ndarray:
    out = value @ w.W.T + w.b
    if layer.activation == "relu":
        out = np.maximum(out, 0.0)
    return out


def layer_forward(layer: LayerSpec, w: LayerWeights, value: np.ndarray) -> np.ndarray:
    if layer.kind == LSTM:
        if value.ndim != 2 or value.shape[1] != layer.input_size:
            raise ShapeError("LSTM layer needs a [T, input_size] sequence")
        return _lstm_forward(layer, w, value)
    expected = layer.input_size
    if layer.time_distributed:
        if value.ndim != 2 or value.shape[1] != expected:
            raise ShapeError("time-distributed dense needs a [T, input_size] sequence")
    elif value.shape != (expected,):
        raise ShapeError(f"dense layer expects a vector of length {expected}")
    return _dense_forward(layer, w, value)


def run_layers(spec: ModelSpec, params: Parameters, value: np.ndarray,
               start: int = 0, stop: int | None = None):
    """Evaluate layers [start, stop) on ``value``; returns (output, taps).

    taps[k] is the output of layer start+k, i.e. exactly the input consumed
    by the next layer.
    """
    _check_params(spec, params)
    stop = len(spec.layers) if stop is None else stop
    taps = []
    for layer, w in zip(spec.layers[start:stop], params[start:stop]):
        value = layer_forward(layer, w, value)
        taps.append(value)
    return value, taps


def prepare_input(spec: ModelSpec, window) -> np.ndarray:
    """Validate and shape a raw input for ``spec`` (window or vector)."""
    window = np.asarray(window, dtype=float)
    if spec.vector_input:
        if window.shape != (spec.feature_count,):
            raise ShapeError(
                f"expected a vector of {spec.feature_count} values, "
                f"got shape {window.shape}"
            )
        return window
    if window.ndim == 1:
        window = window[:, None]
    if window.shape != (spec.window_length, spec.feature_count):
        raise ShapeError(
            f"window shape {window.shape} != "
            f"({spec.window_length}, {spec.feature_count})"
        )
    return window


def model_forward(spec: ModelSpec, params: Parameters, window: np.ndarray):
    """Full forward pass over one window; returns (prediction, taps)."""
    value, taps = run_layers(spec, params, prepare_input(spec, window))
    if np.size(value) != 1:
        raise ShapeError("model output is not a single scalar")
    return float(np.ravel(value)[0]), taps

"""Post-training compression: global magnitude pruning, 8-bit fixed-point
quantization, and an integer-only inference engine.

The engine emulates a hardware datapath: int8 operands, 32-bit product
accumulators at scale 2^(2*frac), one round-half-even rescale per
matrix-vector stage, lookup-table sigmoid/tanh, and saturation instead of
overflow.  Identical inputs give an identical integer trace on any
platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import (
    DENSE,
    LSTM,
    DenseWeights,
    LayerSpec,
    LSTMWeights,
    ModelSpec,
    Parameters,
    ShapeError,
    model_size_kb,
    prepare_input,
)

TOTAL_BITS = 8
TABLE_SIZE = 1024
TABLE_DOMAIN = 8.0  # sigmoid/tanh sampled uniformly on [-8, 8]


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed 8-bit Q-format: integer_bits includes the sign bit."""

    integer_bits: int = 3

    def __post_init__(self):
        if not 1 <= self.integer_bits <= 7:
            raise ValueError("integer_bits must be in [1, 7]")

    @property
    def fractional_bits(self) -> int:
        return TOTAL_BITS - self.integer_bits

    @property
    def scale(self) -> int:
        return 1 << self.fractional_bits

    @property
    def min_value(self) -> float:
        return -float(2 ** (self.integer_bits - 1))

    @property
    def max_value(self) -> float:
        return 2 ** (self.integer_bits - 1) - 2.0**-self.fractional_bits

    def __str__(self):
        return f"{self.integer_bits}.{self.fractional_bits}"

    @staticmethod
    def parse(text: str) -> "FixedPointFormat":
        """Accepts 'I.F' with I+F = 8, e.g. '3.5'."""
        try:
            i_bits, f_bits = (int(part) for part in text.split("."))
        except ValueError:
            raise ValueError(f"bad fixed-point format {text!r}; expected I.F") from None
        if i_bits + f_bits != TOTAL_BITS:
            raise ValueError(f"format {text!r} is not {TOTAL_BITS} bits total")
        return FixedPointFormat(integer_bits=i_bits)


def _round_half_even(x):
    # np.rint implements IEEE round-half-to-even
    return np.rint(x)


def quantize_value(x: float, fmt: FixedPointFormat) -> int:
    """clamp(round_half_even(x * 2^frac), -128, 127)."""
    q = _round_half_even(float(x) * fmt.scale)
    return int(np.clip(q, -128, 127))


def dequantize(q: int, fmt: FixedPointFormat) -> float:
    return float(q) / fmt.scale


def quantize_array(x, fmt: FixedPointFormat) -> np.ndarray:
    q = _round_half_even(np.asarray(x, dtype=float) * fmt.scale)
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_array(q, fmt: FixedPointFormat) -> np.ndarray:
    return np.asarray(q, dtype=float) / fmt.scale


@dataclass(frozen=True)
class QuantizedLSTMWeights:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for a in (self.W, self.U, self.b):
            if a.dtype != np.int8:
                raise TypeError("quantized weights must be int8")
            a.setflags(write=False)

    def arrays(self):
        return (self.W, self.U, self.b)


@dataclass(frozen=True)
class QuantizedDenseWeights:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for a in (self.W, self.b):
            if a.dtype != np.int8:
                raise TypeError("quantized weights must be int8")
            a.setflags(write=False)

    def arrays(self):
        return (self.W, self.b)


@dataclass(frozen=True)
class QuantizedParameters:
    """int8 codes mirroring a Parameters layout, plus the shared format."""

    layers: tuple
    fmt: FixedPointFormat
    source_hash: str = ""

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

    def sublayers(self, start: int, stop: int) -> "QuantizedParameters":
        return QuantizedParameters(self.layers[start:stop], self.fmt,
                                   self.source_hash)


def params_hash(params: Parameters) -> str:
    """Content hash of a float parameter set at 32-bit precision."""
    digest = hashlib.sha256()
    for lw in params:
        for a in lw.arrays():
            digest.update(a.astype("<f4").tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# pruning

@dataclass(frozen=True)
class PruneReport:
    total_weights: int
    zeroed: int
    achieved_sparsity: float
    threshold: float


def prune_global_magnitude(params: Parameters, target_sparsity: float):
    """Zero the round(target * n) smallest-magnitude kernel weights globally.

    Biases are never pruned.  Equal magnitudes are dropped in
    (layer index, flat index) order.  Returns (pruned params, report).
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target_sparsity must be in [0, 1)")
    mags, layer_ids, matrix_ids, flat_ids = [], [], [], []
    for li, lw in enumerate(params):
        for mi, w in enumerate(_prunable(lw)):
            mags.append(np.abs(w).ravel())
            layer_ids.append(np.full(w.size, li))
            matrix_ids.append(np.full(w.size, mi))
            flat_ids.append(np.arange(w.size))
    mags = np.concatenate(mags)
    keys = (np.concatenate(flat_ids), np.concatenate(matrix_ids),
            np.concatenate(layer_ids), mags)
    order = np.lexsort(keys)  # magnitude first, then (layer, flat) tie-break
    total = mags.size
    k = int(round(target_sparsity * total))
    drop = order[:k]
    threshold = float(mags[order[k - 1]]) if k else 0.0

    mask = np.ones(total, dtype=bool)
    mask[drop] = False
    new_layers, pos = [], 0
    for lw in params:
        arrays = list(lw.arrays())
        for mi in range(len(_prunable(lw))):
            w = arrays[mi].copy()
            keep = mask[pos : pos + w.size].reshape(w.shape)
            w[~keep] = 0.0
            arrays[mi] = w
            pos += w.size
        new_layers.append(type(lw)(*arrays))
    report = PruneReport(
        total_weights=total,
        zeroed=k,
        achieved_sparsity=k / total if total else 0.0,
        threshold=threshold,
    )
    return Parameters(tuple(new_layers)), report


def _prunable(lw):
    if isinstance(lw, LSTMWeights):
        return (lw.W, lw.U)
    return (lw.W,)


# ---------------------------------------------------------------------------
# quantization

def quantize_params(params: Parameters, fmt: FixedPointFormat) -> QuantizedParameters:
    """Elementwise quantization; exact zeros stay zero, so a pruned model's
    zero pattern survives."""
    layers = []
    for lw in params:
        qs = [quantize_array(a, fmt) for a in lw.arrays()]
        if isinstance(lw, LSTMWeights):
            layers.append(QuantizedLSTMWeights(*qs))
        else:
            layers.append(QuantizedDenseWeights(*qs))
    return QuantizedParameters(tuple(layers), fmt, source_hash=params_hash(params))


def compression_ratio(count_teacher: int, count_student: int) -> float:
    """Ratio of the 2-decimal-rounded KB sizes, as reported."""
    if count_teacher < 1 or count_student < 1:
        raise ValueError("parameter counts must be >= 1")
    return model_size_kb(count_teacher) / model_size_kb(count_student)


# ---------------------------------------------------------------------------
# activation tables

@dataclass(frozen=True)
class ActivationTable:
    """1024-entry sigmoid/tanh lookup over [-8, 8], stored in fmt codes."""

    function: str
    fmt: FixedPointFormat
    codes: np.ndarray

    def __post_init__(self):
        if self.codes.shape != (TABLE_SIZE,) or self.codes.dtype != np.int8:
            raise ValueError("activation table must be 1024 int8 entries")
        self.codes.setflags(write=False)

    @staticmethod
    def build(function: str, fmt: FixedPointFormat) -> "ActivationTable":
        xs = -TABLE_DOMAIN + np.arange(TABLE_SIZE) * (2 * TABLE_DOMAIN / TABLE_SIZE)
        if function == "sigmoid":
            ys = 1.0 / (1.0 + np.exp(-xs))
        elif function == "tanh":
            ys = np.tanh(xs)
        else:
            raise ValueError(f"unknown table function {function!r}")
        return ActivationTable(function, fmt, quantize_array(ys, fmt))

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Codes (fmt scale) -> activation codes (fmt scale)."""
        frac = self.fmt.fractional_bits
        idx = codes.astype(np.int64)
        # table step is 1/64; align the preactivation resolution to it
        if frac <= 6:
            idx = idx << (6 - frac)
        else:
            idx = _rescale_round_half_even(idx, frac - 6)
        idx = np.clip(idx + TABLE_SIZE // 2, 0, TABLE_SIZE - 1)
        return self.codes[idx]


@lru_cache(maxsize=None)
def _tables(fmt: FixedPointFormat):
    return (ActivationTable.build("sigmoid", fmt),
            ActivationTable.build("tanh", fmt))


# ---------------------------------------------------------------------------
# integer inference engine

def _rescale_round_half_even(acc: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift with round-half-to-even, any integer dtype."""
    if shift == 0:
        return acc
    q = acc >> shift
    rem = acc & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    q = q + ((rem > half) | ((rem == half) & ((q & 1) == 1)))
    return q


def _saturate8(q: np.ndarray) -> np.ndarray:
    return np.clip(q, -128, 127).astype(np.int8)


def _q_matvec(Wq: np.ndarray, xq: np.ndarray, bq: np.ndarray, frac: int) -> np.ndarray:
    """(W@x + b) in int32 at scale 2^(2*frac), rescaled and saturated to fmt."""
    acc = Wq.astype(np.int32) @ xq.astype(np.int32) + (bq.astype(np.int32) << frac)
    return _saturate8(_rescale_round_half_even(acc, frac))


def _q_mul(aq: np.ndarray, bq: np.ndarray, frac: int) -> np.ndarray:
    acc = aq.astype(np.int32) * bq.astype(np.int32)
    return _saturate8(_rescale_round_half_even(acc, frac))


def _q_lstm_forward(layer: LayerSpec, qw: QuantizedLSTMWeights,
                    seq: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    sig, tnh = _tables(fmt)
    frac = fmt.fractional_bits
    h_dim = layer.output_size
    T = seq.shape[0]
    h = np.zeros(h_dim, dtype=np.int8)
    c = np.zeros(h_dim, dtype=np.int8)
    out = np.empty((T, h_dim), dtype=np.int8) if layer.return_sequences else None
    for t in range(T):
        acc = (
            qw.W.astype(np.int32) @ seq[t].astype(np.int32)
            + qw.U.astype(np.int32) @ h.astype(np.int32)
            + (qw.b.astype(np.int32) << frac)
        )
        pre = _saturate8(_rescale_round_half_even(acc, frac))
        i = sig.lookup(pre[:h_dim])
        f = sig.lookup(pre[h_dim : 2 * h_dim])
        g = tnh.lookup(pre[2 * h_dim : 3 * h_dim])
        o = sig.lookup(pre[3 * h_dim :])
        c_acc = (f.astype(np.int32) * c.astype(np.int32)
                 + i.astype(np.int32) * g.astype(np.int32))
        c = _saturate8(_rescale_round_half_even(c_acc, frac))
        h = _q_mul(o, tnh.lookup(c), frac)
        if out is not None:
            out[t] = h
    return out if out is not None else h


def _q_dense_forward(layer: LayerSpec, qw: QuantizedDenseWeights,
                     value: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    frac = fmt.fractional_bits
    if layer.time_distributed:
        out = np.stack([_q_matvec(qw.W, value[t], qw.b, frac)
                        for t in range(value.shape[0])])
    else:
        out = _q_matvec(qw.W, value, qw.b, frac)
    if layer.activation == "relu":
        out = np.maximum(out, np.int8(0))
    return out


def q_layer_forward(layer: LayerSpec, qw, value: np.ndarray,
                    fmt: FixedPointFormat) -> np.ndarray:
    if layer.kind == LSTM:
        if value.ndim != 2 or value.shape[1] != layer.input_size:
            raise ShapeError("LSTM layer needs a [T, input_size] code sequence")
        return _q_lstm_forward(layer, qw, value, fmt)
    if layer.time_distributed:
        if value.ndim != 2 or value.shape[1] != layer.input_size:
            raise ShapeError("time-distributed dense needs a code sequence")
    elif value.shape != (layer.input_size,):
        raise ShapeError(f"dense layer expects {layer.input_size} codes")
    return _q_dense_forward(layer, qw, value, fmt)


def q_run_layers(spec: ModelSpec, qparams: QuantizedParameters,
                 codes: np.ndarray, start: int = 0, stop: int | None = None):
    """Integer evaluation of layers [start, stop); returns (codes, taps)."""
    stop = len(spec.layers) if stop is None else stop
    if len(qparams) != len(spec.layers):
        raise ShapeError("quantized parameter/layer count mismatch")
    taps = []
    for layer, qw in zip(spec.layers[start:stop], qparams[start:stop]):
        codes = q_layer_forward(layer, qw, codes, qparams.fmt)
        taps.append(codes)
    return codes, taps


def quantized_forward(spec: ModelSpec, qparams: QuantizedParameters,
                      window, fmt: FixedPointFormat | None = None):
    """Integer-only forward pass; returns (prediction, code taps).

    The float window is quantized to the format on entry; everything after
    that is int8/int32 arithmetic, so the trace is bit-deterministic.
    """
    fmt = qparams.fmt if fmt is None else fmt
    if fmt != qparams.fmt:
        raise ValueError("format does not match the quantized parameters")
    window = prepare_input(spec, window)
    codes, taps = q_run_layers(spec, qparams, quantize_array(window, fmt))
    if np.size(codes) != 1:
        raise ShapeError("model output is not a single scalar")
    return dequantize(int(np.ravel(codes)[0]), fmt), taps

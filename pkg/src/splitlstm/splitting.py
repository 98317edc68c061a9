"""Partition a model at a layer boundary into edge and server halves.

The edge runs layers [0, cut); the server runs the rest.  Both halves use
the same layer-evaluation code as the unsplit model, so composing them is
bit-identical to the full forward pass in float and quantized modes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .compression import (
    FixedPointFormat,
    QuantizedParameters,
    dequantize,
    q_run_layers,
    quantize_array,
)
from .model import (
    LSTM,
    ModelSpec,
    Parameters,
    ShapeError,
    prepare_input,
    run_layers,
)

PLAN_FULL_EDGE = "lstm-do-s"
PLAN_TWO_LSTM = "split-a"
PLAN_ONE_LSTM = "split-b"
PRESET_PLANS = (PLAN_FULL_EDGE, PLAN_TWO_LSTM, PLAN_ONE_LSTM)

DTYPE_F32 = "float32"
DTYPE_Q8 = "q8"


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    """Cut index: layers [0, cut) stay on the edge."""

    cut_index: int
    name: str = "custom"


def plan_preset(name: str, spec: ModelSpec) -> SplitPlan:
    """Resolve a named split for a model.

    lstm-do-s keeps the whole model on the edge; split-a cuts after the
    second LSTM layer; split-b cuts after the first.
    """
    name = name.lower()
    lstm_positions = [k for k, layer in enumerate(spec.layers) if layer.kind == LSTM]
    if name == PLAN_FULL_EDGE:
        return SplitPlan(len(spec.layers), name)
    if name == PLAN_TWO_LSTM:
        if len(lstm_positions) < 2:
            raise SplitError("split-a needs two LSTM layers")
        return SplitPlan(lstm_positions[1] + 1, name)
    if name == PLAN_ONE_LSTM:
        if not lstm_positions:
            raise SplitError("split-b needs an LSTM layer")
        return SplitPlan(lstm_positions[0] + 1, name)
    raise SplitError(f"unknown plan {name!r}; presets: {', '.join(PRESET_PLANS)}")


def validate_plan(spec: ModelSpec, plan: SplitPlan) -> None:
    n_layers = len(spec.layers)
    if not 0 < plan.cut_index <= n_layers:
        raise SplitError(f"cut index {plan.cut_index} outside (0, {n_layers}]")
    edge_layers = spec.layers[: plan.cut_index]
    if not any(layer.kind == LSTM for layer in edge_layers):
        raise SplitError("edge part must contain at least one LSTM layer")
    if plan.cut_index < n_layers:
        total_lstm = sum(1 for layer in spec.layers if layer.kind == LSTM)
        if total_lstm < 2:
            raise SplitError("splitting off a server part needs >= 2 LSTM layers")


def intermediate_size(spec: ModelSpec, plan: SplitPlan) -> int:
    """Element count of the edge output crossing the wire."""
    validate_plan(spec, plan)
    edge_spec = spec.sublayers(0, plan.cut_index)
    return edge_spec.output_size


@dataclass(frozen=True)
class SplitHalf:
    """One side of a partition: a sub-model in float or quantized form."""

    spec: ModelSpec
    params: Parameters | None = None
    qparams: QuantizedParameters | None = None

    def __post_init__(self):
        if (self.params is None) == (self.qparams is None):
            raise ValueError("exactly one of params/qparams must be set")

    @property
    def dtype(self) -> str:
        return DTYPE_F32 if self.params is not None else DTYPE_Q8

    @property
    def fmt(self) -> FixedPointFormat | None:
        return None if self.qparams is None else self.qparams.fmt


@dataclass(frozen=True)
class EdgeModel(SplitHalf):
    intermediate_size: int = 0


@dataclass(frozen=True)
class ServerModel(SplitHalf):
    pass


@dataclass(frozen=True)
class PassthroughServer:
    """Server side of a full-edge plan: relays the edge's single output."""

    fmt: FixedPointFormat | None = None

    @property
    def dtype(self) -> str:
        return DTYPE_F32 if self.fmt is None else DTYPE_Q8


def partition(spec: ModelSpec, params, plan: SplitPlan):
    """Split into (EdgeModel, ServerModel); parameters are shared, never
    copied or re-derived, so counts always add up to the original.

    ``params`` may be Parameters (float) or QuantizedParameters.
    A full-edge plan gets a PassthroughServer for its server side.
    """
    validate_plan(spec, plan)
    cut = plan.cut_index
    quantized = isinstance(params, QuantizedParameters)
    if len(params) != len(spec.layers):
        raise ShapeError("parameter/layer count mismatch")

    edge_spec = spec.sublayers(0, cut)
    m = intermediate_size(spec, plan)
    kw = dict(qparams=params.sublayers(0, cut)) if quantized else dict(
        params=params.sublayers(0, cut))
    edge = EdgeModel(spec=edge_spec, intermediate_size=m, **kw)

    if cut == len(spec.layers):
        return edge, PassthroughServer(fmt=params.fmt if quantized else None)

    if edge_spec.output_is_sequence:
        server_spec = replace(
            spec.sublayers(cut, len(spec.layers)),
            feature_count=spec.layers[cut - 1].output_size,
            vector_input=False,
        )
    else:
        server_spec = replace(
            spec.sublayers(cut, len(spec.layers)),
            feature_count=m,
            vector_input=True,
        )
    kw = dict(qparams=params.sublayers(cut, len(params))) if quantized else dict(
        params=params.sublayers(cut, len(params)))
    return edge, ServerModel(spec=server_spec, **kw)


def edge_forward(edge: EdgeModel, window) -> np.ndarray:
    """Run the edge half on one window; returns the flat intermediate z.

    Float mode returns float64 values; quantized mode returns int8 codes.
    """
    if edge.params is not None:
        value = prepare_input(edge.spec, window)
        out, _ = run_layers(edge.spec, edge.params, value)
    else:
        value = quantize_array(prepare_input(edge.spec, window), edge.fmt)
        out, _ = q_run_layers(edge.spec, edge.qparams, value)
    z = np.ravel(out)
    if z.size != edge.intermediate_size:
        raise ShapeError("edge output size does not match the plan")
    return z


def _shape_server_input(server: ServerModel, z: np.ndarray) -> np.ndarray:
    spec = server.spec
    if spec.vector_input:
        if z.shape != (spec.feature_count,):
            raise ShapeError(
                f"server expects {spec.feature_count} elements, got {z.size}"
            )
        return z
    expected = spec.window_length * spec.feature_count
    if z.size != expected:
        raise ShapeError(f"server expects {expected} elements, got {z.size}")
    return z.reshape(spec.window_length, spec.feature_count)  # row-major [T, h]


def server_forward(server: ServerModel | PassthroughServer, z) -> float:
    """Run the server half on an intermediate vector; returns the forecast.

    Quantized servers take int8 codes and return the dequantized scalar.
    """
    z = np.ravel(np.asarray(z))
    if isinstance(server, PassthroughServer):
        if z.size != 1:
            raise ShapeError("pass-through server expects a single value")
        if server.fmt is not None:
            return dequantize(int(z[0]), server.fmt)
        return float(z[0])
    if server.params is not None:
        value = _shape_server_input(server, np.asarray(z, dtype=float))
        out, _ = run_layers(server.spec, server.params, value)
        if np.size(out) != 1:
            raise ShapeError("server output is not a single scalar")
        return float(np.ravel(out)[0])
    codes = np.asarray(z)
    if codes.dtype != np.int8:
        raise ShapeError("quantized server expects int8 codes")
    value = _shape_server_input(server, codes)
    out, _ = q_run_layers(server.spec, server.qparams, value)
    if np.size(out) != 1:
        raise ShapeError("server output is not a single scalar")
    return dequantize(int(np.ravel(out)[0]), server.fmt)


# ---------------------------------------------------------------------------
# split manifest

def make_manifest(model_hash: str, plan: SplitPlan, spec: ModelSpec,
                  dtype: str, fmt: FixedPointFormat | None = None) -> dict:
    """Compatibility record shipped with both halves of a split."""
    if dtype not in (DTYPE_F32, DTYPE_Q8):
        raise ValueError(f"unknown dtype {dtype!r}")
    if (fmt is None) == (dtype == DTYPE_Q8):
        raise ValueError("fmt must be given exactly for q8 manifests")
    return {
        "model_hash": model_hash,
        "plan": plan.name,
        "cut_index": plan.cut_index,
        "intermediate_size": intermediate_size(spec, plan),
        "dtype": dtype,
        "format": str(fmt) if fmt is not None else None,
    }


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(manifest_bytes(manifest)).hexdigest()

"""Post-training FP16 / INT8 simulation.

INT8 is per-tensor symmetric: zero point 0, codes in [-127, 127], max-abs
calibration, round half away from zero. Batch norm is folded into the
preceding (de)conv before weights are quantized. FP16 rounds weights and
every layer output to half precision while accumulating in float32.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.errors import ConfigError, DataFileError, NumericFaultError, QuantizationError
from app.models.schemas import LayerError, PrecisionError, QuantErrorReport, QuantSidecar
from app.services.executor import apply_node, executor, fused_weights
from app.services.graph import Graph, Node
from app.services.reference_ops import INT32_MAX, INT32_MIN
from app.services.tensor_ops import ConvWeights, Tensor, as_tensor, conv2d, deconv2d
from app.services.weights import WeightStore

logger = logging.getLogger(__name__)

QMAX = 127
FP16_MAX = 65504.0


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bits: int = 8
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"quantization scale must be > 0, got {self.scale}")
        if self.bits != 8 or self.zero_point != 0:
            raise QuantizationError("only symmetric 8-bit quantization is supported")


@dataclass(frozen=True)
class QuantizedLayer:
    kernel: np.ndarray  # int8
    weight_qp: QuantParams
    bias: np.ndarray | None  # int32 at input_scale * weight_scale
    groups: int
    stride: tuple[int, int]
    padding: tuple[int, int]
    transposed: bool


@dataclass(frozen=True)
class QuantizedModel:
    graph: Graph
    ws: WeightStore
    layers: dict[str, QuantizedLayer] = field(default_factory=dict)
    activations: dict[str, QuantParams] = field(default_factory=dict)  # keyed by producing node id
    absorbed: frozenset[str] = frozenset()  # batchnorm ids folded into their conv


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fp16_round(t) -> Tensor:
    arr = np.asarray(t, dtype=np.float32)
    over = np.abs(arr) > FP16_MAX
    if np.any(over):
        idx = np.unravel_index(int(np.argmax(over)), arr.shape)
        raise NumericFaultError(f"fp16 overflow: element {tuple(int(i) for i in idx)} = {arr[idx]} exceeds {FP16_MAX}")
    return arr.astype(np.float16).astype(np.float32)


def calibrate_maxabs(samples) -> QuantParams:
    samples = list(samples)
    if not samples:
        raise QuantizationError("calibration needs at least one sample")
    peak = 0.0
    for i, s in enumerate(samples):
        arr = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFaultError(f"calibration sample {i} contains NaN or Inf")
        if arr.size:
            peak = max(peak, float(np.max(np.abs(arr))))
    return QuantParams(peak / QMAX if peak > 0 else 1.0)


def quantize_tensor(t, q: QuantParams) -> np.ndarray:
    codes = round_half_away(np.asarray(t, dtype=np.float64) / q.scale)
    return np.clip(codes, -QMAX, QMAX).astype(np.int8)


def dequantize_tensor(a: np.ndarray, q: QuantParams) -> Tensor:
    return (np.asarray(a, dtype=np.float64) * q.scale).astype(np.float32)


def quantize_bias(bias: np.ndarray | None, input_qp: QuantParams, weight_qp: QuantParams) -> np.ndarray | None:
    if bias is None:
        return None
    codes = round_half_away(np.asarray(bias, dtype=np.float64) / (input_qp.scale * weight_qp.scale))
    if np.any(codes < INT32_MIN) or np.any(codes > INT32_MAX):
        raise NumericFaultError("bias does not fit a 32-bit integer at input_scale * weight_scale")
    return codes.astype(np.int32)


def quantized_conv2d(
    x_q: np.ndarray,
    w_q: ConvWeights,
    input_qp: QuantParams,
    weight_qp: QuantParams,
    out_qp: QuantParams,
    transposed: bool = False,
) -> np.ndarray:
    """int8 x int8 -> int32 accumulate -> requantize to out_qp.

    `w_q.kernel` holds int8 codes and `w_q.bias` int32 codes. Sums are formed
    in float64, exact while |acc| < 2**53; anything outside the int32 range is
    reported instead of wrapped.
    """
    if x_q.dtype != np.int8 or w_q.kernel.dtype != np.int8:
        raise QuantizationError(f"expected int8 input and kernel, got {x_q.dtype} and {w_q.kernel.dtype}")
    op = deconv2d if transposed else conv2d
    acc = op(x_q, w_q, acc_dtype=np.float64)
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        idx = np.unravel_index(int(np.argmax((acc < INT32_MIN) | (acc > INT32_MAX))), acc.shape)
        raise NumericFaultError(f"int32 accumulator overflow at output {tuple(int(i) for i in idx)}")
    multiplier = input_qp.scale * weight_qp.scale / out_qp.scale
    return np.clip(round_half_away(acc * multiplier), -QMAX, QMAX).astype(np.int8)


def calibrate_activations(graph: Graph, ws: WeightStore, calib: list[Tensor]) -> dict[str, QuantParams]:
    """Per-edge max-abs over float (fused) forward passes of every calibration tensor."""
    if not calib:
        raise QuantizationError("empty calibration set")
    observed: dict[str, list[np.ndarray]] = {}
    for x in calib:
        for node_id, value in executor.activations(graph, ws, x, fuse=True).items():
            observed.setdefault(node_id, []).append(value)
    return {node_id: calibrate_maxabs(values) for node_id, values in observed.items()}


def _quantize_layers(graph: Graph, ws: WeightStore, activations: dict[str, QuantParams],
                     weight_scales: dict[str, float] | None = None) -> tuple[dict[str, QuantizedLayer], set[str]]:
    folded, absorbed = fused_weights(graph, ws)
    layers = {}
    for node in graph.nodes:
        if node.kind not in ("conv", "deconv"):
            continue
        w = folded.get(node.id) or ws.conv_weights(node)
        if weight_scales is not None:
            wqp = QuantParams(weight_scales[node.id])
        else:
            wqp = calibrate_maxabs([w.kernel])
        layers[node.id] = QuantizedLayer(
            kernel=quantize_tensor(w.kernel, wqp),
            weight_qp=wqp,
            bias=quantize_bias(w.bias, activations[node.inputs[0]], wqp),
            groups=w.groups,
            stride=w.stride,
            padding=w.padding,
            transposed=node.kind == "deconv",
        )
    return layers, absorbed


def quantize_model(graph: Graph, ws: WeightStore, calib: list[Tensor]) -> QuantizedModel:
    ws.check_against(graph)
    activations = calibrate_activations(graph, ws, [as_tensor(x, "calibration") for x in calib])
    layers, absorbed = _quantize_layers(graph, ws, activations)
    logger.info(
        f"Quantize [{graph.name}] layers={len(layers)} edges={len(activations)} "
        f"folded_bn={len(absorbed)} calib={len(calib)}"
    )
    return QuantizedModel(graph, ws, layers, activations, frozenset(absorbed))


def _run_quantized(qm: QuantizedModel, x: Tensor, keep: bool) -> dict[str, Tensor]:
    """Per-node outputs (dequantized) of the INT8 path for one batch."""
    graph = qm.graph
    codes: dict[str, np.ndarray] = {}
    out: dict[str, Tensor] = {}
    for node in graph.nodes:
        qp = qm.activations[node.id]
        if node.kind == "input":
            q = quantize_tensor(x, qp)
        elif node.id in qm.absorbed:
            q = codes[node.inputs[0]]
        elif node.id in qm.layers:
            layer = qm.layers[node.id]
            src = node.inputs[0]
            w_q = ConvWeights(layer.kernel, layer.bias, layer.groups, layer.stride, layer.padding)
            q = quantized_conv2d(codes[src], w_q, qm.activations[src], layer.weight_qp, qp, layer.transposed)
        else:
            args = [dequantize_tensor(codes[i], qm.activations[i]) for i in node.inputs]
            q = quantize_tensor(apply_node(node, args, qm.ws), qp)
        codes[node.id] = q
        if keep or node.id == graph.output:
            out[node.id] = dequantize_tensor(q, qp)
    return out


def quantized_infer(qm: QuantizedModel, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    return _run_quantized(qm, x, keep=False)[qm.graph.output]


def fp16_weights(ws: WeightStore) -> WeightStore:
    return ws.map_arrays(fp16_round)


def _fp16_hook(node: Node, out: Tensor) -> Tensor:
    return fp16_round(out)


def fp16_infer(graph: Graph, ws: WeightStore, x) -> Tensor:
    return executor.infer(graph, fp16_weights(ws), x, hook=_fp16_hook)


def error_stats(reference: Tensor, other: Tensor) -> tuple[float, float]:
    diff = np.abs(np.asarray(reference, dtype=np.float64) - np.asarray(other, dtype=np.float64))
    if diff.size == 0:
        return 0.0, 0.0
    return float(diff.max()), float(diff.mean())


def compare_outputs(graph: Graph, ws: WeightStore, qm: QuantizedModel, inputs) -> QuantErrorReport:
    """FP32 vs FP16-simulated vs INT8 error, overall and per layer."""
    x = as_tensor(inputs)
    fp32 = executor.activations(graph, ws, x)
    fp16 = executor.activations(graph, fp16_weights(ws), x, hook=_fp16_hook)
    int8 = _run_quantized(qm, x, keep=True)
    fused_convs = {graph.node(bn).inputs[0] for bn in qm.absorbed}
    compared = [n.id for n in graph.nodes if n.kind != "input" and n.id not in fused_convs]

    def report(precision: str, values: dict[str, Tensor]) -> PrecisionError:
        layers = []
        for node_id in compared:
            mx, mean = error_stats(fp32[node_id], values[node_id])
            layers.append(LayerError(layer_id=node_id, max_abs=mx, mean_abs=mean))
        mx, mean = error_stats(fp32[graph.output], values[graph.output])
        return PrecisionError(precision=precision, max_abs=mx, mean_abs=mean, layers=layers)

    result = QuantErrorReport(fp16=report("fp16", fp16), int8=report("int8", int8))
    logger.info(
        f"Compare [{graph.name}] fp16_max={result.fp16.max_abs:.3e} int8_max={result.int8.max_abs:.3e}"
    )
    return result


def to_sidecar(qm: QuantizedModel) -> QuantSidecar:
    return QuantSidecar(
        bits=8,
        weights={lid: layer.weight_qp.scale for lid, layer in qm.layers.items()},
        activations={nid: qp.scale for nid, qp in qm.activations.items()},
    )


def save_sidecar(qm: QuantizedModel, path: Path | str) -> Path:
    path = Path(path)
    path.write_text(to_sidecar(qm).model_dump_json(indent=2))
    return path


def load_sidecar(path: Path | str) -> QuantSidecar:
    try:
        return QuantSidecar.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise DataFileError(f"cannot read quantization sidecar {path}: {e}") from e
    except ValidationError as e:
        raise QuantizationError(f"{path}: invalid quantization sidecar: {e.errors()[0]['msg']}") from e


def model_from_sidecar(graph: Graph, ws: WeightStore, sidecar: QuantSidecar) -> QuantizedModel:
    """Rebuild a QuantizedModel from stored scales without recalibrating."""
    missing = [n.id for n in graph.nodes if n.id not in sidecar.activations]
    missing += [n.id for n in graph.nodes if n.kind in ("conv", "deconv") and n.id not in sidecar.weights]
    if missing:
        raise QuantizationError(f"sidecar has no scale for layer '{missing[0]}'")
    activations = {nid: QuantParams(s) for nid, s in sidecar.activations.items()}
    layers, absorbed = _quantize_layers(graph, ws, activations, sidecar.weights)
    return QuantizedModel(graph, ws, layers, activations, frozenset(absorbed))

"""Static MAC and parameter accounting over a compiled graph.

Two conventions for transposed convolution:
  input  -- exact multiply-accumulates, h_in * w_in * kh * kw * c_in * c_out
  output -- legacy-tool counting over output positions, h_out * w_out * kh * kw * c_in * c_out
Convolutions are identical under both. BN, activations, pools, sums and
concats count zero MACs.
"""
import logging
import math

from app.core.errors import ConfigError
from app.models.schemas import FlopsReport, LayerCost, ModelConfig
from app.services.graph import Graph, Node, build_model

logger = logging.getLogger(__name__)


def node_params(node: Node) -> int:
    return sum(math.prod(shape) for shape in node.param_shapes().values())


def node_macs(node: Node, graph: Graph, convention: str = "output") -> int:
    a = node.attrs
    _, ho, wo = node.shape
    if node.kind == "conv":
        return ho * wo * a["kernel"] ** 2 * (a["c_in"] // a["groups"]) * a["c_out"]
    if node.kind == "deconv":
        if convention == "input":
            _, hi, wi = graph.node(node.inputs[0]).shape
            return hi * wi * a["kernel"] ** 2 * a["c_in"] * a["c_out"]
        return ho * wo * a["kernel"] ** 2 * a["c_in"] * a["c_out"]
    return 0


def graph_costs(graph: Graph, convention: str = "output") -> FlopsReport:
    if convention not in ("input", "output"):
        raise ConfigError(f"unknown convention '{convention}'")
    layers = [
        LayerCost(
            layer_id=n.id,
            kind=n.kind,
            out_shape=list(n.shape),
            macs=node_macs(n, graph, convention),
            params=node_params(n),
        )
        for n in graph.nodes
        if n.kind != "input"
    ]
    _, h, w = graph.input_node.shape
    return FlopsReport(
        model_name=graph.name,
        convention=convention,
        input_size=(h, w),
        layers=layers,
        total_macs=sum(l.macs for l in layers),
        total_params=sum(l.params for l in layers),
    )


def count_macs(cfg: ModelConfig, convention: str = "output") -> FlopsReport:
    report = graph_costs(build_model(cfg), convention)
    logger.info(
        f"Flops [{cfg.name}] convention={convention} gmacs={report.gflops():.3f} "
        f"params={report.total_params / 1e6:.2f}M"
    )
    return report


def count_graph_params(graph: Graph) -> int:
    return sum(node_params(n) for n in graph.nodes)


def count_params(cfg: ModelConfig) -> int:
    """Kernel + bias + batchnorm (gamma, beta, running mean/var) elements."""
    return count_graph_params(build_model(cfg))


def summarize_graph(report: FlopsReport, timings_ms: dict[str, float] | None = None) -> str:
    """Fixed-width per-layer table for terminal output."""
    header = f"{'layer':<36} {'kind':<10} {'out shape':<16} {'params':>10} {'MACs':>14}"
    if timings_ms is not None:
        header += f" {'ms':>9}"
    lines = [header, "-" * len(header)]
    for layer in report.layers:
        shape = "x".join(str(d) for d in layer.out_shape)
        line = f"{layer.layer_id:<36} {layer.kind:<10} {shape:<16} {layer.params:>10,} {layer.macs:>14,}"
        if timings_ms is not None:
            line += f" {timings_ms.get(layer.layer_id, 0.0):>9.3f}"
        lines.append(line)
    lines.append("-" * len(header))
    lines.append(f"{'total':<63} {report.total_params:>10,} {report.total_macs:>14,}")
    return "\n".join(lines)

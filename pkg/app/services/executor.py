"""Forward execution of a compiled Graph against a WeightStore."""
import logging
import threading
import time
from collections import defaultdict
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError, NumericFaultError, UnsupportedLayerError
from app.services import tensor_ops as ops
from app.services.graph import Graph, Node
from app.services.tensor_ops import ConvWeights, Tensor, as_tensor
from app.services.validator import plan_fusion
from app.services.weights import WeightStore

logger = logging.getLogger(__name__)

# (node, output) -> replacement output; used by the fp16 simulation and activation capture
NodeHook = Callable[[Node, Tensor], Tensor]


def apply_node(node: Node, args: list[Tensor], ws: WeightStore, conv: ConvWeights | None = None) -> Tensor:
    """Evaluate one float node. `conv` overrides the stored weights (fused kernels)."""
    kind, a = node.kind, node.attrs
    if kind == "conv":
        return ops.conv2d(args[0], conv or ws.conv_weights(node))
    if kind == "deconv":
        return ops.deconv2d(args[0], conv or ws.conv_weights(node))
    if kind == "bn":
        return ops.batchnorm_inference(args[0], ws.bn_params(node))
    if kind == "relu":
        return ops.relu(args[0])
    if kind == "leaky_relu":
        return ops.leaky_relu(args[0], a["slope"])
    if kind == "maxpool":
        return ops.maxpool(args[0], a["k"], a["stride"], a["pad"])
    if kind == "add":
        return ops.eltwise_sum(args[0], args[1])
    if kind == "concat":
        return ops.concat(args)
    raise UnsupportedLayerError(f"{node.id}: no executor for layer kind '{kind}'")


def fused_weights(graph: Graph, ws: WeightStore) -> tuple[dict[str, ConvWeights], set[str]]:
    """Folded (de)conv weights keyed by conv id, and the batchnorm ids they absorb."""
    folded = {}
    for bn_id, conv_id in plan_fusion(graph).items():
        conv = graph.node(conv_id)
        folded[conv_id] = ops.fuse_conv_bn(
            ws.conv_weights(conv), ws.bn_params(graph.node(bn_id)), transposed=conv.kind == "deconv"
        )
    return folded, set(plan_fusion(graph))


class GraphExecutor:
    """Runs graphs node by node in topological order.

    Batch items are executed independently (optionally on a thread pool) and
    merged in input order, so outputs do not depend on the thread count.
    """

    def __init__(self):
        self._lock = threading.Lock()

    def _forward(
        self,
        graph: Graph,
        ws: WeightStore,
        x: Tensor,
        folded: dict[str, ConvWeights],
        absorbed: set[str],
        hook: NodeHook | None,
        timings: dict | None,
        keep: bool,
    ) -> dict[str, Tensor]:
        remaining = {k: len(v) for k, v in graph.consumers().items()}
        values: dict[str, Tensor] = {}
        for node in graph.nodes:
            start = time.perf_counter()
            if node.kind == "input":
                out = x
            elif node.id in absorbed:
                out = values[node.inputs[0]]
            else:
                out = apply_node(node, [values[i] for i in node.inputs], ws, folded.get(node.id))
            if hook is not None:
                out = hook(node, out)
            if not np.all(np.isfinite(out)):
                raise NumericFaultError(f"layer '{node.id}' produced NaN or Inf")
            if timings is not None:
                elapsed = (time.perf_counter() - start) * 1000
                with self._lock:
                    timings[node.id] += elapsed
            values[node.id] = out
            if not keep:
                for src in node.inputs:
                    remaining[src] -= 1
                    if remaining[src] == 0 and src != graph.output:
                        del values[src]
        return values

    def run(
        self,
        graph: Graph,
        ws: WeightStore,
        x,
        fuse: bool = False,
        threads: int = settings.DEFAULT_THREADS,
        hook: NodeHook | None = None,
        timings: dict | None = None,
        keep_all: bool = False,
    ) -> list[dict[str, Tensor]]:
        """Per-batch-item node values (all nodes when keep_all, else the output)."""
        x = as_tensor(x)
        if x.shape[0] == 0:
            raise ConfigError("empty batch")
        if tuple(x.shape[1:]) != graph.input_node.shape:
            raise ConfigError(f"input shape {tuple(x.shape[1:])} does not match graph input {graph.input_node.shape}")
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        ws.check_against(graph)
        folded, absorbed = fused_weights(graph, ws) if fuse else ({}, set())

        def one(i: int) -> dict[str, Tensor]:
            return self._forward(graph, ws, x[i:i + 1], folded, absorbed, hook, timings, keep_all)

        if threads == 1 or x.shape[0] == 1:
            return [one(i) for i in range(x.shape[0])]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(x.shape[0])))

    def infer(self, graph: Graph, ws: WeightStore, x, fuse: bool = False, threads: int = settings.DEFAULT_THREADS,
              hook: NodeHook | None = None, timings: dict | None = None) -> Tensor:
        items = self.run(graph, ws, x, fuse=fuse, threads=threads, hook=hook, timings=timings)
        out = np.concatenate([v[graph.output] for v in items], axis=0)
        logger.debug(f"Infer [{graph.name}] batch={out.shape[0]} fuse={fuse} threads={threads} out={out.shape}")
        return out

    def activations(self, graph: Graph, ws: WeightStore, x, fuse: bool = False,
                    hook: NodeHook | None = None) -> dict[str, Tensor]:
        """Every node's output, batch items concatenated."""
        items = self.run(graph, ws, x, fuse=fuse, hook=hook, keep_all=True)
        return {nid: np.concatenate([v[nid] for v in items], axis=0) for nid in items[0]}

    def timed_infer(self, graph: Graph, ws: WeightStore, x, threads: int = settings.DEFAULT_THREADS,
                    fuse: bool = False) -> tuple[Tensor, dict[str, float]]:
        timings: dict[str, float] = defaultdict(float)
        out = self.infer(graph, ws, x, fuse=fuse, threads=threads, timings=timings)
        return out, {n.id: timings[n.id] for n in graph.nodes}


executor = GraphExecutor()


def infer(graph: Graph, ws: WeightStore, x, fuse: bool = False, threads: int = settings.DEFAULT_THREADS) -> Tensor:
    return executor.infer(graph, ws, x, fuse=fuse, threads=threads)

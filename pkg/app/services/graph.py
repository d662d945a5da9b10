"""Compiled layer graph for the encoder-decoder pose model.

The graph is a topologically ordered list of nodes; every node records its
static output shape (c, h, w) so costs and shape checks need no forward pass.
"""
import logging
from dataclasses import dataclass, field

from app.core.errors import ConfigError, UnsupportedLayerError
from app.models.schemas import ModelConfig, StageSpec
from app.services.encoders import EncoderPlan, encoder_plan
from app.services.tensor_ops import SUPPORTED_KERNELS, conv_output_size, deconv_output_size

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "leaky_relu")
PARAM_KINDS = ("conv", "deconv", "bn")
DECONV_STRIDE = 2
DECONV_PADDING = 1


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...]
    shape: tuple[int, int, int]
    attrs: dict = field(default_factory=dict)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        a = self.attrs
        if self.kind == "conv":
            shapes = {"weight": (a["c_out"], a["c_in"] // a["groups"], a["kernel"], a["kernel"])}
        elif self.kind == "deconv":
            shapes = {"weight": (a["c_in"], a["c_out"], a["kernel"], a["kernel"])}
        elif self.kind == "bn":
            c = a["channels"]
            return {"gamma": (c,), "beta": (c,), "running_mean": (c,), "running_var": (c,)}
        else:
            return {}
        if a.get("bias"):
            shapes["bias"] = (a["c_out"],)
        return shapes


@dataclass
class Graph:
    name: str
    nodes: list[Node]
    output: str
    features: dict[int, str] = field(default_factory=dict)  # stride -> node id

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    @property
    def input_node(self) -> Node:
        return self.nodes[0]

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.node(self.output).shape

    def param_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind in PARAM_KINDS]

    def consumers(self) -> dict[str, list[str]]:
        users: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                users[src].append(n.id)
        return users

    def check(self):
        """Producers precede consumers; ids are unique."""
        seen = set()
        for n in self.nodes:
            if n.id in seen:
                raise ConfigError(f"duplicate node id '{n.id}'")
            for src in n.inputs:
                if src not in seen:
                    raise ConfigError(f"node '{n.id}' consumes '{src}' before it is produced")
            seen.add(n.id)
        if self.output not in seen:
            raise ConfigError(f"graph output '{self.output}' is not a node")


class GraphBuilder:
    """Appends nodes while tracking shapes; raises on any inconsistency."""

    def __init__(self, name: str, input_shape: tuple[int, int, int]):
        self.name = name
        self.nodes: list[Node] = [Node("input", "input", (), tuple(input_shape))]
        self.features: dict[int, str] = {}
        self._shapes = {"input": tuple(input_shape)}

    def shape(self, node_id: str) -> tuple[int, int, int]:
        return self._shapes[node_id]

    def _add(self, node_id: str, kind: str, inputs: tuple[str, ...], shape, **attrs) -> str:
        if node_id in self._shapes:
            raise ConfigError(f"duplicate node id '{node_id}'")
        self.nodes.append(Node(node_id, kind, inputs, tuple(shape), attrs))
        self._shapes[node_id] = tuple(shape)
        return node_id

    def conv(self, node_id, src, c_out, kernel=1, stride=1, groups=1, bias=False) -> str:
        if kernel not in SUPPORTED_KERNELS:
            raise UnsupportedLayerError(f"{node_id}: kernel {kernel} outside supported {SUPPORTED_KERNELS}")
        c, h, w = self.shape(src)
        if c % groups or c_out % groups:
            raise ConfigError(f"{node_id}: channels {c}->{c_out} not divisible by groups={groups}")
        pad = kernel // 2
        ho = conv_output_size(h, kernel, stride, pad)
        wo = conv_output_size(w, kernel, stride, pad)
        if ho < 1 or wo < 1:
            raise ConfigError(f"{node_id}: spatial size collapses below 1 ({h}x{w} -> {ho}x{wo})")
        return self._add(
            node_id, "conv", (src,), (c_out, ho, wo),
            c_in=c, c_out=c_out, kernel=kernel, stride=stride, padding=pad, groups=groups, bias=bias,
        )

    def deconv(self, node_id, src, c_out, kernel=4, stride=DECONV_STRIDE, padding=DECONV_PADDING, bias=False) -> str:
        if kernel not in SUPPORTED_KERNELS:
            raise UnsupportedLayerError(f"{node_id}: kernel {kernel} outside supported {SUPPORTED_KERNELS}")
        c, h, w = self.shape(src)
        ho = deconv_output_size(h, kernel, stride, padding)
        wo = deconv_output_size(w, kernel, stride, padding)
        if ho < 1 or wo < 1:
            raise ConfigError(f"{node_id}: negative deconv output size {ho}x{wo}")
        return self._add(
            node_id, "deconv", (src,), (c_out, ho, wo),
            c_in=c, c_out=c_out, kernel=kernel, stride=stride, padding=padding, groups=1, bias=bias,
        )

    def bn(self, node_id, src, eps: float) -> str:
        c = self.shape(src)[0]
        return self._add(node_id, "bn", (src,), self.shape(src), channels=c, eps=eps)

    def act(self, node_id, src, kind="relu", slope=0.1) -> str:
        if kind not in ACTIVATIONS:
            raise UnsupportedLayerError(f"{node_id}: activation '{kind}' is not in the layer vocabulary")
        attrs = {"slope": slope} if kind == "leaky_relu" else {}
        return self._add(node_id, kind, (src,), self.shape(src), **attrs)

    def maxpool(self, node_id, src, k=3, stride=2, pad=1) -> str:
        c, h, w = self.shape(src)
        shape = (c, conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad))
        return self._add(node_id, "maxpool", (src,), shape, k=k, stride=stride, pad=pad)

    def add(self, node_id, a, b) -> str:
        if self.shape(a) != self.shape(b):
            raise ConfigError(f"{node_id}: eltwise_sum shape mismatch {self.shape(a)} vs {self.shape(b)}")
        return self._add(node_id, "add", (a, b), self.shape(a))

    def concat(self, node_id, srcs: list[str]) -> str:
        shapes = [self.shape(s) for s in srcs]
        if any(s[1:] != shapes[0][1:] for s in shapes):
            raise ConfigError(f"{node_id}: concat spatial mismatch {shapes}")
        return self._add(node_id, "concat", tuple(srcs), (sum(s[0] for s in shapes),) + shapes[0][1:])

    def conv_bn_act(self, prefix, src, c_out, kernel=1, stride=1, groups=1, eps=1e-5, act="relu", slope=0.1):
        x = self.conv(f"{prefix}.conv", src, c_out, kernel, stride, groups)
        x = self.bn(f"{prefix}.bn", x, eps)
        if act is None:
            return x
        return self.act(f"{prefix}.{act}", x, act, slope)

    def mark_feature(self, node_id: str):
        h = self.shape(node_id)[1]
        stride = self.shape("input")[1] // h
        self.features[stride] = node_id

    def build(self, output: str) -> Graph:
        g = Graph(self.name, self.nodes, output, dict(self.features))
        g.check()
        return g


def _mbconv(b: GraphBuilder, prefix, src, spec: StageSpec, c_out, stride, eps, act, slope):
    c_in = b.shape(src)[0]
    hidden = c_in * spec.expand_ratio
    x = src
    if spec.expand_ratio != 1:
        x = b.conv_bn_act(f"{prefix}.expand", x, hidden, 1, 1, 1, eps, act, slope)
    x = b.conv_bn_act(f"{prefix}.dw", x, hidden, spec.kernel, stride, hidden, eps, act, slope)
    x = b.conv_bn_act(f"{prefix}.project", x, c_out, 1, 1, 1, eps, None)
    if stride == 1 and c_in == c_out:
        x = b.add(f"{prefix}.add", x, src)
    return x


def _resblock(b: GraphBuilder, prefix, src, spec: StageSpec, stride, eps, act, slope):
    c_in = b.shape(src)[0]
    width = spec.channels
    c_out = width * spec.expand_ratio
    if spec.block == "basic":
        x = b.conv_bn_act(f"{prefix}.conv1", src, width, spec.kernel, stride, 1, eps, act, slope)
        x = b.conv_bn_act(f"{prefix}.conv2", x, c_out, spec.kernel, 1, 1, eps, None)
    else:
        x = b.conv_bn_act(f"{prefix}.conv1", src, width, 1, 1, 1, eps, act, slope)
        x = b.conv_bn_act(f"{prefix}.conv2", x, width, spec.kernel, stride, 1, eps, act, slope)
        x = b.conv_bn_act(f"{prefix}.conv3", x, c_out, 1, 1, 1, eps, None)
    shortcut = src
    if stride != 1 or c_in != c_out:
        shortcut = b.conv_bn_act(f"{prefix}.downsample", src, c_out, 1, stride, 1, eps, None)
    x = b.add(f"{prefix}.add", x, shortcut)
    return b.act(f"{prefix}.{act}", x, act, slope)


def build_encoder(b: GraphBuilder, plan: EncoderPlan, cfg: ModelConfig) -> str:
    eps, slope = cfg.bn_eps, cfg.leaky_slope
    x = b.conv_bn_act("stem", "input", plan.stem_channels, plan.stem_kernel, 2, 1, eps, cfg.activation, slope)
    if plan.family == "resnet":
        x = b.maxpool("stem.maxpool", x)
    else:
        b.mark_feature(x)
    for si, spec in enumerate(plan.stages, start=1):
        act = spec.activation or cfg.activation
        for r in range(spec.repeats):
            prefix = f"stage{si}.block{r + 1}"
            stride = spec.stride if r == 0 else 1
            if spec.block == "mbconv":
                x = _mbconv(b, prefix, x, spec, spec.channels, stride, eps, act, slope)
            elif spec.block in ("basic", "bottleneck"):
                x = _resblock(b, prefix, x, spec, stride, eps, act, slope)
            else:
                raise UnsupportedLayerError(f"stage{si}: unknown block type '{spec.block}'")
        b.mark_feature(x)
    if plan.top_channels:
        x = b.conv_bn_act("top", x, plan.top_channels, 1, 1, 1, eps, cfg.activation, slope)
        b.mark_feature(x)
    return x


def build_decoder(b: GraphBuilder, src: str, cfg: ModelConfig) -> str:
    eps, act, slope = cfg.bn_eps, cfg.activation, cfg.leaky_slope
    x = src
    if cfg.head_channels is not None:
        x = b.conv_bn_act("head", x, cfg.head_channels, 1, 1, 1, eps, act, slope)
    input_h = b.shape("input")[1]
    for level, channels in enumerate(cfg.deconv_channels, start=1):
        prefix = f"deconv{level}"
        x = b.deconv(f"{prefix}.deconv", x, channels, kernel=cfg.deconv_kernel)
        x = b.bn(f"{prefix}.bn", x, eps)
        x = b.act(f"{prefix}.{act}", x, act, slope)
        if cfg.skip_mode == "none":
            continue
        stride = input_h // b.shape(x)[1]
        feature = b.features.get(stride)
        if feature is None:
            raise ConfigError(
                f"{prefix}: skip_mode '{cfg.skip_mode}' needs an encoder feature at stride {stride}, "
                f"encoder exposes {sorted(b.features)}"
            )
        if cfg.skip_mode == "sum":
            proj = b.conv(f"{prefix}.skip.proj", feature, channels, 1, 1, 1, bias=True)
            x = b.add(f"{prefix}.skip.add", x, proj)
        else:
            cat = b.concat(f"{prefix}.skip.concat", [x, feature])
            x = b.conv_bn_act(f"{prefix}.skip.reduce", cat, channels, 1, 1, 1, eps, act, slope)
    return b.conv("final", x, cfg.num_keypoints, 1, 1, 1, bias=True)


def assemble(cfg: ModelConfig) -> Graph:
    """Build without running validate_config; raises on structural problems."""
    plan = encoder_plan(cfg.encoder, cfg.stages)
    h, w = cfg.input_size
    b = GraphBuilder(cfg.name, (3, h, w))
    x = build_encoder(b, plan, cfg)
    out = build_decoder(b, x, cfg)
    return b.build(out)


def build_model(cfg: ModelConfig) -> Graph:
    from app.services.validator import validate_config

    errors = [d for d in validate_config(cfg) if d.level == "error"]
    if errors:
        raise ConfigError("; ".join(f"[{d.rule}] {d.message}" for d in errors))
    graph = assemble(cfg)
    c, hh, ww = graph.output_shape
    logger.info(f"Graph [{cfg.name}] encoder={cfg.encoder} nodes={len(graph.nodes)} heatmap={c}x{hh}x{ww}")
    return graph

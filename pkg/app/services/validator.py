"""Embeddability checks for a ModelConfig.

Structural impossibilities are errors; hardware-efficiency rules (channel
multiples, per-kernel channel limits, non-fusible sequences) are warnings.
"""
import json
import logging
from pathlib import Path

from pydantic import ValidationError
from rapidfuzz import process

from app.core.config import settings
from app.core.errors import ConfigError, DataFileError, PoseKitError
from app.models.schemas import Diagnostic, ModelConfig
from app.services.encoders import ENCODERS, suggest_encoder
from app.services.graph import ACTIVATIONS, Graph, assemble
from app.services.tensor_ops import SUPPORTED_KERNELS

logger = logging.getLogger(__name__)

MAX_DECONV_LEVELS = 4
ENCODER_STRIDE = 32


def plan_fusion(graph: Graph) -> dict[str, str]:
    """Map each foldable batchnorm id to the (de)conv it folds into."""
    users = graph.consumers()
    plan = {}
    for node in graph.nodes:
        if node.kind != "bn":
            continue
        src = graph.node(node.inputs[0])
        if src.kind in ("conv", "deconv") and users[src.id] == [node.id]:
            plan[node.id] = src.id
    return plan


def _err(rule, message, layer=None) -> Diagnostic:
    return Diagnostic(level="error", rule=rule, message=message, layer=layer)


def _warn(rule, message, layer=None) -> Diagnostic:
    return Diagnostic(level="warning", rule=rule, message=message, layer=layer)


def _static_checks(cfg: ModelConfig) -> list[Diagnostic]:
    diags = []
    if cfg.encoder not in ENCODERS:
        hint = suggest_encoder(cfg.encoder)
        suffix = f" (did you mean '{hint}'?)" if hint else ""
        diags.append(_err("encoder", f"unsupported encoder '{cfg.encoder}'{suffix}", "encoder"))
    if not 1 <= len(cfg.deconv_channels) <= MAX_DECONV_LEVELS:
        diags.append(_err("deconv-levels", f"deconv level count {len(cfg.deconv_channels)} outside [1, {MAX_DECONV_LEVELS}]"))
    if cfg.num_keypoints < 1:
        diags.append(_err("num-keypoints", f"num_keypoints must be >= 1, got {cfg.num_keypoints}", "final"))
    h, w = cfg.input_size
    if h <= 0 or w <= 0 or h % ENCODER_STRIDE or w % ENCODER_STRIDE:
        diags.append(_err("input-size", f"input size {h}x{w} must be positive and divisible by {ENCODER_STRIDE}", "input"))
    if cfg.deconv_kernel != 4:
        diags.append(_err(
            "deconv-kernel",
            f"deconv kernel {cfg.deconv_kernel} cannot upsample exactly 2x with stride 2 (use 4)",
            "deconv",
        ))
    if not 0 <= cfg.leaky_slope < 1:
        diags.append(_err("activation", f"leaky_slope {cfg.leaky_slope} outside [0, 1)"))
    if cfg.bn_eps <= 0:
        diags.append(_err("batchnorm", f"bn_eps must be > 0, got {cfg.bn_eps}"))
    if cfg.activation not in ACTIVATIONS:
        diags.append(_err("layer-vocabulary", f"activation '{cfg.activation}' is not in the layer vocabulary {ACTIVATIONS}", "encoder"))

    channel_fields = [("head", cfg.head_channels)] if cfg.head_channels is not None else []
    channel_fields += [(f"deconv{i}", c) for i, c in enumerate(cfg.deconv_channels, start=1)]
    for si, spec in enumerate(cfg.stages or [], start=1):
        layer = f"stage{si}"
        if spec.activation is not None and spec.activation not in ACTIVATIONS:
            diags.append(_err("layer-vocabulary", f"{layer}: activation '{spec.activation}' is not in the layer vocabulary", layer))
        if spec.kernel not in SUPPORTED_KERNELS:
            diags.append(_err("kernel-size", f"{layer}: kernel {spec.kernel} outside supported {SUPPORTED_KERNELS}", layer))
        if spec.repeats < 1 or spec.stride not in (1, 2) or spec.expand_ratio < 1:
            diags.append(_err("stage", f"{layer}: repeats >= 1, stride in (1, 2) and expand_ratio >= 1 required", layer))
        channel_fields.append((layer, spec.channels))
    for layer, c in channel_fields:
        if c < 1:
            diags.append(_err("channels", f"{layer}: channel count must be >= 1, got {c}", layer))
    return diags


def _graph_checks(graph: Graph, strict_3x3: bool) -> list[Diagnostic]:
    diags = []
    multiple = settings.CHANNEL_MULTIPLE
    for node in graph.nodes:
        if node.kind not in ("conv", "deconv"):
            continue
        a = node.attrs
        k = a["kernel"]
        if node.id != "final" and a["c_out"] % multiple:
            diags.append(_warn("channel-multiple", f"{node.id}: channel {a['c_out']} not a multiple of {multiple}", node.id))
        limit = settings.MAX_CHANNELS_BY_KERNEL.get(k)
        if node.kind == "conv" and a["groups"] == 1 and limit and a["c_out"] > limit:
            diags.append(_warn("max-channels", f"{node.id}: {a['c_out']} channels exceeds {limit} max for {k}x{k}", node.id))
        if strict_3x3 and node.kind == "conv" and k not in (1, 3):
            diags.append(_warn("strict-3x3", f"{node.id}: {k}x{k} kernel outside strict 3x3 mode", node.id))

    fused = plan_fusion(graph)
    for node in graph.nodes:
        if node.kind == "bn" and node.id not in fused:
            diags.append(_warn("fusion", f"{node.id}: batchnorm cannot be folded into its producer", node.id))
    return diags


def validate_config(cfg: ModelConfig, strict_3x3: bool = False) -> list[Diagnostic]:
    diags = _static_checks(cfg)
    if any(d.level == "error" for d in diags):
        return diags
    try:
        graph = assemble(cfg)
    except PoseKitError as e:
        diags.append(_err("structure", str(e)))
        return diags
    diags.extend(_graph_checks(graph, strict_3x3))
    logger.info(
        f"Validate [{cfg.name}] errors={sum(d.level == 'error' for d in diags)} "
        f"warnings={sum(d.level == 'warning' for d in diags)}"
    )
    return diags


def _suggest_key(key: str) -> str | None:
    match = process.extractOne(key, list(ModelConfig.model_fields), score_cutoff=60)
    return match[0] if match else None


def parse_config(text: str, source: str = "<config>") -> ModelConfig:
    """Parse config JSON; unknown keys are errors with a did-you-mean hint."""
    try:
        return ModelConfig.model_validate_json(text)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"])
            msg = err["msg"]
            if err["type"] == "extra_forbidden":
                hint = _suggest_key(str(err["loc"][-1]))
                msg = "unknown key" + (f" (did you mean '{hint}'?)" if hint else "")
            problems.append(f"{loc}: {msg}")
        raise ConfigError(f"{source}: invalid config: " + "; ".join(problems)) from e


def load_config(path: Path | str) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataFileError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))


def config_text(cfg: ModelConfig) -> str:
    return json.dumps(cfg.model_dump(exclude_none=False), indent=2, sort_keys=True)

"""Pydantic schemas for config files, reports and data files."""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter


class StageSpec(BaseModel):
    """One encoder stage: `repeats` identical blocks, the first one strided."""
    model_config = ConfigDict(extra="forbid")

    block: str = "mbconv"  # mbconv, basic, bottleneck
    expand_ratio: int = 1
    kernel: int = 3
    stride: int = 1
    channels: int
    repeats: int = 1
    activation: str | None = None  # overrides ModelConfig.activation


class ModelConfig(BaseModel):
    """Declarative architecture description; field names are the file format."""
    model_config = ConfigDict(extra="forbid")

    name: str = "default"
    encoder: str = "reduced-efficientnet-b1"
    stages: list[StageSpec] | None = None
    head_channels: int | None = 40  # None: no head conv, deconv reads the encoder output
    deconv_channels: list[int] = Field(default_factory=lambda: [32, 32, 32])
    deconv_kernel: int = 4
    skip_mode: Literal["none", "sum", "concat"] = "none"
    num_keypoints: int = 17
    input_size: tuple[int, int] = (256, 192)
    activation: str = "relu"
    leaky_slope: float = 0.1
    bn_eps: float = 1e-5


class Diagnostic(BaseModel):
    level: Literal["error", "warning"]
    rule: str
    message: str
    layer: str | None = None


DiagnosticList = TypeAdapter(list[Diagnostic])


class LayerCost(BaseModel):
    layer_id: str
    kind: str
    out_shape: list[int]
    macs: int
    params: int


class FlopsReport(BaseModel):
    """Per-layer MAC/param ledger; totals equal the per-layer sums."""
    model_name: str
    convention: Literal["input", "output"]
    input_size: tuple[int, int]
    layers: list[LayerCost]
    total_macs: int
    total_params: int

    def gflops(self, double_count: bool = False) -> float:
        factor = 2 if double_count else 1
        return self.total_macs * factor * 1e-9


class ThresholdMetrics(BaseModel):
    threshold: float
    ap: float
    ar: float


class EvalResult(BaseModel):
    ap: float
    ap50: float
    ap_medium: float
    ar: float
    per_threshold: list[ThresholdMetrics] = Field(default_factory=list)


class WeightEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_id: str
    param: str
    dtype: Literal["f32"] = "f32"
    shape: list[int]
    offset: int


class WeightManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    entries: list[WeightEntry] = Field(default_factory=list)
    blob_size: int = 0


class QuantSidecar(BaseModel):
    """Per-tensor symmetric scales for weights (by layer) and activations (by edge)."""
    bits: int = 8
    weights: dict[str, float] = Field(default_factory=dict)
    activations: dict[str, float] = Field(default_factory=dict)


class ImageRecord(BaseModel):
    id: int
    width: int
    height: int


class AnnotationRecord(BaseModel):
    image_id: int
    keypoints: list[float]  # flat (x, y, visibility) triplets
    area: float
    bbox: list[float]  # x, y, w, h


class AnnotationFile(BaseModel):
    images: list[ImageRecord] = Field(default_factory=list)
    annotations: list[AnnotationRecord] = Field(default_factory=list)


class DetectionRecord(BaseModel):
    image_id: int
    keypoints: list[float]  # flat (x, y, confidence) triplets
    score: float
    fallback: list[bool] | None = None  # per keypoint, set by dark decoding


DetectionList = TypeAdapter(list[DetectionRecord])


class BoxRecord(BaseModel):
    """One person box per heatmap stack in a decode run, in heatmap-batch order."""
    image_id: int
    cx: float
    cy: float
    width: float
    height: float
    score: float = 1.0


BoxList = TypeAdapter(list[BoxRecord])


class LayerError(BaseModel):
    layer_id: str
    max_abs: float
    mean_abs: float


class PrecisionError(BaseModel):
    precision: Literal["fp16", "int8"]
    max_abs: float
    mean_abs: float
    layers: list[LayerError] = Field(default_factory=list)


class QuantErrorReport(BaseModel):
    fp16: PrecisionError
    int8: PrecisionError


class LossReport(BaseModel):
    loss: float
    supervised: float
    distillation: float
    alpha: float
    num_elements: int


class LayerTiming(BaseModel):
    layer_id: str
    kind: str
    mean_ms: float
    total_ms: float


class BenchReport(BaseModel):
    model_name: str
    iters: int
    threads: int
    layers: list[LayerTiming]
    total_ms: float
    output_checksum: str


class RunReport(BaseModel):
    run_id: str
    command: list[str]
    config_hash: str | None = None
    stages: list[dict]
    stats: dict
    outputs: list[str]
    warnings: list[str]


class OksConstantsFile(BaseModel):
    """Per-keypoint OKS falloff constants k_i (COCO: twice the annotated sigmas)."""
    model_config = ConfigDict(extra="forbid")

    k: list[float]
    names: list[str] | None = None

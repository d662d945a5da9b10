"""Stage layouts for the supported feature extractors.

Reduced EfficientNet keeps the standard B0-B6 compound scaling but every block
is SE-free and uses the configured activation (ReLU by default). ResNets use a
5x5 stride-2 stem so every kernel stays inside the layer vocabulary.
"""
import math
from dataclasses import dataclass

from rapidfuzz import process

from app.core.errors import ConfigError
from app.models.schemas import StageSpec

# expand_ratio, kernel, stride, channels, repeats
EFFICIENTNET_B0_STAGES = [
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
]
EFFICIENTNET_STEM = 32
EFFICIENTNET_TOP = 1280

# width, depth multipliers
EFFICIENTNET_SCALING = {
    "b0": (1.0, 1.0),
    "b1": (1.0, 1.1),
    "b2": (1.1, 1.2),
    "b3": (1.2, 1.4),
    "b4": (1.4, 1.8),
    "b5": (1.6, 2.2),
    "b6": (1.8, 2.6),
}

RESNET_LAYOUTS = {
    "resnet-18": ("basic", [2, 2, 2, 2]),
    "resnet-34": ("basic", [3, 4, 6, 3]),
    "resnet-50": ("bottleneck", [3, 4, 6, 3]),
}
RESNET_WIDTHS = [64, 128, 256, 512]
RESNET_STEM = 64


def make_divisible(v: float, divisor: int = 8, min_value: int | None = None) -> int:
    if min_value is None:
        min_value = divisor
    new_v = max(min_value, int(v + divisor / 2) // divisor * divisor)
    # Make sure that round down does not go down by more than 10%.
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass(frozen=True)
class EncoderPlan:
    family: str  # efficientnet or resnet
    stem_channels: int
    stem_kernel: int
    stages: list[StageSpec]
    top_channels: int | None  # final 1x1 conv (EfficientNet only)


def _efficientnet_plan(variant: str, fpga: bool) -> EncoderPlan:
    width, depth = EFFICIENTNET_SCALING[variant]
    stages = []
    for expand, kernel, stride, channels, repeats in EFFICIENTNET_B0_STAGES:
        stages.append(
            StageSpec(
                block="mbconv",
                expand_ratio=expand,
                kernel=3 if fpga else kernel,
                stride=stride,
                channels=make_divisible(channels * width),
                repeats=int(math.ceil(depth * repeats)),
            )
        )
    return EncoderPlan(
        family="efficientnet",
        stem_channels=make_divisible(EFFICIENTNET_STEM * width),
        stem_kernel=3,
        stages=stages,
        top_channels=make_divisible(EFFICIENTNET_TOP * width),
    )


def _resnet_plan(name: str) -> EncoderPlan:
    block, repeats = RESNET_LAYOUTS[name]
    expand = 4 if block == "bottleneck" else 1
    stages = [
        StageSpec(
            block=block,
            expand_ratio=expand,
            kernel=3,
            stride=1 if i == 0 else 2,
            channels=width,
            repeats=r,
        )
        for i, (width, r) in enumerate(zip(RESNET_WIDTHS, repeats))
    ]
    return EncoderPlan(family="resnet", stem_channels=RESNET_STEM, stem_kernel=5, stages=stages, top_channels=None)


ENCODERS = {
    **{f"reduced-efficientnet-{v}": (lambda v=v: _efficientnet_plan(v, fpga=False)) for v in EFFICIENTNET_SCALING},
    "reduced-efficientnet-b1-fpga": lambda: _efficientnet_plan("b1", fpga=True),
    **{name: (lambda name=name: _resnet_plan(name)) for name in RESNET_LAYOUTS},
}


def suggest_encoder(name: str) -> str | None:
    match = process.extractOne(name, list(ENCODERS), score_cutoff=60)
    return match[0] if match else None


def encoder_plan(name: str, stages: list[StageSpec] | None = None) -> EncoderPlan:
    """Resolve an encoder name to its plan; `stages` replaces the default stage list."""
    factory = ENCODERS.get(name)
    if factory is None:
        hint = suggest_encoder(name)
        suffix = f" (did you mean '{hint}'?)" if hint else ""
        raise ConfigError(f"unsupported encoder '{name}'{suffix}")
    plan = factory()
    if stages is not None:
        plan = EncoderPlan(
            family=plan.family,
            stem_channels=plan.stem_channels,
            stem_kernel=plan.stem_kernel,
            stages=list(stages),
            top_channels=plan.top_channels,
        )
    return plan

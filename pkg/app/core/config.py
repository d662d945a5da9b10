import os
from pathlib import Path

PACKAGE_ROOT = Path(__file__).resolve().parent.parent


class Settings:
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Assumed-but-unpublished defaults; echoed as assumption warnings in reports.
    HEATMAP_SIGMA: float = 2.0
    BOX_MARGIN: float = 1.25
    DISTILL_ALPHA: float = 1.0
    OKS_CONSTANTS_PATH: Path = PACKAGE_ROOT / "data" / "coco_oks_constants.json"

    NUM_KEYPOINTS: int = 17
    HEATMAP_STRIDE: int = 4
    AR_MAX_DETS: int = 20
    DEFAULT_THREADS: int = 1
    FUSION_TOLERANCE: float = 1e-4

    # Accelerator limits for dense convolutions.
    MAX_CHANNELS_BY_KERNEL: dict[int, int] = {3: 648, 5: 1816}
    CHANNEL_MULTIPLE: int = 8


settings = Settings()

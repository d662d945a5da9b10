import json

import numpy as np
import pytest

from app.models.schemas import ModelConfig
from app.services.graph import GraphBuilder
from app.services.weights import init_weights

TINY_CONFIG = {
    "name": "tiny",
    "encoder": "reduced-efficientnet-b0",
    "stages": [
        {"block": "mbconv", "expand_ratio": 1, "kernel": 3, "stride": 2, "channels": 8, "repeats": 1},
        {"block": "mbconv", "expand_ratio": 2, "kernel": 3, "stride": 2, "channels": 16, "repeats": 1},
        {"block": "mbconv", "expand_ratio": 2, "kernel": 5, "stride": 2, "channels": 16, "repeats": 2},
        {"block": "mbconv", "expand_ratio": 2, "kernel": 3, "stride": 2, "channels": 24, "repeats": 1},
    ],
    "head_channels": 16,
    "deconv_channels": [8, 8, 8],
    "num_keypoints": 17,
    "input_size": [64, 32],
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def build_micro_graph(c_in: int = 3, size: tuple[int, int] = (16, 12), keypoints: int = 4):
    """conv-bn-relu (stride 2) -> deconv-bn-relu -> 1x1 conv with bias."""
    b = GraphBuilder("micro", (c_in, *size))
    x = b.conv_bn_act("enc", "input", 8, 3, 2)
    x = b.deconv("up.deconv", x, 8)
    x = b.bn("up.bn", x, 1e-5)
    x = b.act("up.relu", x)
    return b.build(b.conv("final", x, keypoints, 1, 1, 1, bias=True))


@pytest.fixture
def micro_graph():
    return build_micro_graph()


@pytest.fixture
def micro_weights(micro_graph):
    return init_weights(micro_graph, seed=7)


def gaussian_map(h: int, w: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))

"""Weight store, its manifest + raw blob serialization, and deterministic init."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.errors import ConfigError, DataFileError, WeightStoreError
from app.models.schemas import WeightEntry, WeightManifest
from app.services.graph import Graph
from app.services.tensor_ops import BnParams, ConvWeights

logger = logging.getLogger(__name__)


@dataclass
class WeightStore:
    """layer id -> parameter name -> float32 array."""
    params: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def set(self, layer_id: str, name: str, value: np.ndarray):
        self.params.setdefault(layer_id, {})[name] = np.ascontiguousarray(value, dtype=np.float32)

    def get(self, layer_id: str, name: str) -> np.ndarray:
        try:
            return self.params[layer_id][name]
        except KeyError:
            raise WeightStoreError(f"missing weight '{name}' for layer '{layer_id}'") from None

    def conv_weights(self, node) -> ConvWeights:
        a = node.attrs
        bias = self.get(node.id, "bias") if a.get("bias") else None
        return ConvWeights(
            kernel=self.get(node.id, "weight"),
            bias=bias,
            groups=a["groups"],
            stride=(a["stride"], a["stride"]),
            padding=(a["padding"], a["padding"]),
        )

    def bn_params(self, node) -> BnParams:
        return BnParams(
            gamma=self.get(node.id, "gamma"),
            beta=self.get(node.id, "beta"),
            running_mean=self.get(node.id, "running_mean"),
            running_var=self.get(node.id, "running_var"),
            eps=node.attrs["eps"],
        )

    def total_elements(self) -> int:
        return sum(arr.size for layer in self.params.values() for arr in layer.values())

    def map_arrays(self, fn) -> "WeightStore":
        return WeightStore({lid: {k: fn(v) for k, v in p.items()} for lid, p in self.params.items()})

    def bitwise_equal(self, other: "WeightStore") -> bool:
        if list(self.params) != list(other.params):
            return False
        for lid, p in self.params.items():
            q = other.params[lid]
            if list(p) != list(q):
                return False
            for name, arr in p.items():
                if arr.shape != q[name].shape or arr.tobytes() != q[name].tobytes():
                    return False
        return True

    def check_against(self, graph: Graph):
        """Every parameterised layer present with matching shapes."""
        for node in graph.param_nodes():
            for name, shape in node.param_shapes().items():
                arr = self.get(node.id, name)
                if tuple(arr.shape) != tuple(shape):
                    raise WeightStoreError(
                        f"layer '{node.id}' param '{name}' has shape {tuple(arr.shape)}, expected {tuple(shape)}"
                    )


def save_weights(ws: WeightStore) -> tuple[WeightManifest, bytes]:
    entries = []
    chunks = []
    offset = 0
    for layer_id, params in ws.params.items():
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(WeightEntry(layer_id=layer_id, param=name, shape=list(arr.shape), offset=offset))
            chunks.append(raw)
            offset += len(raw)
    return WeightManifest(entries=entries, blob_size=offset), b"".join(chunks)


def load_weights(manifest: WeightManifest, blob: bytes) -> WeightStore:
    if manifest.blob_size != len(blob):
        raise WeightStoreError(f"truncated blob: manifest expects {manifest.blob_size} bytes, got {len(blob)}")
    ws = WeightStore()
    cursor = 0
    for i, e in enumerate(sorted(manifest.entries, key=lambda e: e.offset)):
        if e.offset != cursor:
            raise WeightStoreError(f"entry {i} ({e.layer_id}.{e.param}) at offset {e.offset}, expected {cursor}")
        nbytes = 4 * math.prod(e.shape)
        if e.offset + nbytes > len(blob):
            raise WeightStoreError(f"entry {e.layer_id}.{e.param} runs past end of blob")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=e.offset)
        ws.set(e.layer_id, e.param, arr.reshape(e.shape).astype(np.float32))
        cursor += nbytes
    if cursor != len(blob):
        raise WeightStoreError(f"manifest covers {cursor} bytes, blob has {len(blob)}")
    return ws


def write_weights(ws: WeightStore, manifest_path: Path | str, blob_path: Path | str):
    manifest, blob = save_weights(ws)
    Path(manifest_path).write_text(manifest.model_dump_json(indent=2))
    Path(blob_path).write_bytes(blob)
    logger.info(f"Weights saved entries={len(manifest.entries)} bytes={len(blob)} -> {blob_path}")


def read_weights(manifest_path: Path | str, blob_path: Path | str) -> WeightStore:
    try:
        manifest = WeightManifest.model_validate_json(Path(manifest_path).read_text())
        blob = Path(blob_path).read_bytes()
    except OSError as e:
        raise DataFileError(f"cannot read weights: {e}") from e
    except ValidationError as e:
        raise WeightStoreError(f"{manifest_path}: invalid weight manifest: {e.errors()[0]['msg']}") from e
    return load_weights(manifest, blob)


def blob_path_for(manifest_path: Path | str) -> Path:
    """Conventional blob location next to a manifest: weights.json -> weights.bin."""
    return Path(manifest_path).with_suffix(".bin")


def init_weights(graph: Graph, seed: int = 0, scheme: str = "he") -> WeightStore:
    """Deterministic parameters for every layer of `graph`.

    scheme "he": He-normal kernels, zero biases, batchnorm stats near identity.
    A stride-2 deconv output sees a quarter of the kernel taps, so its fan-in
    is c_in * kh * kw / 4.
    scheme "zeros": every kernel, bias, gamma, beta and mean zero; var one.
    """
    if scheme not in ("he", "zeros"):
        raise ConfigError(f"unknown init scheme '{scheme}', expected 'he' or 'zeros'")
    rng = np.random.default_rng(seed)
    ws = WeightStore()
    for node in graph.param_nodes():
        shapes = node.param_shapes()
        if node.kind == "bn":
            c = shapes["gamma"][0]
            if scheme == "zeros":
                ws.set(node.id, "gamma", np.zeros(c))
                ws.set(node.id, "beta", np.zeros(c))
                ws.set(node.id, "running_mean", np.zeros(c))
                ws.set(node.id, "running_var", np.ones(c))
            else:
                ws.set(node.id, "gamma", rng.uniform(0.5, 1.5, c))
                ws.set(node.id, "beta", rng.uniform(-0.1, 0.1, c))
                ws.set(node.id, "running_mean", rng.uniform(-0.1, 0.1, c))
                ws.set(node.id, "running_var", rng.uniform(0.5, 1.5, c))
            continue
        shape = shapes["weight"]
        if node.kind == "deconv":
            fan_in = shape[0] * shape[2] * shape[3] // 4
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        if scheme == "zeros":
            ws.set(node.id, "weight", np.zeros(shape))
        else:
            ws.set(node.id, "weight", rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))
        if "bias" in shapes:
            ws.set(node.id, "bias", np.zeros(shapes["bias"]))
    logger.info(f"Weights [{graph.name}] init scheme={scheme} seed={seed} elements={ws.total_elements()}")
    return ws

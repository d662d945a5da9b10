import numpy as np
import pytest

from app.core.errors import ConfigError, DataFileError, WeightStoreError
from app.models.schemas import WeightManifest
from app.services.weights import (
    WeightStore,
    blob_path_for,
    init_weights,
    load_weights,
    read_weights,
    save_weights,
    write_weights,
)


class TestSerialization:
    def test_empty_store(self):
        manifest, blob = save_weights(WeightStore())
        assert manifest.entries == []
        assert blob == b""

    def test_two_element_payload(self):
        ws = WeightStore()
        ws.set("conv", "weight", np.array([1.0, 2.0]))
        manifest, blob = save_weights(ws)
        assert len(blob) == 8
        assert blob == np.array([1.0, 2.0], dtype="<f4").tobytes()
        assert manifest.entries[0].offset == 0
        assert manifest.blob_size == 8

    def test_round_trip_is_bitwise(self, micro_graph, micro_weights):
        manifest, blob = save_weights(micro_weights)
        assert load_weights(manifest, blob).bitwise_equal(micro_weights)

    def test_file_round_trip(self, tmp_path, micro_weights):
        manifest_path = tmp_path / "weights.json"
        write_weights(micro_weights, manifest_path, blob_path_for(manifest_path))
        assert blob_path_for(manifest_path).name == "weights.bin"
        assert read_weights(manifest_path, blob_path_for(manifest_path)).bitwise_equal(micro_weights)

    def test_truncated_blob(self, micro_weights):
        manifest, blob = save_weights(micro_weights)
        with pytest.raises(WeightStoreError, match="truncated"):
            load_weights(manifest, blob[:-4])

    def test_manifest_gap(self):
        ws = WeightStore()
        ws.set("a", "weight", np.ones(2))
        manifest, blob = save_weights(ws)
        bad = WeightManifest(entries=[manifest.entries[0].model_copy(update={"offset": 4})], blob_size=8)
        with pytest.raises(WeightStoreError):
            load_weights(bad, blob)

    def test_missing_files(self, tmp_path):
        with pytest.raises(DataFileError):
            read_weights(tmp_path / "nope.json", tmp_path / "nope.bin")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "w.json").write_text('{"entries": 3}')
        (tmp_path / "w.bin").write_bytes(b"")
        with pytest.raises(WeightStoreError, match="invalid weight manifest"):
            read_weights(tmp_path / "w.json", tmp_path / "w.bin")


class TestStore:
    def test_missing_weight_names_layer(self, micro_graph):
        with pytest.raises(WeightStoreError, match="enc.conv"):
            WeightStore().check_against(micro_graph)

    def test_shape_mismatch(self, micro_graph, micro_weights):
        micro_weights.set("final", "bias", np.zeros(3))
        with pytest.raises(WeightStoreError, match="final"):
            micro_weights.check_against(micro_graph)

    def test_init_covers_graph(self, micro_graph, micro_weights):
        micro_weights.check_against(micro_graph)

    def test_init_is_deterministic(self, micro_graph):
        assert init_weights(micro_graph, seed=3).bitwise_equal(init_weights(micro_graph, seed=3))
        assert not init_weights(micro_graph, seed=3).bitwise_equal(init_weights(micro_graph, seed=4))

    def test_zero_scheme(self, micro_graph):
        ws = init_weights(micro_graph, scheme="zeros")
        assert not ws.get("enc.conv", "weight").any()
        np.testing.assert_array_equal(ws.get("enc.bn", "running_var"), 1.0)

    def test_unknown_scheme(self, micro_graph):
        with pytest.raises(ConfigError):
            init_weights(micro_graph, scheme="xavier")

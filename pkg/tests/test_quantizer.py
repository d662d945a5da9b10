import numpy as np
import pytest

from app.core.errors import ConfigError, NumericFaultError, QuantizationError
from app.services.executor import fused_weights, infer
from app.services.graph import GraphBuilder
from app.services.quantizer import (
    QuantParams,
    calibrate_maxabs,
    compare_outputs,
    dequantize_tensor,
    error_stats,
    fp16_infer,
    fp16_round,
    load_sidecar,
    model_from_sidecar,
    quantize_model,
    quantize_tensor,
    quantized_conv2d,
    quantized_infer,
    save_sidecar,
)
from app.services.reference_ops import reference_quantized_conv2d
from app.services.tensor_ops import ConvWeights
from app.services.weights import WeightStore, init_weights
from tests.conftest import build_micro_graph


def _identity_graph():
    b = GraphBuilder("identity", (1, 4, 4))
    graph = b.build(b.conv("id", "input", 1, 1, 1))
    ws = WeightStore()
    ws.set("id", "weight", np.ones((1, 1, 1, 1)))
    return graph, ws


class TestFp16:
    @pytest.mark.parametrize("value, expected", [(0.5, 0.5), (0.1, 0.0999755859375), (0.0, 0.0)])
    def test_rounding(self, value, expected):
        assert float(fp16_round(np.array([value]))[0]) == expected

    def test_idempotent(self, rng):
        x = rng.standard_normal(1000).astype(np.float32) * 100
        once = fp16_round(x)
        np.testing.assert_array_equal(fp16_round(once), once)

    def test_overflow_names_element(self):
        with pytest.raises(NumericFaultError, match=r"element \(2,\)"):
            fp16_round(np.array([1.0, -2.0, 70000.0]))


class TestScalarQuantization:
    def test_calibration_span(self):
        assert calibrate_maxabs([np.array([-1.27, 0.3, 1.27])]).scale == pytest.approx(0.01)

    def test_zero_samples(self):
        assert calibrate_maxabs([np.zeros(5)]).scale == 1.0

    def test_single_sample(self):
        assert calibrate_maxabs([np.array([-5.0])]).scale == pytest.approx(5 / 127)

    def test_empty_calibration(self):
        with pytest.raises(QuantizationError):
            calibrate_maxabs([])

    def test_bad_scale(self):
        with pytest.raises(QuantizationError):
            QuantParams(0.0)

    @pytest.mark.parametrize("x, code, back", [(0.0, 0, 0.0), (0.553, 55, 0.55), (10.0, 127, 1.27)])
    def test_quantize_dequantize(self, x, code, back):
        q = QuantParams(0.01)
        codes = quantize_tensor(np.array([x]), q)
        assert codes.dtype == np.int8 and codes[0] == code
        assert float(dequantize_tensor(codes, q)[0]) == pytest.approx(back, abs=1e-6)

    def test_half_rounds_away_from_zero(self):
        codes = quantize_tensor(np.array([0.5, -0.5, 1.5, -2.5]), QuantParams(1.0))
        np.testing.assert_array_equal(codes, [1, -1, 2, -3])

    def test_round_trip_error_bound(self, rng):
        x = rng.uniform(-1.27, 1.27, 1_000_000)
        q = calibrate_maxabs([x])
        err = np.abs(dequantize_tensor(quantize_tensor(x, q), q) - x)
        assert err.max() <= q.scale / 2 + 1e-6

    def test_negation_symmetry(self, rng):
        x = np.concatenate([rng.uniform(-3, 3, 10_000), np.arange(-300, 301) * 0.005])
        q = QuantParams(0.01)
        np.testing.assert_array_equal(quantize_tensor(-x, q), -quantize_tensor(x, q))

    def test_monotone_in_input(self, rng):
        x = np.sort(rng.uniform(-2, 2, 10_000))
        codes = quantize_tensor(x, QuantParams(0.01)).astype(np.int64)
        assert np.all(np.diff(codes) >= 0)
        assert codes[0] == -127 and codes[-1] == 127


class TestQuantizedConv:
    def test_zero_input(self, rng):
        w = ConvWeights(rng.integers(-127, 128, (2, 3, 3, 3)).astype(np.int8), padding=(1, 1))
        x = np.zeros((1, 3, 5, 5), dtype=np.int8)
        q = QuantParams(0.1)
        assert not quantized_conv2d(x, w, q, q, q).any()

    def test_identity_scales_cancel(self, rng):
        s_i, s_w = QuantParams(0.02), QuantParams(0.003)
        out_qp = QuantParams(s_i.scale * s_w.scale)
        x = rng.integers(-127, 128, (1, 1, 4, 4)).astype(np.int8)
        w = ConvWeights(np.ones((1, 1, 1, 1), dtype=np.int8))
        np.testing.assert_array_equal(quantized_conv2d(x, w, s_i, s_w, out_qp), x)

    @pytest.mark.parametrize("transposed", [False, True])
    def test_matches_integer_oracle(self, rng, transposed):
        for _ in range(25):
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            if transposed:
                kernel = rng.integers(-127, 128, (c_in, c_out, 4, 4)).astype(np.int8)
                stride, pad = (2, 2), (1, 1)
            else:
                k = int(rng.choice([1, 3, 5]))
                kernel = rng.integers(-127, 128, (c_out, c_in, k, k)).astype(np.int8)
                stride, pad = (int(rng.integers(1, 3)),) * 2, (k // 2, k // 2)
            bias = rng.integers(-5000, 5000, c_out).astype(np.int32)
            w = ConvWeights(kernel, bias, 1, stride, pad)
            x = rng.integers(-127, 128, (1, c_in, 5, 6)).astype(np.int8)
            in_qp, w_qp, out_qp = QuantParams(0.05), QuantParams(0.01), QuantParams(float(rng.uniform(0.5, 20)))
            got = quantized_conv2d(x, w, in_qp, w_qp, out_qp, transposed)
            multiplier = in_qp.scale * w_qp.scale / out_qp.scale
            expected = reference_quantized_conv2d(x, w, multiplier, transposed)
            np.testing.assert_array_equal(got, expected)

    def test_accumulator_overflow(self):
        w = ConvWeights(np.ones((1, 1, 1, 1), dtype=np.int8), np.array([2**31 - 1], dtype=np.int32))
        q = QuantParams(1.0)
        with pytest.raises(NumericFaultError, match="overflow"):
            quantized_conv2d(np.ones((1, 1, 1, 1), dtype=np.int8), w, q, q, q)

    def test_rejects_float_input(self):
        q = QuantParams(1.0)
        with pytest.raises(QuantizationError):
            quantized_conv2d(np.ones((1, 1, 2, 2), dtype=np.float32), ConvWeights(np.ones((1, 1, 1, 1), np.int8)), q, q, q)


class TestQuantizeModel:
    def test_identity_edge_scale(self):
        graph, ws = _identity_graph()
        calib = np.linspace(-1.27, 1.27, 16, dtype=np.float32).reshape(1, 1, 4, 4)
        qm = quantize_model(graph, ws, [calib])
        assert qm.activations["input"].scale == pytest.approx(0.01)
        np.testing.assert_allclose(quantized_infer(qm, calib), calib, atol=0.005 + 1e-6)

    def test_zero_weight_model(self, rng):
        graph = build_micro_graph()
        ws = init_weights(graph, scheme="zeros")
        qm = quantize_model(graph, ws, [rng.standard_normal((2, 3, 16, 12))])
        assert all(layer.weight_qp.scale == 1.0 for layer in qm.layers.values())
        assert not quantized_infer(qm, rng.standard_normal((1, 3, 16, 12))).any()

    def test_weight_rounding_bound(self, micro_graph, micro_weights, rng):
        qm = quantize_model(micro_graph, micro_weights, [rng.standard_normal((2, 3, 16, 12))])
        folded, _ = fused_weights(micro_graph, micro_weights)
        for layer_id, layer in qm.layers.items():
            ref = folded[layer_id].kernel if layer_id in folded else micro_weights.get(layer_id, "weight")
            err = np.abs(dequantize_tensor(layer.kernel, layer.weight_qp) - ref)
            assert err.max() <= layer.weight_qp.scale / 2 + 1e-6

    def test_batchnorm_is_folded(self, micro_graph, micro_weights, rng):
        qm = quantize_model(micro_graph, micro_weights, [rng.standard_normal((1, 3, 16, 12))])
        assert qm.absorbed == {"enc.bn", "up.bn"}

    def test_empty_calibration(self, micro_graph, micro_weights):
        with pytest.raises(QuantizationError):
            quantize_model(micro_graph, micro_weights, [])

    def test_int8_tracks_fp32(self, micro_graph, micro_weights, rng):
        x = rng.standard_normal((2, 3, 16, 12)).astype(np.float32)
        qm = quantize_model(micro_graph, micro_weights, [x])
        ref = infer(micro_graph, micro_weights, x)
        _, mean = error_stats(ref, quantized_infer(qm, x))
        assert mean < 0.1 * float(np.abs(ref).max())

    def test_sidecar_round_trip(self, tmp_path, micro_graph, micro_weights, rng):
        x = rng.standard_normal((1, 3, 16, 12)).astype(np.float32)
        qm = quantize_model(micro_graph, micro_weights, [x])
        restored = model_from_sidecar(micro_graph, micro_weights, load_sidecar(save_sidecar(qm, tmp_path / "q.json")))
        np.testing.assert_array_equal(quantized_infer(restored, x), quantized_infer(qm, x))

    def test_empty_batch(self, micro_graph, micro_weights, rng):
        qm = quantize_model(micro_graph, micro_weights, [rng.standard_normal((1, 3, 16, 12))])
        with pytest.raises(ConfigError, match="empty batch"):
            quantized_infer(qm, np.zeros((0, 3, 16, 12), dtype=np.float32))


class TestCompareOutputs:
    def test_same_tensor_has_zero_error(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        assert error_stats(x, x) == (0.0, 0.0)

    def test_report_layers(self, micro_graph, micro_weights, rng):
        x = rng.standard_normal((1, 3, 16, 12)).astype(np.float32)
        report = compare_outputs(micro_graph, micro_weights, quantize_model(micro_graph, micro_weights, [x]), x)
        ids = [layer.layer_id for layer in report.int8.layers]
        assert "final" in ids and "enc.conv" not in ids and "input" not in ids
        assert report.fp16.max_abs == pytest.approx(
            error_stats(infer(micro_graph, micro_weights, x), fp16_infer(micro_graph, micro_weights, x))[0]
        )

    @pytest.mark.slow
    def test_fp16_beats_int8_on_ensemble(self):
        fp16_errors, int8_errors = [], []
        for seed in range(50):
            graph = build_micro_graph()
            ws = init_weights(graph, seed=seed)
            x = np.random.default_rng(seed).standard_normal((2, 3, 16, 12)).astype(np.float32)
            report = compare_outputs(graph, ws, quantize_model(graph, ws, [x]), x)
            fp16_errors.append(report.fp16.mean_abs)
            int8_errors.append(report.int8.mean_abs)
        assert np.median(fp16_errors) <= np.median(int8_errors)

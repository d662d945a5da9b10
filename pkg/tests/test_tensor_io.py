import numpy as np
import pytest

from app.core.errors import ConfigError, DataFileError, NumericFaultError
from app.services.tensor_io import HEADER, decode_tensor, encode_tensor, read_tensor, write_tensor


def test_file_round_trip(tmp_path, rng):
    t = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    back = read_tensor(write_tensor(tmp_path / "x.tnsr", t))
    np.testing.assert_array_equal(back, t)
    assert back.dtype == np.float32


def test_header_layout():
    buf = encode_tensor(np.zeros((1, 2, 3, 4), dtype=np.float32))
    assert buf[:4] == b"TNSR"
    assert len(buf) == HEADER.size + 4 * 24


def test_rejects_non_4d():
    with pytest.raises(ConfigError):
        encode_tensor(np.zeros((3, 4), dtype=np.float32))


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b[:10], "truncated"),
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], "version"),
        (lambda b: b[:-4], "expected"),
    ],
)
def test_malformed_buffers(mutate, match):
    buf = encode_tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(DataFileError, match=match):
        decode_tensor(mutate(buf))


def test_non_finite_payload_is_rejected():
    buf = encode_tensor(np.array([[[[np.nan]]]], dtype=np.float32))
    with pytest.raises(NumericFaultError):
        decode_tensor(buf)


def test_missing_file(tmp_path):
    with pytest.raises(DataFileError):
        read_tensor(tmp_path / "none.tnsr")

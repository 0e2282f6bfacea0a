import struct
import zlib

import numpy as np
import pytest

from noiseinit.checkpoint import MAGIC, CheckpointError, dumps, load, loads, save
from noiseinit.vnpnet import GcrmConfig, VnpnetConfig, init_params


def f32_params(seed=0):
    cfg = VnpnetConfig(variant="svd", gcrm=GcrmConfig(depths=(1,), dims=(16,), windows=(None,)))
    params = {k: v.astype(np.float32).astype(np.float64) for k, v in init_params(cfg, seed).items()}
    special = np.array([-0.0, 1e-45, -3e-39, np.finfo(np.float32).max, 1.0], dtype=np.float32)
    params["text.w"].reshape(-1)[:5] = special
    return params, cfg


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        params, cfg = f32_params()
        save(tmp_path / "m.vnp", params, cfg)
        loaded, cfg2 = load(tmp_path / "m.vnp")
        assert cfg2 == cfg
        assert list(loaded) == list(params)
        for name in params:
            assert loaded[name].dtype == np.float64
            assert loaded[name].shape == params[name].shape
            assert loaded[name].tobytes() == params[name].tobytes(), name

    def test_negative_zero_survives(self):
        params, cfg = f32_params()
        loaded, _ = loads(dumps(params, cfg))
        assert np.signbit(loaded["text.w"].reshape(-1)[0])

    def test_scalar_parameter(self):
        params, cfg = f32_params()
        loaded, _ = loads(dumps(params, cfg))
        assert loaded["beta"].shape == () and float(loaded["beta"]) == pytest.approx(0.1, rel=1e-7)

    def test_deterministic_bytes(self):
        params, cfg = f32_params(3)
        assert dumps(params, cfg) == dumps(dict(params), cfg)

    def test_layout_prefix(self):
        params, cfg = f32_params()
        data = dumps(params, cfg)
        assert data[:4] == MAGIC
        version, clen = struct.unpack_from("<II", data, 4)
        assert version == 1
        (count,) = struct.unpack_from("<I", data, 12 + clen)
        assert count == len(params)


class TestCorruption:
    def test_flipped_byte(self):
        params, cfg = f32_params()
        data = bytearray(dumps(params, cfg))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(CheckpointError, match="CRC"):
            loads(bytes(data))

    def test_bad_magic(self):
        params, cfg = f32_params()
        with pytest.raises(CheckpointError, match="magic"):
            loads(b"PND1" + dumps(params, cfg)[4:])

    def test_too_short(self):
        with pytest.raises(CheckpointError):
            loads(b"VNP1")

    def test_trailing_bytes(self):
        params, cfg = f32_params()
        body = dumps(params, cfg)[:-4] + b"\x00\x00"
        with pytest.raises(CheckpointError, match="trailing"):
            loads(body + struct.pack("<I", zlib.crc32(body)))

    def test_unknown_version(self):
        params, cfg = f32_params()
        body = bytearray(dumps(params, cfg)[:-4])
        body[4:8] = struct.pack("<I", 9)
        with pytest.raises(CheckpointError, match="version 9"):
            loads(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))

    def test_error_carries_offset(self):
        with pytest.raises(CheckpointError) as info:
            loads(b"XXXX" + b"\x00" * 20)
        assert info.value.offset == 0

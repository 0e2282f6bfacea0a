import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noiseinit.pndata import (
    HEADER_SIZE,
    DatasetHeader,
    NoisePairRecord,
    PndChecksumError,
    PndError,
    dataset_stats,
    generate_pndata,
    read_dataset,
    write_dataset,
)
from noiseinit.prompts import embed_prompt, prompt_id
from noiseinit.refine import RefineConfig, SyntheticDenoiser
from noiseinit.spectral import gaussian_lowpass_mask, low_freq_energy_ratio, temporal_correlation

DIMS = (2, 3, 4, 4)
PROMPTS = [f"scene {i} with {w}" for i, w in enumerate(
    ["rain", "snow", "fog", "wind", "sun", "dust", "smoke", "waves"] * 4)]


def make_record(seed, dims=DIMS, dim=8):
    rng = np.random.default_rng(seed)
    f32 = np.float32
    return NoisePairRecord(
        int(rng.integers(0, 2**63)),
        rng.normal(size=dim).astype(f32),
        rng.normal(size=dims).astype(f32),
        rng.normal(size=dims).astype(f32),
    )


def special_record(dims=DIMS, dim=8):
    """Payload with negative zero, subnormals and extreme finite values."""
    n = int(np.prod(dims))
    specials = np.array([-0.0, 0.0, 1e-45, -1e-45, 1.17e-38, np.finfo(np.float32).max,
                         -np.finfo(np.float32).max, np.finfo(np.float32).tiny / 4], dtype=np.float32)
    z = np.resize(specials, n).reshape(dims)
    return NoisePairRecord(2**64 - 1, specials[:dim].copy(), z, -z)


def record_bits(rec):
    return [np.asarray(a, dtype="<f4").tobytes() for a in (rec.embedding, rec.z_rand, rec.z_refined)]


class TestPrompts:
    def test_deterministic_unit_norm(self):
        a, b = embed_prompt("A cat on a mat"), embed_prompt("A cat on a mat")
        np.testing.assert_array_equal(a.vector, b.vector)
        assert a.prompt_id == b.prompt_id == prompt_id("A cat on a mat")
        assert np.linalg.norm(a.vector) == pytest.approx(1.0)

    def test_bag_semantics(self):
        np.testing.assert_array_equal(embed_prompt("a b").vector, embed_prompt("b a").vector)
        np.testing.assert_array_equal(embed_prompt("Cat, DOG!").vector, embed_prompt("cat dog").vector)

    def test_discriminative(self):
        assert float(embed_prompt("cat").vector @ embed_prompt("dog").vector) < 0.9

    @pytest.mark.parametrize("text", ["", "!!! ..."])
    def test_rejects_empty(self, text):
        with pytest.raises(ValueError):
            embed_prompt(text)


class TestFormat:
    def test_header_layout(self):
        h = DatasetHeader((4, 8, 16, 16), 64, 3)
        raw = h.pack()
        assert len(raw) == HEADER_SIZE == 33
        assert raw[:4] == b"PND1"
        assert struct.unpack("<IIIIIII", raw[4:32]) == (1, 3, 4, 8, 16, 16, 64)
        assert raw[32] == 0
        assert DatasetHeader.unpack(raw) == h

    def test_stride_formula(self):
        h = DatasetHeader((4, 8, 16, 16), 64)
        assert h.record_stride == 8 + 4 * 64 + 2 * 4 * 4 * 8 * 16 * 16 + 4

    def test_zero_records(self, tmp_path):
        path = tmp_path / "empty.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [])
        assert os.path.getsize(path) == HEADER_SIZE
        header, reader = read_dataset(path)
        assert header.record_count == 0 and list(reader) == []

    def test_record_bytes(self, tmp_path):
        rec = make_record(0)
        path = tmp_path / "one.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [rec])
        raw = path.read_bytes()[HEADER_SIZE:]
        payload = struct.pack("<Q", rec.prompt_id) + b"".join(record_bits(rec))
        assert raw == payload + struct.pack("<I", zlib.crc32(payload))

    def test_round_trip_bit_exact(self, tmp_path):
        records = [make_record(i) for i in range(3)] + [special_record()]
        path = tmp_path / "d.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), records)
        _, reader = read_dataset(path)
        for orig, back in zip(records, reader):
            assert back.prompt_id == orig.prompt_id
            assert record_bits(back) == record_bits(orig)
        back = reader[3]
        assert np.signbit(back.z_rand.ravel()[0]) and back.z_rand.ravel()[0] == 0

    @given(bits=st.lists(st.integers(0, 2**32 - 1), min_size=2 * 96 + 8, max_size=2 * 96 + 8))
    @settings(max_examples=30, deadline=None)
    def test_any_finite_payload_round_trips(self, bits, tmp_path_factory):
        arr = np.array(bits, dtype=np.uint32).view(np.float32)
        arr = np.where(np.isfinite(arr), arr, np.float32(0))
        rec = NoisePairRecord(7, arr[:8], arr[8:104].reshape(DIMS), arr[104:].reshape(DIMS))
        path = tmp_path_factory.mktemp("prop") / "p.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [rec])
        assert record_bits(read_dataset(path)[1][0]) == record_bits(rec)

    def test_seek_matches_iteration(self, tmp_path):
        path = tmp_path / "d.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [make_record(i) for i in range(5)])
        _, reader = read_dataset(path)
        seq = list(reader)
        for k in (4, 0, 2, -1):
            assert record_bits(reader[k]) == record_bits(seq[k])
        with pytest.raises(IndexError):
            reader[5]


class TestFaults:
    @pytest.fixture
    def dataset(self, tmp_path):
        path = tmp_path / "d.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [make_record(i) for i in range(4)])
        return path

    def test_single_byte_corruption_names_record(self, dataset):
        header, _ = read_dataset(dataset)
        raw = bytearray(dataset.read_bytes())
        offset = HEADER_SIZE + 2 * header.record_stride + 50
        raw[offset] ^= 0x01
        dataset.write_bytes(bytes(raw))
        _, reader = read_dataset(dataset)
        with pytest.raises(PndChecksumError, match="record 2") as info:
            list(reader)
        assert info.value.index == 2
        assert info.value.offset == HEADER_SIZE + 2 * header.record_stride
        reader[1]
        with pytest.raises(PndChecksumError):
            reader[2]

    def test_truncated_file(self, dataset):
        raw = dataset.read_bytes()
        dataset.write_bytes(raw[:-10])
        with pytest.raises(PndError, match=f"file length {len(raw) - 10} bytes, expected {len(raw)}"):
            read_dataset(dataset)

    def test_bad_magic(self, dataset):
        raw = bytearray(dataset.read_bytes())
        raw[:4] = b"XXXX"
        dataset.write_bytes(bytes(raw))
        with pytest.raises(PndError, match="magic") as info:
            read_dataset(dataset)
        assert info.value.offset == 0

    def test_bad_version(self, dataset):
        raw = bytearray(dataset.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        dataset.write_bytes(bytes(raw))
        with pytest.raises(PndError, match="version"):
            read_dataset(dataset)

    def test_reserved_compression_flag(self, dataset):
        raw = bytearray(dataset.read_bytes())
        raw[32] = 1
        dataset.write_bytes(bytes(raw))
        with pytest.raises(PndError, match="compression"):
            read_dataset(dataset)

    def test_empty_path(self):
        with pytest.raises(ValueError):
            read_dataset("")
        with pytest.raises(ValueError):
            write_dataset("", DatasetHeader(DIMS, 8), [])

    def test_dim_mismatch_before_write(self, tmp_path):
        path = tmp_path / "bad.pnd"
        with pytest.raises(ValueError):
            write_dataset(path, DatasetHeader((2, 3, 4, 5), 8), [make_record(0)])
        assert not path.exists()

    def test_non_finite_rejected(self, tmp_path):
        rec = make_record(0)
        rec.z_rand[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            write_dataset(tmp_path / "nan.pnd", DatasetHeader(DIMS, 8), [rec])


class TestGenerate:
    def test_single_prompt(self, tmp_path):
        path = tmp_path / "one.pnd"
        report = generate_pndata(["a kite"], (4, 8, 16, 16), RefineConfig(iterations=1), SyntheticDenoiser(), path)
        assert len(report.per_record) == 1
        header, reader = read_dataset(path)
        assert header.record_count == 1 and len(list(reader)) == 1
        assert reader[0].prompt_id == prompt_id("a kite")

    def test_mean_delta_temporal_correlation(self, tmp_path):
        report = generate_pndata(PROMPTS, (4, 8, 16, 16), RefineConfig(iterations=5, seed=7),
                                 SyntheticDenoiser(0.8), tmp_path / "d.pnd")
        assert len(report.per_record) == 32
        assert report.mean_delta_temporal_correlation > 0.05
        assert report.mean_delta_low_freq_ratio > 0
        assert "mean_delta_temporal_correlation" in report.summary()

    def test_byte_identical_reruns(self, tmp_path):
        args = (PROMPTS[:4], (2, 4, 8, 8), RefineConfig(seed=3), SyntheticDenoiser())
        generate_pndata(*args, tmp_path / "a.pnd")
        generate_pndata(*args, tmp_path / "b.pnd")
        assert (tmp_path / "a.pnd").read_bytes() == (tmp_path / "b.pnd").read_bytes()

    def test_failure_leaves_no_file(self, tmp_path):
        calls = []

        def flaky(z, prompt):
            calls.append(1)
            if len(calls) > 3:
                raise RuntimeError("denoiser crashed")
            return z

        path = tmp_path / "partial.pnd"
        with pytest.raises(RuntimeError):
            generate_pndata(PROMPTS[:4], (2, 4, 8, 8), RefineConfig(iterations=2), flaky, path)
        assert list(tmp_path.iterdir()) == []

    def test_no_prompts(self, tmp_path):
        with pytest.raises(ValueError):
            generate_pndata([], DIMS, RefineConfig(), SyntheticDenoiser(), tmp_path / "x.pnd")


class TestStats:
    def test_matches_direct_recomputation(self, tmp_path):
        path = tmp_path / "d.pnd"
        generate_pndata(PROMPTS[:6], (4, 8, 16, 16), RefineConfig(seed=1), SyntheticDenoiser(), path)
        report = dataset_stats(path)
        mask = gaussian_lowpass_mask((8, 16, 16), 0.25)
        for row, rec in zip(report.per_record, read_dataset(path)[1]):
            zr, zf = rec.z_rand.astype(np.float64), rec.z_refined.astype(np.float64)
            expected = {
                "std_rand": zr.std(), "std_refined": zf.std(),
                "tc_rand": temporal_correlation(zr), "tc_refined": temporal_correlation(zf),
                "lfr_rand": low_freq_energy_ratio(zr, mask), "lfr_refined": low_freq_energy_ratio(zf, mask),
            }
            for key, value in expected.items():
                assert abs(row[key] - value) <= 1e-6
        assert report.aggregate["tc_refined"] > report.aggregate["tc_rand"]

    def test_fresh_noise_has_unit_spread(self, tmp_path):
        path = tmp_path / "d.pnd"
        generate_pndata(PROMPTS[:4], (4, 16, 32, 32), RefineConfig(iterations=1), SyntheticDenoiser(), path)
        for row in dataset_stats(path).per_record:
            assert row["std_rand"] == pytest.approx(1.0, rel=0.02)

    def test_identical_frames(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = rng.normal(size=(2, 1, 4, 4)).astype(np.float32)
        rec = NoisePairRecord(1, rng.normal(size=8).astype(np.float32),
                              rng.normal(size=DIMS).astype(np.float32), np.repeat(frame, 3, axis=1))
        path = tmp_path / "d.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [rec])
        assert dataset_stats(path).per_record[0]["tc_refined"] == pytest.approx(1.0)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.pnd"
        write_dataset(path, DatasetHeader(DIMS, 8), [])
        report = dataset_stats(path)
        assert report.per_record == [] and report.aggregate is None
        assert report.table().count("\n") == 0

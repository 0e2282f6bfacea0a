"""Prompt-noise pair datasets in the PND1 binary container.

Layout (all integers little-endian)::

    header  "PND1" | version u32 | record_count u32 | C T H W u32
            | embedding_dim u32 | compression u8                    (33 bytes)
    record  prompt_id u64 | embedding f32[D] | z_rand f32[C*T*H*W]
            | z_refined f32[C*T*H*W] | crc32 u32 over the preceding bytes

Records have a fixed stride, so record ``k`` can be read without scanning.
"""
import os
import struct
import tempfile
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .prompts import DEFAULT_EMBED_DIM, PromptEmbedding, embed_prompt
from .refine import refine_iterative
from .spectral import DEFAULT_CUTOFF, gaussian_lowpass_mask, low_freq_energy_ratio, temporal_correlation
from .tensor import sample_gaussian

MAGIC = b"PND1"
VERSION = 1
COMPRESSION_NONE = 0
_HEADER = struct.Struct("<4sIIIIIIIB")
HEADER_SIZE = _HEADER.size


class PndError(ValueError):
    """Malformed or inconsistent dataset file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PndChecksumError(PndError):
    def __init__(self, index, offset):
        super().__init__(f"CRC mismatch in record {index}", offset)
        self.index = index


@dataclass(frozen=True)
class DatasetHeader:
    dims: tuple
    embedding_dim: int = DEFAULT_EMBED_DIM
    record_count: int = 0
    version: int = VERSION
    compression: int = COMPRESSION_NONE

    @property
    def latent_size(self):
        return int(np.prod(self.dims))

    @property
    def record_stride(self):
        return 8 + 4 * self.embedding_dim + 8 * self.latent_size + 4

    def pack(self):
        return _HEADER.pack(
            MAGIC, self.version, self.record_count, *self.dims,
            self.embedding_dim, self.compression,
        )

    @classmethod
    def unpack(cls, raw):
        if len(raw) < HEADER_SIZE:
            raise PndError(f"file too short for a header: {len(raw)} < {HEADER_SIZE} bytes", 0)
        magic, version, count, c, t, h, w, dim, comp = _HEADER.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise PndError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise PndError(f"unsupported version {version}", 4)
        if min(c, t, h, w, dim) < 1:
            raise PndError(f"non-positive dims {(c, t, h, w)} or embedding dim {dim}", 12)
        if comp != COMPRESSION_NONE:
            raise PndError(f"unsupported compression flag {comp}", HEADER_SIZE - 1)
        return cls((c, t, h, w), dim, count, version, comp)


@dataclass(frozen=True)
class NoisePairRecord:
    prompt_id: int
    embedding: np.ndarray
    z_rand: np.ndarray
    z_refined: np.ndarray

    @property
    def prompt(self):
        return PromptEmbedding(self.prompt_id, np.asarray(self.embedding, dtype=np.float64))


def _encode(record, header):
    if record.z_rand.shape != tuple(header.dims) or record.z_refined.shape != tuple(header.dims):
        raise ValueError(
            f"record latents {record.z_rand.shape}/{record.z_refined.shape} "
            f"do not match header dims {header.dims}"
        )
    if np.shape(record.embedding) != (header.embedding_dim,):
        raise ValueError(
            f"embedding of shape {np.shape(record.embedding)} does not match "
            f"dim {header.embedding_dim}"
        )
    parts = [struct.pack("<Q", record.prompt_id)]
    for arr in (record.embedding, record.z_rand, record.z_refined):
        arr = np.asarray(arr, dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"record {record.prompt_id:#x} has non-finite payload")
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def _decode(buf, header, index, offset):
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise PndChecksumError(index, offset)
    (pid,) = struct.unpack("<Q", payload[:8])
    d, n = header.embedding_dim, header.latent_size
    floats = np.frombuffer(payload, dtype="<f4", offset=8)
    return NoisePairRecord(
        pid,
        floats[:d].copy(),
        floats[d:d + n].reshape(header.dims).copy(),
        floats[d + n:].reshape(header.dims).copy(),
    )


@contextmanager
def atomic_write(path):
    """Open a temp file next to ``path``; rename over it only on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, header, records):
    """Write ``records`` under ``header``; the stored count is the actual count."""
    if not os.fspath(path):
        raise ValueError("empty dataset path")
    encoded = [_encode(r, header) for r in records]
    header = DatasetHeader(header.dims, header.embedding_dim, len(encoded))
    with atomic_write(path) as fh:
        fh.write(header.pack())
        for blob in encoded:
            fh.write(blob)


class DatasetReader:
    """Random-access and streaming view of a PND1 file."""

    def __init__(self, path):
        if not os.fspath(path):
            raise ValueError("empty dataset path")
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            self.header = DatasetHeader.unpack(fh.read(HEADER_SIZE))
        expected = HEADER_SIZE + self.header.record_count * self.header.record_stride
        actual = os.path.getsize(self.path)
        if actual != expected:
            raise PndError(
                f"file length {actual} bytes, expected {expected} for "
                f"{self.header.record_count} records",
                min(actual, expected),
            )

    def __len__(self):
        return self.header.record_count

    def _offset(self, index):
        return HEADER_SIZE + index * self.header.record_stride

    def __getitem__(self, index):
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(f"record {index} out of range for {len(self)} records")
        offset = self._offset(index)
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            return _decode(fh.read(self.header.record_stride), self.header, index, offset)

    def __iter__(self):
        stride = self.header.record_stride
        with open(self.path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            for index in range(len(self)):
                yield _decode(fh.read(stride), self.header, index, self._offset(index))


def read_dataset(path):
    """Open a dataset; returns ``(header, reader)`` where ``reader`` iterates records."""
    reader = DatasetReader(path)
    return reader.header, reader


@dataclass
class GenerationReport:
    per_record: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def mean_delta_temporal_correlation(self):
        return float(np.mean([r["delta_temporal_correlation"] for r in self.per_record]))

    @property
    def mean_delta_low_freq_ratio(self):
        return float(np.mean([r["delta_low_freq_ratio"] for r in self.per_record]))

    def summary(self):
        return (
            f"records={len(self.per_record)} "
            f"mean_delta_temporal_correlation={self.mean_delta_temporal_correlation:+.4f} "
            f"mean_delta_low_freq_ratio={self.mean_delta_low_freq_ratio:+.4f} "
            f"wall_time={self.wall_time:.2f}s"
        )


def generate_pndata(prompts, dims, cfg, denoiser, out_path, embedding_dim=DEFAULT_EMBED_DIM):
    """Refine fresh noise for every prompt and store the pairs at ``out_path``.

    Record ``i`` uses seed ``cfg.seed + i`` both for its random noise and for
    the refinement rounds, so the output is a pure function of the inputs.
    Nothing is left at ``out_path`` if generation fails.
    """
    if not prompts:
        raise ValueError("no prompts given")
    dims = tuple(int(d) for d in dims)
    header = DatasetHeader(dims, embedding_dim)
    mask = gaussian_lowpass_mask(dims[1:], cfg.d0)
    report = GenerationReport()
    start = time.perf_counter()
    count = 0
    with atomic_write(out_path) as fh:
        fh.write(header.pack())
        for i, text in enumerate(prompts):
            seed = cfg.seed + i
            prompt = embed_prompt(text, embedding_dim)
            z_rand = sample_gaussian(dims, seed, dtype=np.float32).astype(np.float64)
            refined = refine_iterative(z_rand, prompt, replace(cfg, seed=seed), denoiser)
            refined = refined.astype(np.float32).astype(np.float64)
            fh.write(_encode(NoisePairRecord(prompt.prompt_id, prompt.vector, z_rand, refined), header))
            count += 1
            report.per_record.append({
                "index": i,
                "prompt_id": prompt.prompt_id,
                "delta_temporal_correlation": temporal_correlation(refined) - temporal_correlation(z_rand),
                "delta_low_freq_ratio": low_freq_energy_ratio(refined, mask) - low_freq_energy_ratio(z_rand, mask),
            })
        fh.seek(0)
        fh.write(DatasetHeader(dims, embedding_dim, count).pack())
    report.wall_time = time.perf_counter() - start
    return report


@dataclass
class StatsReport:
    per_record: list = field(default_factory=list)
    aggregate: dict = None

    def table(self):
        keys = ["std_rand", "std_refined", "tc_rand", "tc_refined", "lfr_rand", "lfr_refined"]
        lines = ["index " + " ".join(f"{k:>12}" for k in keys)]
        for row in self.per_record:
            lines.append(f"{row['index']:5d} " + " ".join(f"{row[k]:12.6f}" for k in keys))
        if self.aggregate:
            lines.append(" mean " + " ".join(f"{self.aggregate[k]:12.6f}" for k in keys))
        return "\n".join(lines)


def record_stats(record, mask):
    z_rand = record.z_rand.astype(np.float64)
    z_ref = record.z_refined.astype(np.float64)
    return {
        "std_rand": float(z_rand.std()),
        "std_refined": float(z_ref.std()),
        "tc_rand": temporal_correlation(z_rand),
        "tc_refined": temporal_correlation(z_ref),
        "lfr_rand": low_freq_energy_ratio(z_rand, mask),
        "lfr_refined": low_freq_energy_ratio(z_ref, mask),
    }


def dataset_stats(path, d0=DEFAULT_CUTOFF):
    """Per-record and mean spread, temporal correlation and low-band share."""
    header, reader = read_dataset(path)
    report = StatsReport()
    mask = gaussian_lowpass_mask(header.dims[1:], d0)
    for index, record in enumerate(reader):
        report.per_record.append({"index": index, **record_stats(record, mask)})
    if report.per_record:
        keys = [k for k in report.per_record[0] if k != "index"]
        report.aggregate = {k: float(np.mean([r[k] for r in report.per_record])) for k in keys}
    return report

"""Bit-exact code serialization.

Each quantizer index is packed in exactly log2(V) bits, frame-major then
level-minor, MSB-first within an index, and the final byte is zero-padded.
Fixed-length packing keeps the realized bitrate equal to the nominal
k * log2(V) * frame_rate bits per second; there is no entropy coding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import CodecConfig, CodeGrid

BITSTREAM_MAGIC = b"JHCB"
BITSTREAM_VERSION = 1
FILE_EXTENSION = ".jhc"

_STYLE_TO_CODE = {"dac": 0, "mimi": 1}
_CODE_TO_STYLE = {v: k for k, v in _STYLE_TO_CODE.items()}

_HEADER = struct.Struct("<4sBBBBHHHI")  # magic, version, style, K, k, V, rate, pad, frames
HEADER_BYTES = _HEADER.size


class BitstreamError(ValueError):
    pass


@dataclass
class BitstreamHeader:
    style: str
    total_levels: int  # levels the originating model holds
    k: int  # levels actually present in the payload
    codebook_size: int
    frame_rate: int
    pad_samples: int
    frame_count: int
    version: int = BITSTREAM_VERSION

    def __post_init__(self):
        if self.style not in _STYLE_TO_CODE:
            raise BitstreamError(f"unknown style {self.style!r}")
        if not 1 <= self.k <= self.total_levels <= 255:
            raise BitstreamError(f"need 1 <= k <= total levels <= 255, got {self.k}/{self.total_levels}")
        v = self.codebook_size
        if v < 2 or v > 65535 or (v & (v - 1)):
            raise BitstreamError(f"codebook size {v} is not a power of two in range")
        for name, value, top in (
            ("version", self.version, 255),
            ("frame_rate", self.frame_rate, 65535),
            ("pad_samples", self.pad_samples, 65535),
            ("frame_count", self.frame_count, 2**32 - 1),
        ):
            if not 0 <= value <= top:
                raise BitstreamError(f"{name}={value} out of range")

    @property
    def bits_per_index(self) -> int:
        return self.codebook_size.bit_length() - 1

    @property
    def payload_bytes(self) -> int:
        return payload_size(self.frame_count, self.k, self.codebook_size)

    @property
    def bits_per_second(self) -> int:
        return self.k * self.bits_per_index * self.frame_rate


def payload_size(frames: int, k: int, codebook_size: int) -> int:
    bits = frames * k * (codebook_size.bit_length() - 1)
    return (bits + 7) // 8


def make_header(grid: CodeGrid, config: CodecConfig) -> BitstreamHeader:
    return BitstreamHeader(
        style=config.style,
        total_levels=config.num_quantizers,
        k=grid.k,
        codebook_size=config.codebook_size,
        frame_rate=grid.frame_rate,
        pad_samples=grid.pad_samples,
        frame_count=grid.frames,
    )


def pack(grid: CodeGrid, header: BitstreamHeader) -> bytes:
    if header.frame_count != grid.frames or header.k != grid.k:
        raise BitstreamError("header shape does not match the grid")
    if header.frame_rate != grid.frame_rate or header.pad_samples != grid.pad_samples:
        raise BitstreamError("header timing fields do not match the grid")
    indices = np.asarray(grid.indices)
    if indices.size:
        if indices.min() < 0 or indices.max() >= header.codebook_size:
            raise BitstreamError("code index out of range for the codebook size")

    head = _HEADER.pack(
        BITSTREAM_MAGIC,
        header.version,
        _STYLE_TO_CODE[header.style],
        header.total_levels,
        header.k,
        header.codebook_size,
        header.frame_rate,
        header.pad_samples,
        header.frame_count,
    )
    if indices.size == 0:
        return head
    width = header.bits_per_index
    flat = indices.reshape(-1).astype(np.uint32)  # row-major: frame-major, level-minor
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    tail = (-bits.size) % 8
    if tail:
        bits = np.concatenate([bits, np.zeros(tail, dtype=np.uint8)])
    return head + np.packbits(bits).tobytes()


def unpack(data: bytes) -> tuple[BitstreamHeader, CodeGrid]:
    if len(data) < 4 or data[:4] != BITSTREAM_MAGIC:
        raise BitstreamError("bad magic; not a code stream")
    if len(data) < HEADER_BYTES:
        raise BitstreamError("truncated header")
    magic, version, style_code, total, k, v, rate, pad, frames = _HEADER.unpack(
        data[:HEADER_BYTES]
    )
    if version != BITSTREAM_VERSION:
        raise BitstreamError(f"unsupported stream version {version}")
    if style_code not in _CODE_TO_STYLE:
        raise BitstreamError(f"unknown style byte {style_code}")
    header = BitstreamHeader(
        style=_CODE_TO_STYLE[style_code],
        total_levels=total,
        k=k,
        codebook_size=v,
        frame_rate=rate,
        pad_samples=pad,
        frame_count=frames,
        version=version,
    )
    payload = data[HEADER_BYTES:]
    want = header.payload_bytes
    if len(payload) < want:
        raise BitstreamError(f"truncated payload: {len(payload)} bytes, need {want}")
    if len(payload) > want:
        raise BitstreamError(f"trailing bytes after payload: {len(payload) - want}")

    if frames == 0:
        indices = np.zeros((0, k), dtype=np.int64)
    else:
        width = header.bits_per_index
        bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
        bits = bits[: frames * k * width].reshape(frames * k, width)
        weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
        indices = (bits.astype(np.int64) @ weights).reshape(frames, k)
    grid = CodeGrid(indices, frame_rate=rate, pad_samples=pad)
    return header, grid

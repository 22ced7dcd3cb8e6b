"""Binary persistence for dense descriptor grids (DGRID001).

Layout, all little-endian:

    bytes  0..7   magic "DGRID001"
    bytes  8..9   width   (u16)
    bytes 10..11  height  (u16)
    bytes 12..13  descriptor_dim (u16, must be 128)
    bytes 14..15  patch_size (u16)
    bytes 16..23  checksum (u64): FNV-1a over bytes 0..15 + payload
    bytes 24..    payload: height*width*128 float32, row-major

Header total 24 bytes => a 4x4 grid file is exactly 24 + 4*4*128*4 = 8216
bytes. The checksum covers the dimension fields as well as the payload so
that any single corrupted byte anywhere in the file is detected.
"""

from __future__ import annotations

import struct

import numpy as np

from keydepth.sift import DESCRIPTOR_DIM, DescriptorGrid

MAGIC = b"DGRID001"
HEADER_SIZE = 24
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U16_MAX = 0xFFFF


class StoreError(ValueError):
    """Base class for DGRID read/write failures."""


class BadMagicError(StoreError):
    pass


class DimensionError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def write_grid(grid: DescriptorGrid, patch_size: int, path: str) -> None:
    """Serialize the grid as float32; raises StoreError with path context."""
    h, w = grid.height, grid.width
    if not (0 < w <= _U16_MAX and 0 < h <= _U16_MAX):
        raise DimensionError(f"{path}: grid dims {w}x{h} exceed the u16 header fields")
    if not 0 <= patch_size <= _U16_MAX:
        raise DimensionError(f"{path}: patch size {patch_size} out of range")
    payload = grid.descriptors.astype("<f4").tobytes()
    head = MAGIC + struct.pack("<HHHH", w, h, DESCRIPTOR_DIM, patch_size)
    checksum = fnv1a64(payload, fnv1a64(head))
    try:
        with open(path, "wb") as f:
            f.write(head)
            f.write(struct.pack("<Q", checksum))
            f.write(payload)
    except OSError as e:
        raise StoreError(f"{path}: {e}") from e


def read_grid(path: str) -> tuple[DescriptorGrid, int]:
    """Read and validate a DGRID001 file; returns (grid, patch_size)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise StoreError(f"{path}: {e}") from e
    if len(blob) < HEADER_SIZE:
        raise TruncatedError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    if blob[:8] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    w, h, dim, patch_size = struct.unpack("<HHHH", blob[8:16])
    (checksum,) = struct.unpack("<Q", blob[16:24])
    if dim != DESCRIPTOR_DIM:
        raise DimensionError(f"{path}: descriptor_dim expected {DESCRIPTOR_DIM}, found {dim}")
    expected_payload = w * h * DESCRIPTOR_DIM * 4
    payload = blob[HEADER_SIZE:]
    if len(payload) != expected_payload:
        raise TruncatedError(
            f"{path}: payload is {len(payload)} bytes, expected {expected_payload} for {w}x{h}"
        )
    actual = fnv1a64(payload, fnv1a64(blob[:16]))
    if actual != checksum:
        raise ChecksumError(f"{path}: checksum mismatch (stored {checksum:#018x}, computed {actual:#018x})")
    desc = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, DESCRIPTOR_DIM)
    return DescriptorGrid(desc, patch_size=patch_size), patch_size

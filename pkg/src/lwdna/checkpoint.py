"""
Versioned binary checkpoints.

Layout (integers little-endian uint32, floats little-endian float64):
    b"LWDNA1"
    arch JSON length, arch JSON bytes (utf-8)
    config length L, L config entries
    parameters in ConvNet.parameters() order, then BatchNorm running buffers
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DataFormatError
from .network import ConvNet
from .types import ArchSpec, ChannelConfig

logger = logging.getLogger(__name__)

MAGIC = b"LWDNA1"


def save_checkpoint(model: ConvNet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch_json = model.arch.model_dump_json().encode("utf-8")
    config = np.asarray(model.config.values, dtype="<u4")
    arrays = [p.data for p in model.parameters()] + model.buffers()
    flat = np.concatenate([a.reshape(-1) for a in arrays]).astype("<f8") if arrays else np.zeros(0, "<f8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray([len(arch_json)], dtype="<u4").tobytes())
        fh.write(arch_json)
        fh.write(np.asarray([len(config)], dtype="<u4").tobytes())
        fh.write(config.tobytes())
        fh.write(flat.tobytes())
    logger.info(f"Saved checkpoint {path} ({flat.size} values)")
    return path


def load_checkpoint(path: Union[str, Path]) -> ConvNet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataFormatError(str(path), 0, "not an LWDNA1 checkpoint")
    offset = len(MAGIC)

    def read_u32(count: int) -> np.ndarray:
        nonlocal offset
        end = offset + 4 * count
        if end > len(raw):
            raise DataFormatError(str(path), offset, "truncated header")
        out = np.frombuffer(raw, dtype="<u4", count=count, offset=offset)
        offset = end
        return out

    arch_len = int(read_u32(1)[0])
    if offset + arch_len > len(raw):
        raise DataFormatError(str(path), offset, "truncated architecture block")
    arch = ArchSpec.model_validate_json(raw[offset:offset + arch_len].decode("utf-8"))
    offset += arch_len
    config = ChannelConfig(values=[int(v) for v in read_u32(int(read_u32(1)[0]))])

    model = ConvNet(arch, config)
    arrays = [p.data for p in model.parameters()] + model.buffers()
    total = sum(a.size for a in arrays)
    if len(raw) - offset != 8 * total:
        raise DataFormatError(str(path), offset, f"expected {8 * total} parameter bytes, found {len(raw) - offset}")
    flat = np.frombuffer(raw, dtype="<f8", count=total, offset=offset)
    pos = 0
    for a in arrays:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    logger.debug(f"Loaded checkpoint {path}: {arch.name} {config.values}")
    return model

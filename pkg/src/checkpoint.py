"""NNCK parameter checkpoints.

Layout (little-endian): b"NNCK", u16 version, u32 layer count; per layer a u8
kind tag and a u8 parameter count; per parameter a u8 ndim, ndim u32 dims and
the float64 values in row-major order. Parameter-free layers (ReLU, dropout,
flatten) are stored with a zero parameter count so the stack round-trips.
"""

import logging
import struct
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import CorruptFileError, RejectedInputError
from .layers import Layer, LayerKind

logger = logging.getLogger(__name__)

MAGIC = b"NNCK"
VERSION = 1

LayerParams = Tuple[LayerKind, List[np.ndarray]]


def encode_checkpoint(layers: Sequence[Layer]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(layers))]
    for layer in layers:
        params = layer.parameters()
        chunks.append(struct.pack("<BB", int(layer.kind), len(params)))
        for p in params:
            chunks.append(struct.pack("<B", p.data.ndim))
            chunks.append(struct.pack(f"<{p.data.ndim}I", *p.dims))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<memory>") -> List[LayerParams]:
    """Parse an NNCK blob into (kind, arrays) per layer."""
    view = memoryview(blob)
    offset = 0

    def take(n: int, field: str) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CorruptFileError(source, field, f"truncated at byte {offset}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CorruptFileError(source, "magic", "expected NNCK")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CorruptFileError(source, "version", f"got {version}, expected {VERSION}")

    layers: List[LayerParams] = []
    for index in range(count):
        tag, nparams = struct.unpack("<BB", take(2, f"layer {index} header"))
        try:
            kind = LayerKind(tag)
        except ValueError:
            raise CorruptFileError(source, f"layer {index} kind", f"unknown tag {tag}")
        arrays = []
        for k in range(nparams):
            (ndim,) = struct.unpack("<B", take(1, f"layer {index} param {k} ndim"))
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"layer {index} param {k} dims"))
            size = int(np.prod(dims)) if dims else 1
            raw = take(8 * size, f"layer {index} param {k} data")
            arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))
        layers.append((kind, arrays))
    if offset != len(view):
        raise CorruptFileError(source, "trailer", f"{len(view) - offset} unexpected trailing bytes")
    return layers


def save_checkpoint(path: Union[str, Path], layers: Sequence[Layer]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(layers))
    logger.info(f"✅ Saved checkpoint with {len(layers)} layers to {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> List[LayerParams]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def load_into(layers: Sequence[Layer], stored: Sequence[LayerParams], source: str = "<memory>") -> None:
    """Copy stored parameters into an already built layer stack of the same architecture."""
    if len(stored) != len(layers):
        raise RejectedInputError(f"{source}: checkpoint has {len(stored)} layers, model has {len(layers)}")
    for index, (layer, (kind, arrays)) in enumerate(zip(layers, stored)):
        params = layer.parameters()
        if kind != layer.kind or len(arrays) != len(params):
            raise RejectedInputError(
                f"{source}: layer {index} is {kind.name} with {len(arrays)} params, "
                f"model expects {layer.kind.name} with {len(params)}"
            )
        for param, array in zip(params, arrays):
            if param.dims != array.shape:
                raise RejectedInputError(
                    f"{source}: layer {index} param '{param.name}' has shape {array.shape}, expected {param.dims}"
                )
            param.data[...] = array


def load_checkpoint(path: Union[str, Path], layers: Sequence[Layer]) -> None:
    load_into(layers, read_checkpoint(path), str(path))
    logger.info(f"✅ Loaded checkpoint {path}")

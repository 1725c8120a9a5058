"""Binary container for named arrays.

Layout (all integers little-endian)::

    magic       4 bytes   b"CSR1"
    count       uint32    number of entries
    entries     count x
        name_len    uint16
        name        name_len bytes, UTF-8
        dtype_code  uint8     0=float32 1=float64 2=int64 3=uint8 4=int32
        ndim        uint8
        shape       ndim x uint32
        nbytes      uint64
        data        nbytes, C order, little-endian

Metadata is stored as a uint8 entry named ``__meta__`` holding UTF-8 JSON with
sorted keys, so equal content always produces identical bytes.
"""

import json
import struct
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .exceptions import CheckpointError

logger = getLogger(__name__)

MAGIC = b"CSR1"
META_KEY = "__meta__"
DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def _encode_meta(meta: Mapping[str, Any]) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8)


def save_arrays(
    path: Union[str, Path],
    arrays: Mapping[str, np.ndarray],
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write named arrays (and optional JSON metadata) to ``path``.

    Raises:
        CheckpointError: Unsupported dtype or invalid name.
    """
    path = Path(path)
    entries = dict(arrays)
    if meta is not None:
        entries[META_KEY] = _encode_meta(meta)

    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        array = np.ascontiguousarray(array)
        dtype = array.dtype
        if dtype.itemsize > 1:
            dtype = dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"Unsupported dtype {array.dtype} for entry {name}.")
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise CheckpointError(f"Invalid entry name: {name!r}")
        data = array.astype(dtype, copy=False).tobytes(order="C")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_CODES[dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(struct.pack("<Q", len(data)))
        chunks.append(data)

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Wrote {len(entries)} entries to {path}.")
    return path


def load_arrays(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a file written by :func:`save_arrays`.

    Returns:
        A tuple of the named arrays and the metadata dictionary.

    Raises:
        CheckpointError: Bad magic bytes, a truncated file or a corrupt entry.
        FileNotFoundError: No such file.
    """
    path = Path(path)
    with path.open("rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a CSR1 file.")

    offset = 4
    try:
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", raw, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            if code not in CODE_DTYPES or offset + nbytes > len(raw):
                raise CheckpointError(f"{path} has a corrupt entry {name!r}.")
            dtype = CODE_DTYPES[code]
            if nbytes != int(np.prod(shape)) * dtype.itemsize:
                raise CheckpointError(
                    f"{path} has a corrupt entry {name!r}: {nbytes} bytes for shape "
                    f"{tuple(shape)}."
                )
            data = np.frombuffer(
                raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset
            )
            arrays[name] = data.reshape(shape).copy()
            offset += nbytes
    except struct.error:
        raise CheckpointError(f"{path} is truncated.")
    except ValueError as e:
        raise CheckpointError(f"{path} has a corrupt entry: {e}")

    meta: Dict[str, Any] = {}
    if META_KEY in arrays:
        try:
            meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"{path} has corrupt metadata: {e}")
        if not isinstance(meta, dict):
            raise CheckpointError(f"{path} has corrupt metadata: not an object.")
    return arrays, meta

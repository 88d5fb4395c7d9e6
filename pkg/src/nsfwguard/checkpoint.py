"""Named-tensor checkpoint file: header, then `name rows cols` + f32 data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError

CKPT_HEADER = b"NSFWGUARD-CKPT v1"


def save_checkpoint(tensors: dict[str, np.ndarray], path: Path | str) -> Path:
    """Write tensors in name order: text descriptor line, then raw
    row-major little-endian float32 payload per tensor."""
    path = Path(path)
    chunks = [CKPT_HEADER + b"\n"]
    for name in sorted(tensors):
        arr = np.atleast_2d(np.asarray(tensors[name], dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be at most 2-D")
        rows, cols = arr.shape
        chunks.append(f"{name} {rows} {cols}\n".encode())
        chunks.append(arr.astype("<f4").tobytes(order="C"))
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = data.find(b"\n")
    if pos < 0 or data[:pos] != CKPT_HEADER:
        raise ParseError("bad checkpoint header", 1)
    pos += 1
    tensors: dict[str, np.ndarray] = {}
    entry = 1
    while pos < len(data):
        line_end = data.find(b"\n", pos)
        if line_end < 0:
            raise ParseError("truncated tensor descriptor", entry)
        parts = data[pos:line_end].decode("utf-8").split()
        if len(parts) != 3:
            raise ParseError(f"malformed tensor descriptor {data[pos:line_end]!r}", entry)
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        nbytes = rows * cols * 4
        payload = data[line_end + 1 : line_end + 1 + nbytes]
        if len(payload) != nbytes:
            raise ParseError(f"tensor {name!r} payload truncated", entry)
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
        )
        pos = line_end + 1 + nbytes
        entry += 1
    return tensors

"""
On-disk formats shared across modules.

Checkpoints use one envelope for discriminative and generative models: a
single line of JSON header, a newline, then the parameters as a flat
little-endian float64 payload. Tables are written with a fixed
10-significant-digit float format so golden files stay stable.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import DataFormatError

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.10g"
PAYLOAD_DTYPE = "<f8"

PathLike = Union[str, Path]


def write_checkpoint(path: PathLike, header: Dict[str, Any], payload: np.ndarray) -> Path:
    """
    Write a checkpoint envelope.

    Args:
        path: Destination file
        header: JSON-serializable metadata (architecture, dims, seed, ...)
        payload: Parameters, flattened

    Returns:
        Path of the written file
    """
    flat = np.ascontiguousarray(np.asarray(payload, dtype=np.float64).ravel())
    header = dict(header, payload_length=int(flat.size))
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + flat.astype(PAYLOAD_DTYPE).tobytes()
    return _atomic_write_bytes(Path(path), blob)


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], np.ndarray]:
    """Read a checkpoint envelope written by :func:`write_checkpoint`."""
    raw = Path(path).read_bytes()
    split = raw.find(b"\n")
    if split < 0:
        raise DataFormatError(f"Checkpoint {path} has no header line")
    try:
        header = json.loads(raw[:split].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"Checkpoint {path} has an unreadable header: {e}") from e

    body = raw[split + 1:]
    expected = int(header.get("payload_length", -1)) * 8
    if len(body) != expected:
        raise DataFormatError(f"Checkpoint {path} payload is {len(body)} bytes, expected {expected}")
    return header, np.frombuffer(body, dtype=PAYLOAD_DTYPE).astype(np.float64)


def jsonable(value: Any) -> Any:
    """Convert numpy values to JSON types; NaN becomes None."""
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()] if value.ndim else jsonable(value.item())
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if np.isnan(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n"
    return _atomic_write_bytes(Path(path), text.encode("utf-8"))


def read_json(path: PathLike) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return _atomic_write_bytes(Path(path), text.encode("utf-8"))


def _atomic_write_bytes(path: Path, blob: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp_name, path)
    except OSError:
        logger.error(f"Failed writing {path}")
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path

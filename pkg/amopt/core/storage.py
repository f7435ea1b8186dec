"""Persistence: parameter containers, checkpoints and atomic artifact files"""
import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from amopt.core.errors import CompatibilityError

logger = structlog.get_logger(__name__)

MAGIC = b"AMOPT"
CONTAINER_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write to a temp file next to ``path`` and rename it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------


def encode_params(values: Mapping[str, np.ndarray]) -> bytes:
    """Versioned binary container: magic, entry count, then per entry
    name length, name, ndim, dims and raw little-endian float64 data"""
    buf = io.BytesIO()
    buf.write(MAGIC + str(CONTAINER_VERSION).encode("ascii"))
    buf.write(struct.pack("<I", len(values)))
    for name, value in values.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        buf.write(array.tobytes(order="C"))
    return buf.getvalue()


def decode_params(payload: bytes) -> Dict[str, np.ndarray]:
    header = payload[: len(MAGIC) + 1]
    if not header.startswith(MAGIC):
        raise CompatibilityError("not a parameter container (bad magic bytes)")
    version = header[len(MAGIC):].decode("ascii", errors="replace")
    if version != str(CONTAINER_VERSION):
        raise CompatibilityError(
            f"parameter container version {version} is not supported (this build reads version {CONTAINER_VERSION})"
        )

    offset = len(header)
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    values: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        name = payload[offset: offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        values[name] = data.reshape(shape).astype(np.float64)
    return values


def save_params(path: PathLike, values: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_params(values))


def load_params(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(directory: PathLike, values: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    directory = Path(directory)
    save_params(directory / "params.amopt", values)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, **meta}
    atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("checkpoint_written", path=str(directory), step=meta.get("step"))
    return directory


def read_checkpoint(directory: PathLike) -> tuple:
    """(values, meta) for a checkpoint directory; refuses other format versions"""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise CompatibilityError(f"no checkpoint found at {directory}")
    meta = json.loads(meta_path.read_text())
    found = meta.get("format_version")
    if found != CHECKPOINT_FORMAT_VERSION:
        raise CompatibilityError(
            f"checkpoint format version {found} does not match supported version {CHECKPOINT_FORMAT_VERSION}"
        )
    return load_params(directory / "params.amopt"), meta


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def format_value(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], comments: Sequence[str] = ()) -> str:
    out = io.StringIO()
    for line in comments:
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return out.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]], comments: Sequence[str] = ()) -> Path:
    path = Path(path)
    atomic_write_text(path, render_csv(header, rows, comments))
    return path


class CsvLog:
    """Append-only table held in memory and flushed atomically"""

    def __init__(self, path: PathLike, header: Sequence[str]):
        self.path = Path(path)
        self.header = list(header)
        self.rows: List[List[Any]] = []

    def append(self, row: Mapping[str, Any]) -> None:
        self.rows.append([row.get(column, 0) for column in self.header])

    def last(self) -> Optional[Dict[str, Any]]:
        return dict(zip(self.header, self.rows[-1])) if self.rows else None

    def flush(self) -> None:
        write_csv(self.path, self.header, self.rows)


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    """(header, rows) of a CSV artifact, skipping '#' comment lines"""
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, [])
    return header, [row for row in reader if row]

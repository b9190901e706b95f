"""Versioned binary container shared by checkpoints and exported inference models.

Layout::

    DYREP <kind> <major>.<minor>\\n
    <header byte length>\\n
    <header: UTF-8 JSON, sorted keys>
    <array payload: raw little-endian arrays, in header order>

The header lists every array with its dtype, shape, byte offset and byte
length, so readers can validate the payload before touching it.
"""

import json
from pathlib import Path

import numpy as np

MAGIC = b"DYREP"
MAJOR = 1
MINOR = 0


class ContainerError(ValueError):
    """Raised with the name of the section that failed to parse."""

    def __init__(self, section, message):
        super().__init__(f"[{section}] {message}")
        self.section = section


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_container(path, kind, meta, arrays, dtype=None):
    """Write ``arrays`` (name -> ndarray) after a JSON header holding ``meta``.

    ``dtype`` forces every array to one little-endian float type; otherwise
    each array keeps its own dtype.
    """
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = np.dtype(dtype) if dtype is not None else a.dtype
        a = np.ascontiguousarray(a, dtype=dt.newbyteorder("<"))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = canonical_json({"kind": kind, "meta": meta, "arrays": table}).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + f" {kind} {MAJOR}.{MINOR}\n".encode("ascii"))
        fh.write(f"{len(header)}\n".encode("ascii"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, expect_kind=None):
    """Return ``(meta, arrays)``; raises :class:`ContainerError` naming the bad section."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    first = data[:nl] if nl >= 0 else data
    parts = first.split(b" ")
    if nl < 0 or len(parts) != 3 or parts[0] != MAGIC:
        raise ContainerError("magic", f"{path} is not a DYREP container")
    kind = parts[1].decode("ascii", "replace")
    try:
        major, minor = (int(v) for v in parts[2].split(b"."))
    except ValueError:
        raise ContainerError("version", f"unreadable version {parts[2]!r}") from None
    if major != MAJOR:
        raise ContainerError("version", f"unsupported major version {major} (reader supports {MAJOR})")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError("magic", f"expected a {expect_kind} container, found {kind}")
    nl2 = data.find(b"\n", nl + 1)
    try:
        hlen = int(data[nl + 1 : nl2])
        start = nl2 + 1
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ContainerError("header", f"corrupt header: {exc}") from None
    payload = memoryview(data)[start + hlen :]
    arrays = {}
    for entry in header.get("arrays", []):
        name = entry.get("name", "?")
        try:
            dt = np.dtype(entry["dtype"])
            off, nb = int(entry["offset"]), int(entry["nbytes"])
            shape = tuple(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"array:{name}", f"bad table entry: {exc}") from None
        if off < 0 or off + nb > len(payload) or nb != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"array:{name}", f"declared {nb} bytes at offset {off} do not fit the payload")
        arrays[name] = np.frombuffer(payload[off : off + nb], dtype=dt).reshape(shape).copy()
    return header.get("meta", {}), arrays

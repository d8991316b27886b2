"""Checkpoint container: one JSON header line, then raw little-endian float64 arrays.

The header lists every array's name and shape in storage order, so a file can
be validated before any payload is read. Saving the same content twice gives
byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

FORMAT = "clipo-ckpt"
VERSION = 1


def save(path: str | Path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    meta = dict(header)
    meta["format"] = FORMAT
    meta["version"] = VERSION
    meta["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: corrupt checkpoint, missing header terminator")
    try:
        meta = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc.msg})") from None
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: field 'format' is {meta.get('format')!r}, expected {FORMAT!r}")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: field 'version' is {meta.get('version')!r}, expected {VERSION}")
    if not isinstance(meta.get("arrays"), list):
        raise CheckpointError(f"{path}: field 'arrays' missing from header")
    arrays: dict[str, np.ndarray] = {}
    offset = nl + 1
    for name, shape in meta["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: corrupt checkpoint, array {name!r} is truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: corrupt checkpoint, {len(raw) - offset} trailing bytes")
    header = {k: v for k, v in meta.items() if k not in ("format", "version", "arrays")}
    return header, arrays

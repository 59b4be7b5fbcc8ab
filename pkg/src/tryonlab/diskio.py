"""Deterministic container I/O.

Dataset samples and checkpoints are plain zip archives of little-endian
float32 ``.npy`` members (plus an optional ``meta.json``), written with
pinned timestamps and sorted member order so that identical content always
produces identical bytes.  ``numpy.load`` can read the array-only archives
directly; :func:`read_array_zip` handles the ones that carry metadata.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

# DOS epoch; the zip format cannot represent anything earlier.
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def write_array_zip(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named arrays (and optional metadata) as a reproducible archive.

    Arrays are stored as ``<name>.npy`` in sorted name order; metadata, when
    given, as a ``meta.json`` member with sorted keys.  Floating arrays are
    cast to little-endian float32 — the documented on-disk dtype.
    """
    path = Path(path)
    entries: list[tuple[str, bytes]] = []
    if meta is not None:
        entries.append(("meta.json", json.dumps(meta, sort_keys=True).encode("utf-8")))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        entries.append((f"{name}.npy", _npy_bytes(arr)))

    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=6) as zf:
        for name, payload in entries:
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o600 << 16
            zf.writestr(info, payload)
    tmp.replace(path)


def read_array_zip(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by :func:`write_array_zip`; returns (arrays, meta)."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            with zf.open(name) as fh:
                if name == "meta.json":
                    meta = json.loads(fh.read().decode("utf-8"))
                elif name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(
                        io.BytesIO(fh.read()), allow_pickle=False
                    )
    return arrays, meta


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

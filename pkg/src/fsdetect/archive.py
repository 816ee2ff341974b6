"""Byte-stable archive files and content hashing.

Every artifact the pipeline writes goes through :func:`write_archive`, a zip
of ``.npy`` members plus a ``header.json``. Member timestamps are pinned so the
same content always produces the same file bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)
HEADER = "header.json"


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_config(obj: Any) -> str:
    return sha256_bytes(canonical_json(obj))


def hash_tensors(tensors: Mapping[str, torch.Tensor | np.ndarray], extra: Any = None) -> str:
    """Order-independent content hash of named arrays (plus optional metadata)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    if extra is not None:
        h.update(canonical_json(extra))
    return h.hexdigest()


def _to_numpy(value: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def write_archive(
    path: str | Path,
    arrays: Mapping[str, torch.Tensor | np.ndarray],
    header: Mapping[str, Any],
    exclusive: bool = True,
) -> Path:
    """Write ``arrays`` and ``header`` to ``path``.

    With ``exclusive`` the file must not exist yet; artifacts are never
    overwritten in place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "xb" if exclusive else "wb") as fh:
        with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            info = zipfile.ZipInfo(HEADER, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, canonical_json(dict(header)))
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(_to_numpy(arrays[name])), allow_pickle=False)
                info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, buf.getvalue())
    return path


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"archive not found: {path}")
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read(HEADER))
        for name in zf.namelist():
            if name == HEADER:
                continue
            arrays[name[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, header

"""Tensor archives: ``<stem>.npz`` holding the arrays plus ``<stem>.json``.

The JSON manifest lists every tensor's name, shape, dtype and sha256, the
archive-level content hash (sha256 over the sorted per-tensor records),
and any extra metadata the caller attaches. Both files are written to a
temporary name first and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from ntprompt.errors import DataError


def _as_array(x):
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def tensor_records(tensors: dict):
    records = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_as_array(tensors[name]))
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
            }
        )
    return records


def content_hash(tensors: dict) -> str:
    payload = json.dumps(tensor_records(tensors), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def save_archive(stem, tensors: dict, meta=None) -> str:
    stem = Path(stem)
    arrays = {name: np.ascontiguousarray(_as_array(t)) for name, t in tensors.items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    digest = content_hash(arrays)
    manifest = {"format": "ntprompt-tensor-archive/1", "content_hash": digest, "tensors": tensor_records(arrays)}
    if meta:
        manifest["meta"] = meta
    atomic_write_bytes(stem.with_suffix(".npz"), buf.getvalue())
    atomic_write_text(stem.with_suffix(".json"), json.dumps(manifest, indent=2, sort_keys=True))
    return digest


def load_archive(stem, verify=True):
    """Returns (tensors dict of numpy arrays, manifest dict)."""
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    with np.load(stem.with_suffix(".npz"), allow_pickle=False) as data:
        tensors = {name: data[name] for name in data.files}
    if verify and content_hash(tensors) != manifest["content_hash"]:
        raise DataError(f"archive {stem} does not match its manifest hash")
    return tensors, manifest

"""Flat tensor checkpoint format.

A checkpoint directory holds ``tensors.bin`` (raw little-endian blobs, one per
named tensor, concatenated) and ``index.csv`` with rows ``name,shape,dtype,offset``.
Shapes are written as ``x``-joined dimensions (empty for scalars).
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import DataError, MissingFile, WriteFailure

INDEX_FILE = "index.csv"
BLOB_FILE = "tensors.bin"

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
}
_TORCH_NAMES = {v[0]: k for k, v in _DTYPES.items()}


def save_tensors(tensors: Mapping[str, torch.Tensor], directory: os.PathLike | str) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        rows = ["name,shape,dtype,offset"]
        offset = 0
        with open(directory / BLOB_FILE, "wb") as blob:
            for name, tensor in tensors.items():
                if "," in name:
                    raise ValueError(f"tensor name may not contain commas: {name}")
                t = tensor.detach().cpu().contiguous()
                dtype_name = _TORCH_NAMES.get(t.dtype)
                if dtype_name is None:
                    raise ValueError(f"unsupported dtype {t.dtype} for {name}")
                data = t.numpy().astype(_DTYPES[dtype_name][1], copy=False).tobytes()
                blob.write(data)
                shape = "x".join(str(d) for d in t.shape)
                rows.append(f"{name},{shape},{dtype_name},{offset}")
                offset += len(data)
        (directory / INDEX_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    except OSError as exc:
        raise WriteFailure(f"cannot write checkpoint {directory}: {exc}") from exc
    return directory


def load_tensors(directory: os.PathLike | str) -> dict[str, torch.Tensor]:
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.is_file():
        raise MissingFile(f"no checkpoint index in {directory}")
    raw = (directory / BLOB_FILE).read_bytes()
    out: dict[str, torch.Tensor] = {}
    lines = index.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "name,shape,dtype,offset":
        raise DataError(f"{index}: bad header")
    for line in lines[1:]:
        if not line:
            continue
        name, shape_s, dtype_name, offset_s = line.split(",")
        shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        torch_dtype, np_dtype = _DTYPES[dtype_name]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset = int(offset_s)
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset).reshape(shape)
        out[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return out


def save_module(module: torch.nn.Module, directory: os.PathLike | str) -> Path:
    return save_tensors(module.state_dict(), directory)


def load_module(module: torch.nn.Module, directory: os.PathLike | str) -> torch.nn.Module:
    module.load_state_dict(load_tensors(directory))
    return module


def checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

"""Checkpoint container shared by codecs and models.

Layout: a zip archive holding ``meta.json`` (arbitrary JSON metadata, a
mandatory "version" field, and per-array shapes) plus one ``arrays/<name>.f32``
entry per parameter grid, stored as raw little-endian float32.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

from tokse.core import ValidationError

ARCHIVE_VERSION = 1


def save_archive(path: str | Path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    meta = dict(meta)
    meta.setdefault("version", ARCHIVE_VERSION)
    meta["array_shapes"] = {name: list(np.asarray(a).shape) for name, a in arrays.items()}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, arr in arrays.items():
            zf.writestr(f"arrays/{name}.f32", np.asarray(arr, dtype="<f4").tobytes(order="C"))


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path, "r") as zf:
        try:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
        except KeyError as exc:
            raise ValidationError(f"{path} has no meta.json; not a tokse archive") from exc
        if "version" not in meta:
            raise ValidationError(f"{path} meta.json lacks the mandatory version field")
        shapes = meta.get("array_shapes", {})
        arrays = {}
        for name, shape in shapes.items():
            raw = zf.read(f"arrays/{name}.f32")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            arrays[name] = arr.reshape([int(s) for s in shape])
    return meta, arrays

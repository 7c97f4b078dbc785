"""Self-describing binary container: a zip of ``.npy`` members plus ``meta.json``.

Arrays are stored little-endian and row-major. Zip entries carry a fixed
timestamp, so identical content always yields identical bytes. The files can
also be opened with ``numpy.load``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from eltnilm.errors import DataError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind in "fiu" and arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path, meta: dict, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, _little_endian(np.asarray(arr)), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
    tmp.replace(path)


def read_container(path) -> tuple:
    """Return ``(meta, arrays)``."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError) as exc:
        raise DataError(f"{path}: not a valid container ({exc})") from exc
    with zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise DataError(f"{path}: missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in names:
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays

"""On-disk formats: binary feature files, annotation/detection JSON, checkpoints."""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path
from typing import Iterable

import numpy as np

from dyfadet.detection import Detection, Segment
from dyfadet.errors import ContractError

FEATURE_MAGIC = b"DFT1"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def encode_features(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ContractError(f"features must be C x T, got shape {arr.shape}")
    C, T = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, C, T) + payload


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ContractError("feature file shorter than its header")
    magic, version, C, T = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise ContractError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise ContractError(f"unsupported feature version {version}")
    payload = blob[_HEADER.size :]
    if len(payload) != 4 * C * T:
        raise ContractError(f"payload is {len(payload)} bytes, header promises {4 * C * T}")
    return np.frombuffer(payload, dtype="<f4").reshape(C, T).astype(np.float64)


def write_features(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(arr))


def read_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


def read_feature_dir(directory: str | Path) -> dict[str, np.ndarray]:
    return {p.stem: read_features(p) for p in sorted(Path(directory).glob("*.dft"))}


# ----------------------------------------------------------------------------
# JSON


def load_annotations(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    for vid, entry in data.items():
        duration = float(entry["duration_s"])
        for ann in entry["annotations"]:
            start, end = ann["segment"]
            if not 0 <= start < end <= duration + 1e-9:
                raise ContractError(f"{vid}: segment {ann['segment']} outside [0, {duration}]")
    return data


def save_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def ground_truth_segments(annotations: dict) -> list[Segment]:
    """Flatten an annotation file into second-valued segments."""
    out = []
    for vid in sorted(annotations):
        for ann in annotations[vid]["annotations"]:
            start, end = ann["segment"]
            out.append(Segment(float(start), float(end), int(ann["label"]), vid))
    return out


def detections_to_json(dets: Iterable[Detection]) -> list[dict]:
    return [d.to_json() for d in dets]


def load_detections(path: str | Path) -> list[Detection]:
    return [Detection.from_json(obj) for obj in json.loads(Path(path).read_text())]


# ----------------------------------------------------------------------------
# checkpoints


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    config: dict,
    params: dict[str, np.ndarray],
    ema: dict[str, np.ndarray] | None = None,
) -> None:
    """Byte-stable archive: ``config.json`` plus one ``.npy`` member per array."""
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "config.json", json.dumps(config, sort_keys=True).encode())
        for prefix, table in (("params", params), ("ema", ema or {})):
            for name in sorted(table):
                buf = io.BytesIO()
                # ascontiguousarray would promote 0-d scalars to shape (1,)
                np.lib.format.write_array(buf, np.asarray(table[name], order="C"), allow_pickle=False)
                _write_member(zf, f"{prefix}/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    params: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        config = json.loads(zf.read("config.json"))
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            prefix, rest = name.split("/", 1)
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            (params if prefix == "params" else ema)[rest[: -len(".npy")]] = arr
    return config, params, ema

"""Reading and writing volumes: NIfTI-1 and the raw sidecar format.

Raw volumes are a pair of files: ``name.raw`` holds little-endian samples in
C order (last axis fastest) and ``name.json`` the header::

    {"byte_order": "little", "dims": [...], "dtype": "float32", "origin": [...], "spacing": [...]}

Images are stored as ``float32``, labels as ``uint16``. The header never
names its data file, so two volumes with equal geometry and dtype share a
byte-identical header.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import nibabel as nib
import numpy as np

from paddit.core.errors import VolumeFormatError
from paddit.core.logging import get_logger
from paddit.models.volumes import GridGeometry, LabelVolume, ScalarVolume

logger = get_logger(__name__)

VolumeKind = Literal["auto", "image", "label"]
Volume = ScalarVolume | LabelVolume

RAW_DTYPES = {"float32": np.dtype("<f4"), "uint16": np.dtype("<u2")}
NIFTI_SUFFIXES = (".nii", ".nii.gz")


def is_nifti(path: Path) -> bool:
    return path.name.lower().endswith(NIFTI_SUFFIXES)


def raw_paths(path: Path) -> tuple[Path, Path]:
    """``(data, header)`` paths for a raw volume addressed by either file."""
    return path.with_suffix(".raw"), path.with_suffix(".json")


def _wrap(
    values: np.ndarray, geometry: GridGeometry, kind: VolumeKind, integer_data: bool
) -> Volume:
    if kind == "label" or (kind == "auto" and integer_data):
        return LabelVolume(geometry, values)
    return ScalarVolume(geometry, values)


def _read_raw_header(header_path: Path) -> dict:
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"{header_path}: raw header not found") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{header_path}: header must be a JSON object")
    missing = {"dims", "spacing", "dtype"} - header.keys()
    if missing:
        raise VolumeFormatError(f"{header_path}: header is missing {sorted(missing)}")
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"{header_path}: only little-endian data is supported")
    return header


def _load_raw(path: Path, kind: VolumeKind) -> Volume:
    data_path, header_path = raw_paths(path)
    header = _read_raw_header(header_path)
    dtype_name = header["dtype"]
    if dtype_name not in RAW_DTYPES:
        raise VolumeFormatError(
            f"{header_path}: unsupported dtype {dtype_name!r}, "
            f"expected one of {sorted(RAW_DTYPES)}"
        )
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) not in (2, 3):
        raise VolumeFormatError(f"{header_path}: volumes must have 2 or 3 axes, got {len(dims)}")
    try:
        geometry = GridGeometry(dims, tuple(header["spacing"]), tuple(header.get("origin", ())))
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: invalid geometry: {exc}") from exc

    dtype = RAW_DTYPES[dtype_name]
    expected = int(np.prod(dims)) * dtype.itemsize
    try:
        payload = data_path.read_bytes()
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"{data_path}: raw data file not found") from exc
    if len(payload) < expected:
        raise VolumeFormatError(
            f"{data_path}: truncated at byte offset {len(payload)}, expected {expected} bytes"
        )
    if len(payload) > expected:
        raise VolumeFormatError(
            f"{data_path}: unexpected trailing data from byte offset {expected} "
            f"({len(payload) - expected} extra bytes)"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return _wrap(values, geometry, kind, integer_data=dtype.kind == "u")


def _load_nifti(path: Path, kind: VolumeKind) -> Volume:
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise VolumeFormatError(f"{path}: cannot read NIfTI: {exc}") from exc
    try:
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise VolumeFormatError(f"{path}: cannot read NIfTI data: {exc}") from exc

    # 2D slices are commonly stored with trailing singleton axes
    while data.ndim > 2 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3):
        raise VolumeFormatError(f"{path}: volumes must have 2 or 3 axes, got shape {data.shape}")
    if data.dtype.kind not in "fiub":
        raise VolumeFormatError(f"{path}: unsupported datatype {data.dtype}")

    ndim = data.ndim
    spacing = tuple(float(z) for z in img.header.get_zooms()[:ndim])
    origin = tuple(float(o) for o in img.affine[:ndim, 3])
    try:
        geometry = GridGeometry(data.shape, spacing, origin)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: invalid geometry: {exc}") from exc
    return _wrap(data, geometry, kind, integer_data=data.dtype.kind in "iub")


def load_volume(path: Path | str, kind: VolumeKind = "auto") -> Volume:
    """Load an image or label volume; ``auto`` picks labels for integer data."""
    path = Path(path)
    logger.debug(f"Loading volume {path} (kind={kind})")
    if is_nifti(path):
        return _load_nifti(path, kind)
    if path.suffix.lower() in (".raw", ".json"):
        return _load_raw(path, kind)
    raise VolumeFormatError(f"{path}: unsupported volume format (expected .nii, .nii.gz or .raw)")


def _storage_array(volume: Volume) -> np.ndarray:
    if isinstance(volume, LabelVolume):
        if volume.labels.size and volume.labels.max() > np.iinfo(np.uint16).max:
            raise VolumeFormatError("labels above 65535 cannot be stored as uint16")
        return volume.labels.astype("<u2")
    return volume.values.astype("<f4")


def raw_header(volume: Volume) -> dict:
    g = volume.geometry
    return {
        "byte_order": "little",
        "dims": list(g.dims),
        "dtype": "uint16" if isinstance(volume, LabelVolume) else "float32",
        "origin": list(g.origin),
        "spacing": list(g.spacing),
    }


def _save_raw(volume: Volume, path: Path) -> Path:
    data_path, header_path = raw_paths(path)
    header_path.write_text(json.dumps(raw_header(volume), indent=2, sort_keys=True) + "\n")
    data_path.write_bytes(np.ascontiguousarray(_storage_array(volume)).tobytes())
    return data_path


def _save_nifti(volume: Volume, path: Path) -> Path:
    g = volume.geometry
    affine = np.eye(4)
    affine[: g.ndim, : g.ndim] = np.diag(g.spacing)
    affine[: g.ndim, 3] = g.origin
    img = nib.Nifti1Image(_storage_array(volume), affine)
    img.header.set_zooms(g.spacing)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))
    return path


def save_volume(volume: Volume, path: Path | str) -> Path:
    """Write ``volume``; the suffix selects NIfTI or raw. Returns the data file path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if is_nifti(path):
        return _save_nifti(volume, path)
    if path.suffix.lower() in (".raw", ".json"):
        return _save_raw(volume, path)
    raise VolumeFormatError(f"{path}: unsupported volume format (expected .nii, .nii.gz or .raw)")

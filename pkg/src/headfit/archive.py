"""Single-file model archive: JSON header plus raw little-endian float64 blobs.

Layout:

- bytes 0..3: magic ``MFM1``
- bytes 4..11: header byte length as little-endian uint64
- header: UTF-8 JSON, space-padded to the declared length
- blobs: raw ``<f8`` arrays at the absolute byte offsets declared under the
  header's ``blobs`` key (row-major for the component matrix)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .shape_model import MorphableModel

MAGIC = b"MFM1"

_BLOB_NAMES = ("mean_shape", "components", "eigenvalues")


def save_model(model: MorphableModel, path) -> None:
    """Write a model archive; the same model always produces identical bytes."""
    path = Path(path)
    blobs = {
        "mean_shape": np.ascontiguousarray(model.mean_shape, dtype="<f8"),
        "components": np.ascontiguousarray(model.components, dtype="<f8"),
        "eigenvalues": np.ascontiguousarray(model.eigenvalues, dtype="<f8"),
    }
    header = {
        "num_vertices": model.num_vertices,
        "num_components": model.num_components,
        "name": model.name,
        "landmark_table": {k: int(v) for k, v in model.landmark_table.items()},
        "top_region": model.top_region.tolist(),
        "face_region": model.face_region.tolist(),
        "triangles": model.triangles.tolist(),
        "blobs": {name: {"offset": 0, "count": arr.size} for name, arr in blobs.items()},
    }
    # Serialize once with placeholder offsets to size the header, then pad so
    # the real offsets (at most ~16 extra digits per blob) still fit.
    draft = json.dumps(header, separators=(",", ":"))
    header_len = ((len(draft) + 64 + 1023) // 1024) * 1024
    offset = 4 + 8 + header_len
    for name in _BLOB_NAMES:
        header["blobs"][name]["offset"] = offset
        offset += blobs[name].size * 8
    encoded = json.dumps(header, separators=(",", ":")).encode("utf-8")
    if len(encoded) > header_len:
        raise InvalidInputError("model header exceeded its padded size")
    encoded += b" " * (header_len - len(encoded))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", header_len))
        fh.write(encoded)
        for name in _BLOB_NAMES:
            fh.write(blobs[name].tobytes())


def load_model(path) -> MorphableModel:
    """Read a model archive, validating structure and model invariants."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model archive: {exc}", path=str(path)) from exc
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a model archive (bad magic)", path=str(path))
    (header_len,) = struct.unpack("<Q", data[4:12])
    if 12 + header_len > len(data):
        raise FormatError("truncated archive header", path=str(path))
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid header JSON: {exc}", path=str(path)) from exc

    try:
        num_vertices = int(header["num_vertices"])
        num_components = int(header["num_components"])
        blob_spec = header["blobs"]
        landmark_table = {str(k): int(v) for k, v in header["landmark_table"].items()}
        arrays = {}
        for name in _BLOB_NAMES:
            spec = blob_spec[name]
            offset, count = int(spec["offset"]), int(spec["count"])
            if offset < 0 or offset + count * 8 > len(data):
                raise FormatError(
                    f"blob {name!r} exceeds file size", path=str(path)
                )
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"malformed header: {exc!r}", path=str(path)) from exc

    expected = {
        "mean_shape": 3 * num_vertices,
        "components": 3 * num_vertices * num_components,
        "eigenvalues": num_components,
    }
    for name, size in expected.items():
        if arrays[name].size != size:
            raise FormatError(
                f"blob {name!r} has {arrays[name].size} values, expected {size}",
                path=str(path),
            )
    try:
        return MorphableModel(
            mean_shape=arrays["mean_shape"].astype(np.float64),
            components=arrays["components"].astype(np.float64).reshape(
                3 * num_vertices, num_components
            ),
            eigenvalues=arrays["eigenvalues"].astype(np.float64),
            landmark_table=landmark_table,
            top_region=np.asarray(header.get("top_region", []), dtype=np.int64),
            face_region=np.asarray(header.get("face_region", []), dtype=np.int64),
            triangles=np.asarray(header.get("triangles", []), dtype=np.int64).reshape(-1, 3),
            name=str(header.get("name", "unnamed")),
        )
    except InvalidInputError as exc:
        raise FormatError(f"model fails validation: {exc}", path=str(path)) from exc

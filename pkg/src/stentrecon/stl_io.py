"""Binary STL reading and writing.

Layout: 80-byte header, little-endian uint32 triangle count, then 50 bytes
per triangle (float32 normal, three float32 vertices, uint16 attribute 0).
"""

from __future__ import annotations

import numpy as np

from .surface import StentMesh

_RECORD = np.dtype(
    [
        ("normal", "<f4", (3,)),
        ("vertices", "<f4", (3, 3)),
        ("attr", "<u2"),
    ]
)

_HEADER = b"stentrecon swept strut surface"


class StlFormatError(Exception):
    """Raised when a file does not follow the binary STL layout."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


def write_stl(mesh: StentMesh, path) -> None:
    tris = mesh.triangles
    records = np.zeros(len(tris), dtype=_RECORD)
    v0 = mesh.vertices[tris[:, 0]]
    v1 = mesh.vertices[tris[:, 1]]
    v2 = mesh.vertices[tris[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0.0] = 1.0
    records["normal"] = (normals / lengths[:, None]).astype(np.float32)
    records["vertices"] = np.stack([v0, v1, v2], axis=1).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.ljust(80, b"\0"))
        fh.write(np.uint32(len(tris)).tobytes())
        fh.write(records.tobytes())


def read_stl(path) -> StentMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 84:
        raise StlFormatError("file shorter than header and count", len(data))
    count = int(np.frombuffer(data[80:84], dtype="<u4")[0])
    expected = 84 + 50 * count
    if len(data) != expected:
        raise StlFormatError(
            f"expected {expected} bytes for {count} triangles, found {len(data)}",
            min(len(data), expected),
        )
    records = np.frombuffer(data[84:], dtype=_RECORD)
    flat = records["vertices"].reshape(-1, 3).astype(np.float64)
    triangles = np.arange(len(flat), dtype=np.int64).reshape(-1, 3)
    return StentMesh(flat, triangles, tuple("stl" for _ in range(count)))

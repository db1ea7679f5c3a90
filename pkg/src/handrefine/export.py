"""Wavefront OBJ output for meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def format_obj(vertices, faces) -> str:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError(f"vertices must be V x 3, got {vertices.shape}")
    if faces.size and (faces.ndim != 2 or faces.shape[1] != 3):
        raise ValueError(f"faces must be F x 3, got {faces.shape}")
    if not np.all(np.isfinite(vertices)):
        raise ValueError("vertices contain non-finite values")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ValueError("face index out of range")
    # Adding 0.0 turns -0.0 into 0.0 so it prints without a sign.
    lines = ["v %.6f %.6f %.6f" % tuple(row + 0.0) for row in vertices]
    lines += ["f %d %d %d" % tuple(int(i) + 1 for i in face) for face in faces.reshape(-1, 3)]
    return "".join(line + "\n" for line in lines)


def write_obj(vertices, faces, path: str | Path) -> None:
    Path(path).write_bytes(format_obj(vertices, faces).encode("ascii"))


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and 0-based triangle faces; other records are ignored."""
    verts, faces = [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)

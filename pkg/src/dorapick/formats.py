"""ASCII PLY point-cloud serialization and the 16-bit PGM depth dump."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import PointCloud


def save_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY; color/normal properties appear only when present.

    Floats are written with repr so a save/load cycle is bit-exact.
    """
    has_col = cloud.colors is not None
    has_nrm = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += ["property double x", "property double y", "property double z"]
    if has_col:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if has_nrm:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")

    rows = []
    col8 = None
    if has_col:
        col8 = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.int64)
    for i in range(len(cloud)):
        p = cloud.positions[i]
        parts = [repr(p[0]), repr(p[1]), repr(p[2])]
        if has_col:
            parts += [str(col8[i, 0]), str(col8[i, 1]), str(col8[i, 2])]
        if has_nrm:
            n = cloud.normals[i]
            parts += [repr(n[0]), repr(n[1]), repr(n[2])]
        rows.append(" ".join(parts))
    Path(path).write_text("\n".join(header + rows) + "\n")


def load_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ascii PLY supported")
        elif tok[0] == "element":
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
            elif int(tok[2]) != 0:
                raise ValueError(f"{path}: unsupported element {tok[1]}")
        elif tok[0] == "property":
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if n_vertex is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    want_xyz = ["x", "y", "z"]
    if props[:3] != want_xyz:
        raise ValueError(f"{path}: vertex properties must start with x y z")
    has_col = "red" in props
    has_nrm = "nx" in props
    col_at = props.index("red") if has_col else None
    nrm_at = props.index("nx") if has_nrm else None

    pos = np.zeros((n_vertex, 3))
    col = np.zeros((n_vertex, 3)) if has_col else None
    nrm = np.zeros((n_vertex, 3)) if has_nrm else None
    rows = text[body_at:body_at + n_vertex]
    if len(rows) < n_vertex:
        raise ValueError(f"{path}: expected {n_vertex} vertex rows")
    for i, row in enumerate(rows):
        v = row.split()
        pos[i] = [float(v[0]), float(v[1]), float(v[2])]
        if has_col:
            col[i] = [int(v[col_at]) / 255.0, int(v[col_at + 1]) / 255.0,
                      int(v[col_at + 2]) / 255.0]
        if has_nrm:
            nrm[i] = [float(v[nrm_at]), float(v[nrm_at + 1]), float(v[nrm_at + 2])]
    valid = None
    if has_nrm:
        valid = np.linalg.norm(nrm, axis=1) > 0.5
    return PointCloud(pos, col, nrm, valid)


def save_depth_pgm(depth_m: np.ndarray, path) -> None:
    """16-bit binary PGM, depth in millimeters; invalid pixels are 0."""
    d = np.asarray(depth_m, dtype=np.float64)
    mm = np.where(np.isfinite(d), np.clip(d * 1000.0, 0, 65535), 0.0)
    img = np.rint(mm).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.tobytes())

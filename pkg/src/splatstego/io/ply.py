"""Gaussian scenes in the common 3DGS binary PLY layout.

Colors are written twice: as degree-0 SH coefficients ``f_dc_*`` for
third-party viewers and as exact ``color_*`` floats, which the loader
prefers so that round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

from ..scene import GaussianScene

SH_C0 = 0.28209479177387814

PROPS = (["x", "y", "z"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)] + ["opacity"]
         + [f"f_dc_{i}" for i in range(3)] + [f"color_{i}" for i in range(3)])
REQUIRED = PROPS[:14]

_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "uchar": "u1", "uint8": "u1",
          "char": "i1", "int8": "i1", "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
          "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


class PlyError(ValueError):
    pass


class MissingPropertyError(PlyError):
    def __init__(self, prop: str):
        super().__init__(f"PLY vertex element is missing property '{prop}'")
        self.property = prop


def save_ply(scene: GaussianScene, path) -> None:
    n = len(scene)
    cols = [scene.means, scene.log_scales, scene.quats, scene.opacity_logits[:, None],
            (scene.colors.astype(np.float64) - 0.5) / SH_C0, scene.colors]
    data = np.concatenate([np.asarray(c, dtype=np.float64).reshape(n, -1) for c in cols], axis=1)
    data = data.astype("<f4")
    bg = " ".join(repr(float(v)) for v in scene.background)
    header = ["ply", "format binary_little_endian 1.0", f"comment background {bg}", f"element vertex {n}"]
    header += [f"property float {p}" for p in PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    background = None
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("malformed header: no end_header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif key == "comment" and len(parts) == 5 and parts[1] == "background":
            background = [float(v) for v in parts[2:5]]
        elif key == "element":
            if len(parts) != 3:
                raise PlyError(f"malformed element line: {line!r}")
            elements.append([parts[1], int(parts[2]), []])
        elif key == "property":
            if not elements:
                raise PlyError("property before any element")
            if parts[1] == "list":
                raise PlyError("list properties are not supported")
            if len(parts) != 3 or parts[1] not in _TYPES:
                raise PlyError(f"unsupported property line: {line!r}")
            elements[-1][2].append((parts[2], _TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    return elements, background


def load_ply(path) -> GaussianScene:
    with open(path, "rb") as fh:
        elements, background = _parse_header(fh)
        body = fh.read()
    offset = 0
    vertex = None
    for name, count, props in elements:
        dt = np.dtype(props)
        size = dt.itemsize * count
        if offset + size > len(body):
            raise PlyError(f"truncated payload: element '{name}' needs {size} bytes, "
                           f"{len(body) - offset} available")
        if name == "vertex":
            vertex = np.frombuffer(body, dtype=dt, count=count, offset=offset)
        offset += size
    if vertex is None:
        raise PlyError("no vertex element")
    names = vertex.dtype.names or ()
    for p in REQUIRED:
        if p not in names:
            raise MissingPropertyError(p)

    def cols(keys):
        return np.stack([vertex[k].astype(np.float32) for k in keys], axis=1)

    if all(f"color_{i}" in names for i in range(3)):
        colors = cols([f"color_{i}" for i in range(3)])
    else:
        colors = np.clip(cols([f"f_dc_{i}" for i in range(3)]) * SH_C0 + 0.5, 0, 1).astype(np.float32)
    bg = np.asarray(background if background is not None else (1.0, 1.0, 1.0), dtype=np.float32)
    return GaussianScene(cols(["x", "y", "z"]), cols([f"scale_{i}" for i in range(3)]),
                         cols([f"rot_{i}" for i in range(4)]), vertex["opacity"].astype(np.float32),
                         colors, bg)

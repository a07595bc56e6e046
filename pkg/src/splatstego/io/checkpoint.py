"""Binary training checkpoints.

Layout (little-endian)::

    b"GSTG" | u32 version | u64 header_len | header (UTF-8 JSON) | tensor blobs

The JSON header holds metadata plus a tensor index of
``{key: [dtype, shape, offset, nbytes]}`` with offsets relative to the
start of the blob section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..camera import CameraRig
from ..optim import ParamGroup, ParamStore
from ..scene import FIELDS, GaussianScene

MAGIC = b"GSTG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    store: ParamStore
    rig: CameraRig
    config: dict
    base_scene: GaussianScene
    payload_kind: str
    payload: np.ndarray
    hidden_tokens: np.ndarray
    seed: int
    step: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def base_scene_ref(self) -> str:
        return self.base_scene.content_hash()


def _pack(arrays: dict):
    index, blobs, offset = {}, [], 0
    for key, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        index[key] = [a.dtype.str, list(a.shape), offset, len(raw)]
        blobs.append(raw)
        offset += len(raw)
    return index, b"".join(blobs)


def save_checkpoint(ck: Checkpoint, path) -> None:
    if ck.rig is None or not ck.rig.cameras:
        raise CheckpointError("checkpoint needs a camera rig with a checking camera")
    arrays = {}
    groups = []
    for name, g in ck.store.groups.items():
        arrays[f"param/{name}"] = g.param.data
        has_m = g.m is not None
        if has_m:
            arrays[f"m/{name}"] = g.m
            arrays[f"v/{name}"] = g.v
        if g.count is not None:
            arrays[f"count/{name}"] = g.count
        groups.append({"name": name, "role": g.role, "step": g.step, "moments": has_m, "count": g.count is not None})
    for name, b in ck.store.buffers.items():
        arrays[f"buffer/{name}"] = b
    for f in FIELDS:
        arrays[f"base/{f}"] = getattr(ck.base_scene, f)
    arrays["base/background"] = ck.base_scene.background
    arrays["payload"] = ck.payload
    arrays["hidden_tokens"] = ck.hidden_tokens
    index, blob = _pack(arrays)
    header = {
        "groups": groups,
        "buffers": sorted(ck.store.buffers),
        "rig": ck.rig.to_dict(),
        "config": ck.config,
        "base_scene_ref": ck.base_scene_ref,
        "payload_kind": ck.payload_kind,
        "seed": ck.seed,
        "step": ck.step,
        "rng_state": ck.rng_state,
        "extra": ck.extra,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < 4 or prefix[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated header")
        _, version, hlen = _PREFIX.unpack(prefix)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        head = fh.read(hlen)
        if len(head) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(head.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        blob = fh.read()

    def get(key):
        if key not in header["tensors"]:
            raise CheckpointError(f"{path}: missing tensor {key!r}")
        dt, shape, off, n = header["tensors"][key]
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {key!r}")
        return np.frombuffer(blob, dtype=np.dtype(dt), count=n // np.dtype(dt).itemsize,
                             offset=off).reshape(shape).copy()

    rig_d = header.get("rig")
    if not rig_d or not rig_d.get("cameras"):
        raise CheckpointError(f"{path}: checkpoint has no checking camera")
    store = ParamStore()
    for g in header["groups"]:
        t = store.add(g["name"], g["role"], get(f"param/{g['name']}"))
        grp: ParamGroup = store.groups[g["name"]]
        grp.step = int(g["step"])
        if g["moments"]:
            grp.m = get(f"m/{g['name']}")
            grp.v = get(f"v/{g['name']}")
        if g.get("count"):
            grp.count = get(f"count/{g['name']}")
        del t
    for name in header.get("buffers", []):
        store.buffers[name] = get(f"buffer/{name}")
    base = GaussianScene(*(get(f"base/{f}") for f in FIELDS), get("base/background"))
    if base.content_hash() != header["base_scene_ref"]:
        raise CheckpointError(f"{path}: base scene does not match its recorded hash")
    return Checkpoint(store, CameraRig.from_dict(rig_d), header["config"], base, header["payload_kind"],
                      get("payload"), get("hidden_tokens"), int(header["seed"]), int(header["step"]),
                      header.get("rng_state"), header.get("extra", {}))

"""Field snapshot files: one JSON header line, then raw little-endian
float32 arrays, x-fastest ordering, in the order declared by the header.
The header carries a CRC32 of the binary payload so readers can validate."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .grid import FlowState, GridSpec, PorosityField

FORMAT_NAME = "windfield-snapshot"
FORMAT_VERSION = 1

_FIELDS = ("u", "v", "w", "p", "k", "omega", "nu_t", "phi", "lad", "labels")


def _field_array(state: FlowState, name: str) -> np.ndarray:
    if name == "phi":
        return state.porosity.phi
    if name == "lad":
        return state.porosity.lad
    if name == "labels":
        return state.labels.astype(np.float64)
    return getattr(state, name)


def _pack(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype="<f4").ravel(order="F").tobytes()


def write_snapshot(path, state: FlowState) -> None:
    payload = b""
    fields = []
    for name in _FIELDS:
        arr = _field_array(state, name)
        fields.append({"name": name, "shape": list(arr.shape)})
        payload += _pack(arr)
    g = state.grid
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "grid": {"nx": g.nx, "ny": g.ny, "nz": g.nz,
                 "dx": g.dx, "dy": g.dy, "dz": g.dz, "origin": list(g.origin)},
        "time": state.time,
        "step": state.step_count,
        "dtype": "<f4",
        "order": "x-fastest",
        "fields": fields,
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(payload)


@dataclass
class Snapshot:
    grid: GridSpec
    time: float
    step: int
    arrays: dict


def read_snapshot(path) -> Snapshot:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {header.get('version')}")
    if zlib.crc32(payload) & 0xFFFFFFFF != header["crc32"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    gd = header["grid"]
    grid = GridSpec(gd["nx"], gd["ny"], gd["nz"], gd["dx"], gd["dy"], gd["dz"],
                    tuple(gd["origin"]))
    arrays = {}
    off = 0
    for f in header["fields"]:
        shape = tuple(f["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        arrays[f["name"]] = arr.reshape(shape, order="F")
        off += count * 4
    return Snapshot(grid=grid, time=header["time"], step=header["step"], arrays=arrays)


def snapshot_to_state(snap: Snapshot) -> FlowState:
    """Rebuild a (float64) FlowState from a snapshot."""
    a = {k: np.asarray(v, dtype=float) for k, v in snap.arrays.items()}
    porosity = PorosityField(a["phi"], a["lad"])
    state = FlowState(
        grid=snap.grid, u=a["u"], v=a["v"], w=a["w"], p=a["p"], k=a["k"],
        omega=a["omega"], nu_t=a["nu_t"],
        labels=snap.arrays["labels"].astype(np.int8),
        porosity=porosity, time=snap.time, step_count=snap.step,
    )
    return state

"""Flat binary snapshots of a potential field.

Layout (all little-endian)::

    b"MKRF1"                     magic
    uint32  version              currently 1
    uint32  n_complex
    uint32  points_per_axis
    float64 periods[2 n]
    float64 t
    uint8   flow_kind            0 = modified, 1 = canonical
    float64 u[N^(2n)]            row-major over x1, y1, ..., xn, yn
"""

import struct
from dataclasses import dataclass

import numpy as np

from .flow import FLOW_KINDS
from .torus import TorusGrid

MAGIC = b"MKRF1"
VERSION = 1


class SnapshotError(ValueError):
    pass


@dataclass
class Snapshot:
    grid: TorusGrid
    t: float
    flow_kind: str
    u: np.ndarray


def write_snapshot(path, grid, t, u, flow_kind="modified"):
    u = np.asarray(u, dtype="<f8")
    if u.shape != grid.shape:
        raise SnapshotError(f"u has shape {u.shape}, grid expects {grid.shape}")
    header = MAGIC + struct.pack("<III", VERSION, grid.n_complex, grid.points_per_axis)
    header += struct.pack(f"<{grid.ndim}d", *grid.periods)
    header += struct.pack("<dB", float(t), FLOW_KINDS.index(flow_kind))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(u).tobytes(order="C"))


def read_snapshot(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise SnapshotError(f"{path}: bad magic")
    pos = len(MAGIC)
    version, n, npts = struct.unpack_from("<III", data, pos)
    pos += 12
    if version != VERSION:
        raise SnapshotError(f"{path}: unsupported version {version}")
    periods = struct.unpack_from(f"<{2 * n}d", data, pos)
    pos += 16 * n
    t, kind = struct.unpack_from("<dB", data, pos)
    pos += 9
    grid = TorusGrid(n, npts, periods)
    payload = data[pos:]
    if len(payload) != 8 * grid.size:
        raise SnapshotError(f"{path}: payload has {len(payload)} bytes, expected {8 * grid.size}")
    if kind >= len(FLOW_KINDS):
        raise SnapshotError(f"{path}: unknown flow kind code {kind}")
    u = np.frombuffer(payload, dtype="<f8").reshape(grid.shape).astype(float)
    return Snapshot(grid, t, FLOW_KINDS[kind], u)

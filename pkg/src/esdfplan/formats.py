"""Bit-exact artifact formats.

NWTS network checkpoint (little-endian):
    magic "NWTS", u32 version=1, u32 layer_count, then per layer:
    u32 rows, u32 cols, u8 activation (0 relu, 1 identity, 2 sigmoid),
    rows*cols f64 weights row-major, rows f64 biases.
Backbone checkpoints append an extension: u32 num_frequencies,
u8 include_input. Head checkpoints append: u32 attachment depth,
u32 embed_dim, f64 r_fixed.

DGRD density grid (little-endian):
    magic "DGRD", u32 version=1, u32 nx, ny, nz, 6*f64 bounds
    (min xyz, max xyz), then nx*ny*nz f64 values x-fastest.

Plus tiny writers for binary PGM slice images and trajectory CSVs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import ACTIVATIONS, Layer, MlpNetwork, PositionalEncoding, validate_network
from .scenes import DensityGrid

NWTS_MAGIC = b"NWTS"
DGRD_MAGIC = b"DGRD"
_ACT_CODE = {"relu": 0, "identity": 1, "sigmoid": 2}


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def _read_f64(fh) -> float:
    return struct.unpack("<d", _read_exact(fh, 8))[0]


# ---------------------------------------------------------------------------
# NWTS
# ---------------------------------------------------------------------------

def _network_bytes(net: MlpNetwork) -> bytes:
    parts = [NWTS_MAGIC, struct.pack("<II", 1, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.rows, layer.cols, _ACT_CODE[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def _read_network(fh) -> MlpNetwork:
    if _read_exact(fh, 4) != NWTS_MAGIC:
        raise FormatError("bad magic, not an NWTS checkpoint")
    version = _read_u32(fh)
    if version != 1:
        raise FormatError(f"unsupported NWTS version {version}")
    layer_count = _read_u32(fh)
    layers = []
    for _ in range(layer_count):
        rows, cols = _read_u32(fh), _read_u32(fh)
        code = _read_exact(fh, 1)[0]
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}")
        w = np.frombuffer(_read_exact(fh, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(_read_exact(fh, 8 * rows), dtype="<f8")
        layers.append(Layer(weights=w.astype(float), bias=b.astype(float),
                            activation=ACTIVATIONS[code]))
    if not layers:
        raise FormatError("checkpoint holds no layers")
    net = MlpNetwork(layers=layers, input_dim=layers[0].cols)
    validate_network(net)
    return net


def _expect_eof(fh):
    if fh.read(1):
        raise FormatError("unexpected trailing bytes after checkpoint payload")


def save_network(path, net: MlpNetwork) -> None:
    Path(path).write_bytes(_network_bytes(net))


def load_network(path) -> MlpNetwork:
    with open(path, "rb") as fh:
        net = _read_network(fh)
        _expect_eof(fh)
    return net


def save_backbone_checkpoint(path, net: MlpNetwork, encoding: PositionalEncoding) -> None:
    ext = struct.pack("<IB", encoding.num_frequencies, 1 if encoding.include_input else 0)
    Path(path).write_bytes(_network_bytes(net) + ext)


def load_backbone_checkpoint(path) -> tuple[MlpNetwork, PositionalEncoding]:
    with open(path, "rb") as fh:
        net = _read_network(fh)
        num_freq = _read_u32(fh)
        include = _read_exact(fh, 1)[0]
        _expect_eof(fh)
    return net, PositionalEncoding(num_frequencies=num_freq, include_input=bool(include))


def save_head_checkpoint(path, layers: list[Layer], depth: int,
                         embed_dim: int, r_fixed: float) -> None:
    container = MlpNetwork(layers=list(layers), input_dim=layers[0].cols)
    # the container is storage only; the concat wiring lives in head code
    ext = struct.pack("<IId", depth, embed_dim, r_fixed)
    Path(path).write_bytes(_network_bytes(container) + ext)


def load_head_checkpoint(path) -> tuple[list[Layer], int, int, float]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != NWTS_MAGIC:
            raise FormatError("bad magic, not an NWTS checkpoint")
        if _read_u32(fh) != 1:
            raise FormatError("unsupported NWTS version")
        layer_count = _read_u32(fh)
        layers = []
        for _ in range(layer_count):
            rows, cols = _read_u32(fh), _read_u32(fh)
            code = _read_exact(fh, 1)[0]
            if code >= len(ACTIVATIONS):
                raise FormatError(f"unknown activation code {code}")
            w = np.frombuffer(_read_exact(fh, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(_read_exact(fh, 8 * rows), dtype="<f8")
            layers.append(Layer(weights=w.astype(float), bias=b.astype(float),
                                activation=ACTIVATIONS[code]))
        depth, embed_dim = _read_u32(fh), _read_u32(fh)
        r_fixed = _read_f64(fh)
        _expect_eof(fh)
    return layers, depth, embed_dim, r_fixed


# ---------------------------------------------------------------------------
# DGRD
# ---------------------------------------------------------------------------

def save_density_grid(path, grid: DensityGrid) -> None:
    lo, hi = grid.bounds
    header = DGRD_MAGIC + struct.pack("<IIII", 1, *grid.resolution)
    header += struct.pack("<6d", *lo, *hi)
    Path(path).write_bytes(header + np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_density_grid(path) -> DensityGrid:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != DGRD_MAGIC:
            raise FormatError("bad magic, not a DGRD grid")
        if _read_u32(fh) != 1:
            raise FormatError("unsupported DGRD version")
        nx, ny, nz = _read_u32(fh), _read_u32(fh), _read_u32(fh)
        bounds_raw = struct.unpack("<6d", _read_exact(fh, 48))
        values = np.frombuffer(_read_exact(fh, 8 * nx * ny * nz), dtype="<f8")
        _expect_eof(fh)
    return DensityGrid(resolution=(nx, ny, nz),
                       bounds=(np.array(bounds_raw[:3]), np.array(bounds_raw[3:])),
                       values=values.astype(float))


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D array, min-max scaled for display."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise FormatError("PGM image must be 2-D")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    scaled = np.zeros_like(img) if span <= 0 else (img - lo) / span
    data = np.round(scaled * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise FormatError("not a binary PGM")
        w, h = (int(t) for t in fh.readline().split())
        if int(fh.readline()) != 255:
            raise FormatError("expected maxval 255")
        data = np.frombuffer(_read_exact(fh, w * h), dtype=np.uint8)
    return data.reshape(h, w)


# ---------------------------------------------------------------------------
# Trajectory CSV
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = "step,t,x,y,z,vx,vy,vz,ax,ay,az,dist"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, trajectory) -> None:
    lines = [TRAJECTORY_HEADER]
    for rec in trajectory.records:
        cells = [str(rec.step), _fmt(rec.t)]
        cells += [_fmt(v) for v in rec.position]
        cells += [_fmt(v) for v in rec.velocity]
        cells += [_fmt(v) for v in rec.acceleration]
        cells.append(_fmt(rec.distance))
        lines.append(",".join(cells))
    lines.append(f"# reason={trajectory.reason}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_csv(path) -> tuple[np.ndarray, str]:
    """Load the numeric table and the termination reason back from disk."""
    lines = Path(path).read_text().strip().splitlines()
    if lines[0] != TRAJECTORY_HEADER:
        raise FormatError("unexpected trajectory header")
    reason = ""
    rows = []
    for line in lines[1:]:
        if line.startswith("# reason="):
            reason = line.split("=", 1)[1]
            continue
        rows.append([float(c) for c in line.split(",")])
    return np.asarray(rows), reason

"""Ground truth: analytic scenes, dense density grids, and the kd-tree
occupancy oracle that labels training samples.

Scenes are unions of spheres and axis-aligned boxes inside the normalized
cube [-1, 1]^3 with closed-form unsigned distance (0 inside geometry).
A density field sampled on a regular lattice of cell centers becomes an
:class:`OccupancyOracle` by thresholding: the oracle answers "is any
occupied cell center within radius r of q" exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, StructureError

RADIUS_RANGE = (0.005, 0.25)  # training radii are drawn uniformly from here


# ---------------------------------------------------------------------------
# Analytic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def distance(self, q: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(q - np.asarray(self.center), axis=-1) - self.radius
        return np.maximum(d, 0.0)

    def contains(self, q: np.ndarray) -> np.ndarray:
        return np.linalg.norm(q - np.asarray(self.center), axis=-1) <= self.radius

    def gradient(self, q: np.ndarray) -> np.ndarray:
        u = q - np.asarray(self.center)
        n = np.linalg.norm(u)
        if n < 1e-12:
            return np.zeros(3)
        return u / n


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def distance(self, q: np.ndarray) -> np.ndarray:
        e = np.abs(q - np.asarray(self.center)) - np.asarray(self.half_extents)
        return np.linalg.norm(np.maximum(e, 0.0), axis=-1)

    def contains(self, q: np.ndarray) -> np.ndarray:
        e = np.abs(q - np.asarray(self.center)) - np.asarray(self.half_extents)
        return np.all(e <= 0.0, axis=-1)

    def gradient(self, q: np.ndarray) -> np.ndarray:
        u = q - np.asarray(self.center)
        e = np.maximum(np.abs(u) - np.asarray(self.half_extents), 0.0)
        n = np.linalg.norm(e)
        if n < 1e-12:
            return np.zeros(3)
        return np.sign(u) * e / n


Primitive = Sphere | Box


@dataclass(frozen=True)
class AnalyticScene:
    """Union of primitives with exact unsigned distance."""

    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        if not self.primitives:
            raise DomainError("a scene needs at least one primitive")


def scene_distance(scene: AnalyticScene, q) -> np.ndarray:
    """Euclidean distance from q (a point or (n,3) batch) to the occupied set."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise DomainError("scene_distance: non-finite query")
    return np.minimum.reduce([p.distance(q) for p in scene.primitives])


def scene_contains(scene: AnalyticScene, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    out = scene.primitives[0].contains(q)
    for p in scene.primitives[1:]:
        out = out | p.contains(q)
    return out


def scene_distance_gradient(scene: AnalyticScene, q) -> np.ndarray:
    """Outward gradient of the union distance: the nearest primitive's normal.

    Zero inside geometry (the unsigned field is flat there).
    """
    q = np.asarray(q, dtype=float)
    dists = [float(p.distance(q)) for p in scene.primitives]
    nearest = scene.primitives[int(np.argmin(dists))]
    return nearest.gradient(q)


def indicator_density(scene: AnalyticScene, magnitude: float = 10.0):
    """Density field that is ``magnitude`` inside the scene and 0 outside."""

    def field(q: np.ndarray) -> np.ndarray:
        return np.where(scene_contains(scene, q), magnitude, 0.0)

    return field


def _sphere_surface(s: Sphere, n: int, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(s.center) + s.radius * dirs


def _box_surface(b: Box, n: int, rng: np.random.Generator) -> np.ndarray:
    h = np.asarray(b.half_extents)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])  # per axis pair
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    pts[np.arange(n), axis] = side * h[axis]
    return np.asarray(b.center) + pts


def sample_surface_points(scene: AnalyticScene, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Points on primitive surfaces, area-weighted across primitives."""
    areas = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            areas.append(4.0 * np.pi * p.radius ** 2)
        else:
            h = np.asarray(p.half_extents)
            areas.append(8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]))
    areas = np.asarray(areas)
    counts = rng.multinomial(n, areas / areas.sum())
    chunks = []
    for p, c in zip(scene.primitives, counts):
        if c == 0:
            continue
        if isinstance(p, Sphere):
            chunks.append(_sphere_surface(p, c, rng))
        else:
            chunks.append(_box_surface(p, c, rng))
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# Density grids
# ---------------------------------------------------------------------------

DEFAULT_BOUNDS = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


@dataclass
class DensityGrid:
    """Regular lattice of densities; values are stored x-fastest:
    ``idx = ix + nx * (iy + ny * iz)``."""

    resolution: tuple[int, int, int]
    bounds: tuple[np.ndarray, np.ndarray]
    values: np.ndarray  # flat, length nx*ny*nz

    def __post_init__(self):
        nx, ny, nz = self.resolution
        if self.values.shape != (nx * ny * nz,):
            raise StructureError(
                f"grid values have length {self.values.shape}, expected {nx * ny * nz}"
            )
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise DomainError("grid values must be finite and non-negative")

    @property
    def cell_size(self) -> np.ndarray:
        lo, hi = self.bounds
        return (hi - lo) / np.asarray(self.resolution, dtype=float)

    def axis_centers(self, axis: int) -> np.ndarray:
        lo, hi = self.bounds
        n = self.resolution[axis]
        step = (hi[axis] - lo[axis]) / n
        return lo[axis] + (np.arange(n) + 0.5) * step

    def cell_centers(self) -> np.ndarray:
        """All cell centers, (nx*ny*nz, 3), in storage order."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def value_at(self, q) -> np.ndarray:
        """Nearest-cell lookup (used as a pretraining target for imported grids)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        lo, _ = self.bounds
        idx3 = np.floor((q - lo) / self.cell_size).astype(int)
        idx3 = np.clip(idx3, 0, np.asarray(self.resolution) - 1)
        nx, ny, _ = self.resolution
        flat = idx3[:, 0] + nx * (idx3[:, 1] + ny * idx3[:, 2])
        return self.values[flat]


def planned_sample_count(resolution: tuple[int, int, int]) -> int:
    nx, ny, nz = resolution
    return nx * ny * nz


def sample_density_grid(field, resolution: tuple[int, int, int],
                        bounds=DEFAULT_BOUNDS, chunk: int = 1 << 18) -> DensityGrid:
    """Evaluate ``field`` at every cell center of the lattice.

    ``field`` maps an (n, 3) array to (n,) non-negative densities. Chunked so
    large lattices never materialize more than ``chunk`` query points at once.
    """
    if min(resolution) < 2:
        raise DomainError("resolution must be at least 2 per axis")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    grid = DensityGrid(resolution=tuple(resolution), bounds=(lo, hi),
                       values=np.zeros(planned_sample_count(resolution)))
    centers = grid.cell_centers()
    values = np.empty(centers.shape[0])
    for start in range(0, centers.shape[0], chunk):
        pts = centers[start:start + chunk]
        vals = np.asarray(field(pts), dtype=float)
        bad = ~np.isfinite(vals)
        if np.any(bad):
            where = pts[np.argmax(bad)]
            raise DomainError(f"density field non-finite at {where}")
        values[start:start + chunk] = vals
    grid.values = values
    return grid


# ---------------------------------------------------------------------------
# Occupancy oracle
# ---------------------------------------------------------------------------

class OccupancyOracle:
    """Immutable spatial index answering "occupied point within r of q".

    Exactness contract: ``query(q, r)`` is true iff the minimum Euclidean
    distance from q to the occupied point set is <= r. The kd-tree only
    selects the nearest point; the final comparison recomputes the distance
    with the same arithmetic a linear scan would use, so both routes agree
    bit-for-bit.
    """

    def __init__(self, occupied_points: np.ndarray, threshold: float):
        pts = np.asarray(occupied_points, dtype=float).reshape(-1, 3)
        self.occupied_points = pts
        self.threshold = float(threshold)
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self) -> int:
        return len(self.occupied_points)

    @property
    def empty(self) -> bool:
        return self._tree is None

    def query(self, q, r: float) -> bool:
        if r <= 0:
            raise DomainError(f"query radius must be positive, got {r}")
        if self._tree is None:
            return False
        _, idx = self._tree.query(np.asarray(q, dtype=float), k=1)
        delta = self.occupied_points[idx] - np.asarray(q, dtype=float)
        return bool(np.sqrt(np.sum(delta * delta)) <= r)

    def query_batch(self, qs: np.ndarray, rs: np.ndarray) -> np.ndarray:
        qs = np.asarray(qs, dtype=float)
        rs = np.asarray(rs, dtype=float)
        if np.any(rs <= 0):
            raise DomainError("query radii must be positive")
        if self._tree is None:
            return np.zeros(len(qs), dtype=bool)
        _, idx = self._tree.query(qs, k=1)
        delta = self.occupied_points[idx] - qs
        return np.sqrt(np.sum(delta * delta, axis=-1)) <= rs


def build_oracle(grid: DensityGrid, threshold: float) -> OccupancyOracle:
    """Index the centers of all cells with density strictly above ``threshold``."""
    if threshold < 0:
        raise DomainError("threshold must be non-negative")
    mask = grid.values > threshold
    points = grid.cell_centers()[mask]
    return OccupancyOracle(points, threshold)


def auto_threshold(grid: DensityGrid) -> float:
    """Half the grid maximum; suited to indicator-like synthetic fields."""
    return 0.5 * float(grid.values.max(initial=0.0))


def query_occupancy(oracle: OccupancyOracle, q, r: float) -> int:
    return int(oracle.query(q, r))


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSample:
    position: np.ndarray  # (3,), in [-1, 1]^3
    radius: float         # in RADIUS_RANGE
    label: int            # oracle.query(position, radius)


class SampleBatch:
    """Column-oriented sequence of :class:`TrainingSample`."""

    def __init__(self, positions: np.ndarray, radii: np.ndarray, labels: np.ndarray):
        self.positions = positions
        self.radii = radii
        self.labels = labels

    def __len__(self) -> int:
        return len(self.radii)

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.positions[i], float(self.radii[i]), int(self.labels[i]))


def generate_samples(oracle: OccupancyOracle, count: int,
                     rng: np.random.Generator) -> SampleBatch:
    """i.i.d. samples: positions ~ U(-1,1)^3, radii ~ U(0.005, 0.25),
    labels from the oracle. Deterministic given the generator state."""
    if count < 1:
        raise DomainError("sample count must be >= 1")
    positions = rng.uniform(-1.0, 1.0, size=(count, 3))
    radii = rng.uniform(RADIUS_RANGE[0], RADIUS_RANGE[1], size=count)
    labels = oracle.query_batch(positions, radii).astype(np.int64)
    return SampleBatch(positions, radii, labels)


# ---------------------------------------------------------------------------
# Ground-truth slices
# ---------------------------------------------------------------------------

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class SliceSpec:
    """A square lattice on an axis-aligned plane through the cube.

    ``values[row, col]`` corresponds to (u, v) = (grid[col], grid[row]) where
    (u, v) are the two free axes in x-y-z order and the fixed axis sits at
    ``offset``.
    """

    axis: str = "z"
    offset: float = 0.0
    resolution: int = 128

    def __post_init__(self):
        if self.axis not in AXES:
            raise DomainError(f"slice axis must be one of {sorted(AXES)}")
        if not -1.0 <= self.offset <= 1.0:
            raise DomainError("slice offset must lie in [-1, 1]")

    def lattice(self) -> np.ndarray:
        """All slice points as an (resolution^2, 3) array, row-major."""
        n = self.resolution
        g = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
        vv, uu = np.meshgrid(g, g, indexing="ij")
        pts = np.empty((n * n, 3))
        fixed = AXES[self.axis]
        free = [a for a in range(3) if a != fixed]
        pts[:, free[0]] = uu.ravel()
        pts[:, free[1]] = vv.ravel()
        pts[:, fixed] = self.offset
        return pts


def ground_truth_esdf_slice(scene: AnalyticScene, spec: SliceSpec) -> np.ndarray:
    """scene_distance on the slice lattice, shaped (resolution, resolution)."""
    pts = spec.lattice()
    return scene_distance(scene, pts).reshape(spec.resolution, spec.resolution)


# ---------------------------------------------------------------------------
# Standard scenes
# ---------------------------------------------------------------------------

def standard_scene(name: str) -> AnalyticScene:
    """Named scenes used by the experiments and the CLI presets.

    ``sphere_box``  - one sphere and one wall-like box; the default bench.
    ``twin_pillars`` - two box pillars with a central gap.
    ``sphere``      - a single centered sphere.
    """
    if name == "sphere_box":
        return AnalyticScene((
            Sphere(center=(-0.45, 0.0, 0.0), radius=0.38),
            Box(center=(0.5, 0.1, 0.0), half_extents=(0.28, 0.55, 0.38)),
        ))
    if name == "twin_pillars":
        return AnalyticScene((
            Box(center=(0.0, -0.62, 0.0), half_extents=(0.26, 0.42, 0.5)),
            Box(center=(0.0, 0.62, 0.0), half_extents=(0.26, 0.42, 0.5)),
        ))
    if name == "sphere":
        return AnalyticScene((Sphere(center=(0.0, 0.0, 0.0), radius=0.45),))
    raise DomainError(f"unknown scene preset {name!r}")

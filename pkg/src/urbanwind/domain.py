"""Grid data types and geometric derivations shared across the package.

Arrays are indexed ``[row, col]``. Column index maps to the metric x axis
(wind flows toward increasing x), row index maps to the metric y axis. Pixel
``(i, j)`` has its center at ``((j + 0.5) * dx, (i + 0.5) * dx)`` meters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    H: int
    W: int
    L: float

    def __post_init__(self):
        if self.H != self.W:
            raise ValueError(f"domain must be square, got {self.H}x{self.W}")
        if self.H < 2 or self.L <= 0:
            raise ValueError("grid needs H >= 2 and L > 0")

    @property
    def dx(self) -> float:
        return self.L / self.W

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) coordinates of pixel centers, each of shape (H, W)."""
        xs = (np.arange(self.W) + 0.5) * self.dx
        ys = (np.arange(self.H) + 0.5) * self.dx
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class SimConfig:
    u_in: float
    grid: GridSpec
    T: int = 112
    dt: float = 1.0
    u_max: float = 25.0

    def __post_init__(self):
        if self.u_in < 0:
            raise ValueError("u_in must be nonnegative")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.u_max <= 0 or self.u_max < self.u_in:
            raise ValueError(f"u_max={self.u_max} must be positive and >= u_in={self.u_in}")


class BuildingFootprint:
    """Binary occupancy grid (1 = building) and its fluid mask."""

    def __init__(self, occupancy: np.ndarray, validate: bool = True):
        occ = np.asarray(occupancy)
        if occ.ndim != 2:
            raise ValueError("occupancy must be 2-D")
        if not np.all((occ == 0) | (occ == 1)):
            raise ValueError("occupancy must be binary")
        occ = occ.astype(np.uint8)
        if validate:
            if not (occ[:, 0] == 0).any():
                raise ValueError("inlet column has no fluid pixel")
            if not (occ[:, -1] == 0).any():
                raise ValueError("outlet column has no fluid pixel")
        occ.setflags(write=False)
        self.occupancy = occ
        fluid = (1 - occ).astype(np.uint8)
        fluid.setflags(write=False)
        self.fluid_mask = fluid

    @classmethod
    def empty(cls, H: int, W: int | None = None) -> "BuildingFootprint":
        return cls(np.zeros((H, W or H), dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def rotated(self, k: int) -> "BuildingFootprint":
        return BuildingFootprint(np.rot90(self.occupancy, k), validate=False)


@dataclass(frozen=True)
class DistanceField:
    d: np.ndarray


@dataclass(frozen=True)
class WallNormals:
    n: np.ndarray  # (H, W, 2) as (n_x, n_y); zero outside the band
    wall_band: np.ndarray  # (H, W) uint8


@dataclass
class VelocityField:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "VelocityField":
        return cls(np.zeros(shape), np.zeros(shape))

    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def copy(self) -> "VelocityField":
        return VelocityField(self.u.copy(), self.v.copy())


@dataclass
class FlowSequence:
    frames: list[VelocityField]
    conditioning: VelocityField
    config: SimConfig
    occupancy: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.frames) != self.config.T:
            raise ValueError(f"expected {self.config.T} frames, got {len(self.frames)}")

    @property
    def T(self) -> int:
        return len(self.frames)

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (u, v) as arrays of shape (T, H, W)."""
        u = np.stack([f.u for f in self.frames])
        v = np.stack([f.v for f in self.frames])
        return u, v

    @classmethod
    def from_arrays(cls, u: np.ndarray, v: np.ndarray, config: SimConfig,
                    occupancy: np.ndarray | None = None) -> "FlowSequence":
        frames = [VelocityField(np.array(u[t], dtype=float), np.array(v[t], dtype=float))
                  for t in range(u.shape[0])]
        cond = conditioning_frame(occupancy, config) if occupancy is not None \
            else VelocityField.zeros(u.shape[1:])
        return cls(frames, cond, config, occupancy)


def conditioning_frame(occupancy: np.ndarray, cfg: SimConfig) -> VelocityField:
    """Frame t=0: u_in on fluid pixels, zero inside buildings, v = 0."""
    fluid = 1.0 - np.asarray(occupancy, dtype=float)
    return VelocityField(cfg.u_in * fluid, np.zeros_like(fluid))


# ---------------------------------------------------------------------------
# distance transform


def _edt_1d(f: np.ndarray) -> np.ndarray:
    # lower envelope of parabolas (Felzenszwalb & Huttenlocher)
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    # skip leading infinite samples; they never form part of the envelope
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        d[:] = np.inf
        return d
    v[0] = finite[0]
    z[0] = -np.inf
    z[1] = np.inf
    for q in finite[1:]:
        fq = f[q] + q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) ** 2 + f[p]
    return d


def squared_edt(occupancy: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest occupied pixel."""
    occ = np.asarray(occupancy, dtype=bool)
    f = np.where(occ, 0.0, np.inf)
    g = np.empty_like(f)
    for j in range(f.shape[1]):
        g[:, j] = _edt_1d(f[:, j])
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        out[i, :] = _edt_1d(g[i, :])
    return out


def distance_sentinel(shape: tuple[int, int]) -> float:
    """Distance reported when no building exists; exceeds the grid diagonal."""
    return float(shape[0] + shape[1])


def derive_distance_field(footprint: BuildingFootprint) -> DistanceField:
    """Pixel-unit Euclidean distance from each pixel to the nearest building pixel.

    An all-fluid footprint yields ``distance_sentinel(shape)`` everywhere.
    """
    occ = footprint.occupancy
    if not occ.any():
        d = np.full(occ.shape, distance_sentinel(occ.shape))
    else:
        d = np.sqrt(squared_edt(occ))
    d.setflags(write=False)
    return DistanceField(d)


# ---------------------------------------------------------------------------
# wall normals


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1, mode="edge")
    H, W = a.shape
    out = np.zeros_like(a, dtype=float)
    for di in range(3):
        for dj in range(3):
            out += p[di:di + H, dj:dj + W]
    return out / 9.0


def _gradient(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # central difference along one axis, [1, 2, 1] weighting across it
    p = np.pad(s, 1, mode="edge")
    H, W = s.shape
    dxc = (p[:, 2:] - p[:, :-2]) / 2.0
    dyc = (p[2:, :] - p[:-2, :]) / 2.0
    gx = (dxc[:-2, :] + 2 * dxc[1:-1, :] + dxc[2:, :]) / 4.0
    gy = (dyc[:, :-2] + 2 * dyc[:, 1:-1] + dyc[:, 2:]) / 4.0
    assert gx.shape == (H, W) and gy.shape == (H, W)
    return gx, gy


def _dilate8(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask.astype(bool), 1, mode="constant")
    H, W = mask.shape
    out = np.zeros((H, W), dtype=bool)
    for di in range(3):
        for dj in range(3):
            out |= p[di:di + H, dj:dj + W]
    return out


def derive_wall_normals(footprint: BuildingFootprint) -> WallNormals:
    """Outward unit normals on the wall band.

    The band holds fluid pixels 8-adjacent to a building plus one further
    8-connected dilation ring. Pixels whose smoothed-occupancy gradient
    vanishes are dropped from the band.
    """
    occ = footprint.occupancy.astype(bool)
    fluid = ~occ
    ring1 = _dilate8(occ) & fluid
    band = (_dilate8(ring1) | ring1) & fluid

    gx, gy = _gradient(_box3(occ.astype(float)))
    nx, ny = -gx, -gy
    norm = np.hypot(nx, ny)
    band &= norm > 1e-12
    n = np.zeros(occ.shape + (2,))
    safe = np.where(band, norm, 1.0)
    n[..., 0] = np.where(band, nx / safe, 0.0)
    n[..., 1] = np.where(band, ny / safe, 0.0)
    n.setflags(write=False)
    band = band.astype(np.uint8)
    band.setflags(write=False)
    return WallNormals(n=n, wall_band=band)

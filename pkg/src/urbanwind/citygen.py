"""Procedural city layouts: rectangular blocks rejection-sampled in a circle."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .domain import BuildingFootprint, GridSpec, SimConfig

# 52 blocks on a 500 m diameter city
DEFAULT_DENSITY = 52.0 / (math.pi * 250.0 ** 2)
DIAMETERS = (300, 400, 500, 600, 700, 800)
U_IN_RANGE = (0.1, 20.0)


@dataclass(frozen=True)
class CityGenConfig:
    seed: int = 0
    city_diameter: float | None = None  # None: sample from DIAMETERS
    buffer: float = 300.0
    block_size_range: tuple[float, float] = (10.0, 50.0)
    min_alley: float = 10.0
    density: float = DEFAULT_DENSITY
    wind_direction: float | None = None  # degrees; None: sample in [0, 360)
    attempts_per_block: int = 200
    grid_size: int = 256
    T: int = 112
    dt: float = 1.0
    u_max: float = 25.0

    def __post_init__(self):
        lo, hi = self.block_size_range
        if not 0 < lo <= hi:
            raise ValueError("invalid block_size_range")
        if self.density < 0 or self.buffer < 0 or self.min_alley < 0:
            raise ValueError("density, buffer and min_alley must be nonnegative")


@dataclass
class BlockSet:
    """Rectangles as centers (N, 2), half-extents (N, 2), rotations (N,) in radians.

    ``L`` is the side of the square domain the coordinates live in.
    """

    centers: np.ndarray
    half_extents: np.ndarray
    rotations: np.ndarray
    L: float
    incomplete: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(-1, 2)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1)
        n = len(self.centers)
        if len(self.half_extents) != n or len(self.rotations) != n:
            raise ValueError("centers, half_extents and rotations disagree in length")

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls, L: float) -> "BlockSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), L)

    def corners(self) -> np.ndarray:
        """Corner coordinates, shape (N, 4, 2)."""
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        local = signs[None, :, :] * self.half_extents[:, None, :]
        c, s = np.cos(self.rotations), np.sin(self.rotations)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (N, 2, 2)
        return self.centers[:, None, :] + np.einsum("nij,nkj->nki", rot, local)


def rect_gap(c1, h1, c2, h2) -> float:
    """Euclidean gap between two axis-aligned rectangles (0 if they overlap)."""
    gx = max(abs(c1[0] - c2[0]) - (h1[0] + h2[0]), 0.0)
    gy = max(abs(c1[1] - c2[1]) - (h1[1] + h2[1]), 0.0)
    return math.hypot(gx, gy)


def domain_side(cfg: CityGenConfig, diameter: float) -> float:
    return diameter + 2.0 * cfg.buffer


def generate_layout(cfg: CityGenConfig) -> tuple[BlockSet, SimConfig]:
    """Sample axis-aligned blocks inside the circular city region.

    Blocks are placed one at a time; each gets at most ``attempts_per_block``
    tries. If a block cannot be placed the blocks so far are returned with
    ``incomplete=True`` and a warning. Wind direction is recorded in
    ``meta`` but not applied; see :func:`canonicalize_direction`.
    """
    rng = np.random.default_rng(cfg.seed)
    diameter = float(cfg.city_diameter) if cfg.city_diameter is not None \
        else float(rng.choice(DIAMETERS))
    u_in = float(rng.uniform(*U_IN_RANGE))
    direction = float(cfg.wind_direction) if cfg.wind_direction is not None \
        else float(rng.uniform(0.0, 360.0))
    L = domain_side(cfg, diameter)
    r = diameter / 2.0
    center = np.array([L / 2.0, L / 2.0])
    target = int(round(cfg.density * math.pi * r * r))
    lo, hi = cfg.block_size_range

    centers: list[np.ndarray] = []
    halves: list[np.ndarray] = []
    incomplete = False
    for _ in range(target):
        placed = False
        for _ in range(cfg.attempts_per_block):
            half = rng.uniform(lo, hi, size=2) / 2.0
            c = center + rng.uniform(-r, r, size=2)
            # farthest corner from the city center must lie within the circle
            far = np.abs(c - center) + half
            if far @ far > r * r:
                continue
            if any(rect_gap(c, half, c2, h2) < cfg.min_alley for c2, h2 in zip(centers, halves)):
                continue
            centers.append(c)
            halves.append(half)
            placed = True
            break
        if not placed:
            incomplete = True
            warnings.warn(f"placed {len(centers)} of {target} blocks (seed {cfg.seed})")
            break

    blocks = BlockSet(np.array(centers).reshape(-1, 2), np.array(halves).reshape(-1, 2),
                      np.zeros(len(centers)), L, incomplete=incomplete,
                      meta={"seed": int(cfg.seed), "diameter": diameter,
                            "wind_direction": direction})
    sim = SimConfig(u_in=u_in, grid=GridSpec(cfg.grid_size, cfg.grid_size, L),
                    T=cfg.T, dt=cfg.dt, u_max=cfg.u_max)
    return blocks, sim


def canonicalize_direction(blocks: BlockSet, wind_direction: float) -> BlockSet:
    """Rotate the layout about the domain center by -wind_direction degrees."""
    theta = -math.radians(wind_direction)
    c, s = math.cos(theta), math.sin(theta)
    mid = np.array([blocks.L / 2.0, blocks.L / 2.0])
    rel = blocks.centers - mid
    rot = rel @ np.array([[c, s], [-s, c]])
    meta = dict(blocks.meta, wind_direction=0.0)
    return replace(blocks, centers=mid + rot, rotations=blocks.rotations + theta, meta=meta)


def point_in_blocks(x: np.ndarray, y: np.ndarray, blocks: BlockSet) -> np.ndarray:
    inside = np.zeros(np.shape(x), dtype=bool)
    for (cx, cy), (hx, hy), rot in zip(blocks.centers, blocks.half_extents, blocks.rotations):
        c, s = math.cos(rot), math.sin(rot)
        dx, dy = x - cx, y - cy
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        inside |= (np.abs(lx) <= hx) & (np.abs(ly) <= hy)
    return inside


def rasterize_hard(blocks: BlockSet, grid: GridSpec) -> BuildingFootprint:
    """Pixel is occupied iff its center lies inside some block.

    Inlet and outlet columns are forced to fluid; a layout covering an entire
    inlet or outlet column is rejected with ValueError.
    """
    x, y = grid.pixel_centers()
    occ = point_in_blocks(x, y, blocks)
    if occ[:, 0].all() or occ[:, -1].all():
        raise ValueError("blocks cover an entire inlet/outlet column")
    occ[:, 0] = False
    occ[:, -1] = False
    return BuildingFootprint(occ.astype(np.uint8))


# ---------------------------------------------------------------------------
# layout JSON: {seed, L, u_in, blocks: [{cx, cy, ax, ay, rot}]}, ax/ay are half-extents


def layout_to_dict(blocks: BlockSet, sim: SimConfig | None = None) -> dict:
    out = {
        "seed": blocks.meta.get("seed"),
        "L": float(blocks.L),
        "u_in": None if sim is None else float(sim.u_in),
        "blocks": [
            {"cx": float(c[0]), "cy": float(c[1]), "ax": float(h[0]), "ay": float(h[1]),
             "rot": float(r)}
            for c, h, r in zip(blocks.centers, blocks.half_extents, blocks.rotations)
        ],
    }
    for key in ("diameter", "wind_direction"):
        if key in blocks.meta:
            out[key] = blocks.meta[key]
    if blocks.incomplete:
        out["incomplete"] = True
    return out


def layout_from_dict(d: dict) -> BlockSet:
    try:
        rows = d["blocks"]
        L = float(d["L"])
        centers = [[b["cx"], b["cy"]] for b in rows]
        halves = [[b["ax"], b["ay"]] for b in rows]
        rots = [b.get("rot", 0.0) for b in rows]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed layout: {exc!r}") from exc
    meta = {k: d[k] for k in ("seed", "diameter", "wind_direction") if k in d}
    return BlockSet(np.array(centers, dtype=float).reshape(-1, 2),
                    np.array(halves, dtype=float).reshape(-1, 2),
                    np.array(rots, dtype=float), L, meta=meta)


def save_layout(path, blocks: BlockSet, sim: SimConfig | None = None) -> None:
    Path(path).write_text(json.dumps(layout_to_dict(blocks, sim), indent=2, sort_keys=True) + "\n")


def load_layout(path) -> tuple[BlockSet, dict]:
    d = json.loads(Path(path).read_text())
    return layout_from_dict(d), d

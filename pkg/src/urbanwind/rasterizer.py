"""Soft rasterization of parametric block layouts with analytic center gradients.

Each block contributes an occupancy equal to the product of four edge
sigmoids evaluated in its local (rotated) frame; blocks combine through the
soft union ``B = 1 - prod(1 - o_i)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .citygen import BlockSet
from .domain import GridSpec

DEFAULT_TAU = 2.0
# o_i < sigmoid(-20) ~ 2e-9 outside the culling box
CULL_MARGIN_TAUS = 20.0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass
class LayoutParams:
    """Continuous layout parameters.

    In morph mode each trainable parent block is replaced by ``S*S`` sub-blocks
    of size (a/S, b/S); ``parent`` maps every (sub-)block to its original
    building index.
    """

    centers: np.ndarray
    half_extents: np.ndarray
    rotations: np.ndarray
    trainable: np.ndarray
    parent: np.ndarray
    mode: str = "rigid"
    S: int = 1
    L: float = 1.0
    initial_centers: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(-1, 2)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1)
        self.trainable = np.asarray(self.trainable, dtype=bool).reshape(-1)
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        if self.initial_centers is None:
            self.initial_centers = self.centers.copy()
        if self.mode not in ("rigid", "morph"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_blocks(cls, blocks: BlockSet, trainable=None, mode: str = "rigid",
                    S: int = 2) -> "LayoutParams":
        n = len(blocks)
        train = np.zeros(n, dtype=bool) if trainable is None else np.asarray(trainable, bool)
        if train.shape != (n,):
            raise ValueError("trainable flags must match block count")
        if mode == "rigid":
            return cls(blocks.centers.copy(), blocks.half_extents.copy(), blocks.rotations.copy(),
                       train.copy(), np.arange(n), "rigid", 1, blocks.L)
        centers, halves, rots, flags, parents = [], [], [], [], []
        offsets = (np.arange(S) + 0.5) / S - 0.5  # fractions of the full side
        for i in range(n):
            c, h, r = blocks.centers[i], blocks.half_extents[i], blocks.rotations[i]
            if not train[i]:
                centers.append(c); halves.append(h); rots.append(r)
                flags.append(False); parents.append(i)
                continue
            cr, sr = math.cos(r), math.sin(r)
            for oy in offsets:
                for ox in offsets:
                    local = np.array([ox * 2 * h[0], oy * 2 * h[1]])
                    world = np.array([cr * local[0] - sr * local[1], sr * local[0] + cr * local[1]])
                    centers.append(c + world); halves.append(h / S); rots.append(r)
                    flags.append(True); parents.append(i)
        return cls(np.array(centers), np.array(halves), np.array(rots), np.array(flags),
                   np.array(parents), "morph", S, blocks.L)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def n_train_buildings(self) -> int:
        return int(np.unique(self.parent[self.trainable]).size)

    def theta(self) -> np.ndarray:
        """Flat vector of trainable center coordinates."""
        return self.centers[self.trainable].ravel().copy()

    def with_theta(self, theta: np.ndarray) -> "LayoutParams":
        centers = self.centers.copy()
        centers[self.trainable] = np.asarray(theta, dtype=float).reshape(-1, 2)
        return LayoutParams(centers, self.half_extents, self.rotations, self.trainable,
                            self.parent, self.mode, self.S, self.L, self.initial_centers)

    def to_blocks(self) -> BlockSet:
        return BlockSet(self.centers.copy(), self.half_extents.copy(), self.rotations.copy(), self.L)


@dataclass
class SoftOccupancy:
    B: np.ndarray
    per_block: list  # (row slice, col slice, o_i window) per block


def _block_window(c, h, rot, grid: GridSpec, margin: float):
    # pixel index box of the rotated rectangle's bounding box plus margin
    cr, sr = abs(math.cos(rot)), abs(math.sin(rot))
    ex = cr * h[0] + sr * h[1] + margin
    ey = sr * h[0] + cr * h[1] + margin
    dx = grid.dx
    j0 = max(int(math.floor((c[0] - ex) / dx - 0.5)), 0)
    j1 = min(int(math.ceil((c[0] + ex) / dx - 0.5)) + 1, grid.W)
    i0 = max(int(math.floor((c[1] - ey) / dx - 0.5)), 0)
    i1 = min(int(math.ceil((c[1] + ey) / dx - 0.5)) + 1, grid.H)
    return slice(i0, max(i1, i0)), slice(j0, max(j1, j0))


def _block_terms(c, h, rot, grid: GridSpec, tau: float, rows: slice, cols: slice):
    xs = (np.arange(cols.start, cols.stop) + 0.5) * grid.dx
    ys = (np.arange(rows.start, rows.stop) + 0.5) * grid.dx
    X, Y = np.meshgrid(xs, ys)
    cr, sr = math.cos(rot), math.sin(rot)
    dxw, dyw = X - c[0], Y - c[1]
    lx = cr * dxw + sr * dyw
    ly = -sr * dxw + cr * dyw
    s1 = sigmoid((lx + h[0]) / tau)
    s2 = sigmoid((h[0] - lx) / tau)
    s3 = sigmoid((ly + h[1]) / tau)
    s4 = sigmoid((h[1] - ly) / tau)
    return (s1, s2, s3, s4), (cr, sr)


def rasterize_soft(params: LayoutParams, grid: GridSpec, tau: float = DEFAULT_TAU,
                   cull: bool = True) -> SoftOccupancy:
    """Product-of-sigmoids occupancy at pixel centers, soft-unioned over blocks."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    margin = CULL_MARGIN_TAUS * tau if cull else 2.0 * grid.L
    empty = np.ones(grid.shape)
    per_block = []
    for c, h, r in zip(params.centers, params.half_extents, params.rotations):
        rows, cols = _block_window(c, h, r, grid, margin)
        (s1, s2, s3, s4), _ = _block_terms(c, h, r, grid, tau, rows, cols)
        o = s1 * s2 * s3 * s4
        empty[rows, cols] *= 1.0 - o
        per_block.append((rows, cols, o))
    return SoftOccupancy(B=1.0 - empty, per_block=per_block)


def binarize_straight_through(soft: SoftOccupancy | np.ndarray) -> np.ndarray:
    """Forward value ``B > 0.5``.

    Sensitivities with respect to the binary mask are to be routed unchanged to
    the soft field (identity Jacobian), i.e. pass them to
    :func:`rasterize_gradient` as-is.
    """
    B = soft.B if isinstance(soft, SoftOccupancy) else np.asarray(soft)
    return (B > 0.5).astype(np.uint8)


def rasterize_gradient(params: LayoutParams, grid: GridSpec, tau: float,
                       upstream: np.ndarray, cull: bool = True) -> np.ndarray:
    """Gradient of ``sum(upstream * B)`` w.r.t. trainable centers.

    Returned as a flat vector ordered like :meth:`LayoutParams.theta`.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != grid.shape:
        raise ValueError("upstream shape does not match grid")
    margin = CULL_MARGIN_TAUS * tau if cull else 2.0 * grid.L
    n = len(params)
    windows, occ = [], []
    for c, h, r in zip(params.centers, params.half_extents, params.rotations):
        rows, cols = _block_window(c, h, r, grid, margin)
        windows.append((rows, cols))
        terms, _ = _block_terms(c, h, r, grid, tau, rows, cols)
        occ.append(terms)

    # prod_{j != i} (1 - o_j) via prefix/suffix products over full grids
    prefix = [np.ones(grid.shape)]
    for (rows, cols), t in zip(windows, occ):
        nxt = prefix[-1].copy()
        nxt[rows, cols] *= 1.0 - t[0] * t[1] * t[2] * t[3]
        prefix.append(nxt)
    suffix = np.ones(grid.shape)
    grads = np.zeros((n, 2))
    for i in range(n - 1, -1, -1):
        rows, cols = windows[i]
        s1, s2, s3, s4 = occ[i]
        if params.trainable[i]:
            others = prefix[i][rows, cols] * suffix[rows, cols]
            w = upstream[rows, cols] * others  # dB/do_i = prod_{j != i}(1 - o_j)
            o = s1 * s2 * s3 * s4
            # d/dlx and d/dly of o via sigma' = sigma (1 - sigma)
            do_dlx = o * ((1 - s1) - (1 - s2)) / tau
            do_dly = o * ((1 - s3) - (1 - s4)) / tau
            r = params.rotations[i]
            cr, sr = math.cos(r), math.sin(r)
            # lx = cr*(x-cx) + sr*(y-cy), ly = -sr*(x-cx) + cr*(y-cy)
            do_dcx = -(cr * do_dlx - sr * do_dly)
            do_dcy = -(sr * do_dlx + cr * do_dly)
            grads[i, 0] = np.sum(w * do_dcx)
            grads[i, 1] = np.sum(w * do_dcy)
        suffix[rows, cols] *= 1.0 - s1 * s2 * s3 * s4
    return grads[params.trainable].ravel()

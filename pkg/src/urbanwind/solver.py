"""Time-resolved 2-D incompressible Euler solver over building occupancy.

Each substep performs semi-Lagrangian advection, implicit Brinkman drag
(soft mode), a pressure projection and boundary conditions. Divergence is the
forward-difference stencil ``u[i, j+1] - u[i, j] + v[i+1, j] - v[i, j]`` used
by :mod:`urbanwind.physloss`; the projection removes it exactly (to solver
precision).

The projection is a weighted least-squares problem: find the field closest to
the advected one that satisfies every linear constraint. Constraints are zero
divergence on each constrained cell and, in hard mode, zero normal velocity on
the wall band. Fixed values (inflow, free-slip walls, solids) enter as known
terms. The constraint Gram matrix depends only on geometry, so it is factorized
once per simulation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import (BuildingFootprint, FlowSequence, SimConfig, VelocityField,
                     conditioning_frame, derive_wall_normals)

log = logging.getLogger(__name__)


class SolverError(FloatingPointError):
    """Raised when the velocity field becomes non-finite."""


@dataclass(frozen=True)
class SolverParams:
    projection_iters: int = 200
    projection_tol: float = 1e-5
    cfl_limit: float = 0.9
    brinkman_eps: float = 1e-3
    occupancy_mode: str = "hard"
    projection: str = "direct"  # or "cg"

    def __post_init__(self):
        if self.projection_iters < 1:
            raise ValueError("projection_iters must be >= 1")
        if not 0 < self.cfl_limit <= 1:
            raise ValueError("cfl_limit must lie in (0, 1]")
        if self.brinkman_eps <= 0:
            raise ValueError("brinkman_eps must be positive")
        if self.occupancy_mode not in ("hard", "soft"):
            raise ValueError(f"unknown occupancy_mode {self.occupancy_mode!r}")
        if self.projection not in ("direct", "cg"):
            raise ValueError(f"unknown projection {self.projection!r}")


def divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Forward-difference divergence in pixel units, shape (..., H-1, W-1)."""
    return (u[..., :-1, 1:] - u[..., :-1, :-1]) + (v[..., 1:, :-1] - v[..., :-1, :-1])


def valid_stencil_mask(fluid: np.ndarray) -> np.ndarray:
    """True where all four corners of the divergence stencil are fluid, shape (H-1, W-1)."""
    f = np.asarray(fluid).astype(bool)
    return f[:-1, :-1] & f[:-1, 1:] & f[1:, :-1] & f[1:, 1:]


def init_state(footprint, cfg: SimConfig) -> VelocityField:
    """Uniform inflow on fluid, zero inside buildings."""
    occ = footprint.occupancy if isinstance(footprint, BuildingFootprint) else np.asarray(footprint)
    fluid = 1.0 - np.asarray(occ, dtype=float)
    return VelocityField(cfg.u_in * fluid, np.zeros(fluid.shape))


def _bilinear(f: np.ndarray, yi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    H, W = f.shape
    xj = np.clip(xj, 0.0, W - 1.0)
    yi = np.clip(yi, 0.0, H - 1.0)
    j0 = np.minimum(np.floor(xj).astype(np.int64), W - 2)
    i0 = np.minimum(np.floor(yi).astype(np.int64), H - 2)
    tx = xj - j0
    ty = yi - i0
    top = f[i0, j0] * (1 - tx) + f[i0, j0 + 1] * tx
    bot = f[i0 + 1, j0] * (1 - tx) + f[i0 + 1, j0 + 1] * tx
    return top * (1 - ty) + bot * ty


def advect(u: np.ndarray, v: np.ndarray, dt: float, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Semi-Lagrangian backtrace with bilinear interpolation, clamped at the edges."""
    H, W = u.shape
    ii, jj = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    yb = ii - dt * v / dx
    xb = jj - dt * u / dx
    return _bilinear(u, yb, xb), _bilinear(v, yb, xb)


class Projector:
    """Factorized constrained projection for one geometry and substep length."""

    def __init__(self, occupancy: np.ndarray, u_in: float, params: SolverParams,
                 beta: np.ndarray | None = None, normals=None):
        occ = np.asarray(occupancy, dtype=float)
        H, W = occ.shape
        N = H * W
        self.shape = (H, W)
        self.params = params
        idx = np.arange(N).reshape(H, W)
        hard = params.occupancy_mode == "hard"
        solid = occ > 0.5 if hard else np.zeros((H, W), dtype=bool)

        # fixed components: inflow column, free-slip rows, solids (hard only)
        fixed_u = np.zeros((H, W), dtype=bool)
        fixed_v = np.zeros((H, W), dtype=bool)
        val_u = np.zeros((H, W))
        fixed_u[:, 0] = True
        val_u[:, 0] = u_in
        fixed_v[:, 0] = True
        fixed_v[0, :] = True
        fixed_v[-1, :] = True
        fixed_u |= solid
        fixed_v |= solid
        val_u[solid] = 0.0
        self.fixed = np.concatenate([fixed_u.ravel(), fixed_v.ravel()])
        self.fixed_values = np.concatenate([val_u.ravel(), np.zeros(N)])

        # divergence rows
        cells = np.ones((H - 1, W - 1), dtype=bool)
        if hard:
            cells &= ~solid[:-1, :-1]
        ci, cj = np.nonzero(cells)
        nr = ci.size
        r = np.arange(nr)
        rows = np.concatenate([r, r, r, r])
        cols = np.concatenate([idx[ci, cj + 1], idx[ci, cj], N + idx[ci + 1, cj], N + idx[ci, cj]])
        vals = np.concatenate([np.ones(nr), -np.ones(nr), np.ones(nr), -np.ones(nr)])
        blocks = [sp.csr_matrix((vals, (rows, cols)), shape=(nr, 2 * N))]

        # no-penetration rows on the wall band
        if hard and normals is not None:
            bi, bj = np.nonzero(normals.wall_band)
            nb = bi.size
            if nb:
                rb = np.arange(nb)
                nvec = normals.n[bi, bj]
                blocks.append(sp.csr_matrix(
                    (np.concatenate([nvec[:, 0], nvec[:, 1]]),
                     (np.concatenate([rb, rb]), np.concatenate([idx[bi, bj], N + idx[bi, bj]]))),
                    shape=(nb, 2 * N)))
        C = sp.vstack(blocks).tocsc()
        free = ~self.fixed
        C_fr = C[:, free]
        keep = np.diff(C_fr.tocsr().indptr) > 0
        C = C[keep.nonzero()[0], :] if not keep.all() else C
        self.C = C.tocsr()
        self.C_fr = C[:, free].tocsr()
        self.free = free

        b = np.ones(2 * N) if beta is None else np.concatenate([beta.ravel(), beta.ravel()])
        self.beta_fr = b[free]
        M = (self.C_fr @ sp.diags(self.beta_fr) @ self.C_fr.T).tocsc()
        diag = M.diagonal()
        self.reg = 1e-10 * float(diag.mean()) if diag.size else 0.0
        self.M = (M + self.reg * sp.identity(M.shape[0], format="csc")).tocsc()
        self._lu = spla.splu(self.M) if params.projection == "direct" and M.shape[0] else None

    def apply_fixed(self, w: np.ndarray) -> np.ndarray:
        w = w.copy()
        w[self.fixed] = self.fixed_values[self.fixed]
        return w

    def project(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        H, W = self.shape
        w = self.apply_fixed(np.concatenate([u.ravel(), v.ravel()]))
        if self.M.shape[0] == 0:
            return w[:H * W].reshape(H, W), w[H * W:].reshape(H, W)
        res = self.C @ w
        if self._lu is not None:
            lam = self._lu.solve(res)
        else:
            scale = max(float(np.abs(res).max()), 1e-300)
            lam, info = spla.cg(self.M, res / scale, rtol=self.params.projection_tol,
                                maxiter=self.params.projection_iters)
            lam *= scale
            if info < 0:
                raise SolverError("CG breakdown in pressure projection")
        w[self.free] -= self.beta_fr * (self.C_fr.T @ lam)
        return w[:H * W].reshape(H, W), w[H * W:].reshape(H, W)


class Simulation:
    """Stateful stepping over a fixed geometry; caches projector factorizations."""

    def __init__(self, occupancy, cfg: SimConfig, params: SolverParams | None = None):
        self.params = params or SolverParams()
        if isinstance(occupancy, BuildingFootprint):
            self.footprint = occupancy
            occ = occupancy.occupancy.astype(float)
        else:
            occ = np.asarray(occupancy, dtype=float)
            if self.params.occupancy_mode == "hard":
                if not np.all((occ == 0) | (occ == 1)):
                    raise ValueError("hard mode needs a binary occupancy grid")
                self.footprint = BuildingFootprint(occ.astype(np.uint8), validate=False)
            else:
                self.footprint = None
        if occ.shape != cfg.grid.shape:
            raise ValueError(f"occupancy shape {occ.shape} does not match grid {cfg.grid.shape}")
        if occ.min() < 0 or occ.max() > 1:
            raise ValueError("occupancy must lie in [0, 1]")
        self.occ = occ
        self.cfg = cfg
        self.hard = self.params.occupancy_mode == "hard"
        self.normals = derive_wall_normals(self.footprint) if self.hard else None
        self._projectors: dict[int, Projector] = {}

    def projector(self, n_sub: int) -> Projector:
        proj = self._projectors.get(n_sub)
        if proj is None:
            beta = None
            if not self.hard:
                beta = self.drag_factor(self.cfg.dt / n_sub)
            proj = Projector(self.occ, self.cfg.u_in, self.params, beta=beta, normals=self.normals)
            self._projectors[n_sub] = proj
        return proj

    def drag_factor(self, dt_sub: float) -> np.ndarray:
        return 1.0 / (1.0 + dt_sub * self.occ / self.params.brinkman_eps)

    def substeps(self, state: VelocityField) -> int:
        vmax = max(float(np.max(state.speed())), self.cfg.u_in)
        courant = vmax * self.cfg.dt / self.cfg.grid.dx
        return max(1, int(math.ceil(courant / self.params.cfl_limit - 1e-12)))

    def step(self, state: VelocityField) -> VelocityField:
        n_sub = self.substeps(state)
        dt_sub = self.cfg.dt / n_sub
        proj = self.projector(n_sub)
        u, v = state.u, state.v
        for _ in range(n_sub):
            u, v = advect(u, v, dt_sub, self.cfg.grid.dx)
            # zero-gradient outflow and free-slip tangential condition
            u[:, -1] = u[:, -2]
            v[:, -1] = v[:, -2]
            u[0, :] = u[1, :]
            u[-1, :] = u[-2, :]
            if not self.hard:
                beta = self.drag_factor(dt_sub)
                u = u * beta
                v = v * beta
            u, v = proj.project(u, v)
            if not (np.isfinite(u).all() and np.isfinite(v).all()):
                raise SolverError(f"non-finite velocity (substeps={n_sub}, dt_sub={dt_sub:.4g} s)")
        return VelocityField(u, v)


def step(state: VelocityField, occupancy, cfg: SimConfig,
         params: SolverParams | None = None) -> VelocityField:
    """Advance one frame of ``cfg.dt`` seconds."""
    return Simulation(occupancy, cfg, params).step(state)


def simulate(occupancy, cfg: SimConfig, params: SolverParams | None = None) -> FlowSequence:
    """Run ``cfg.T`` frames from the uniform inflow state."""
    sim = Simulation(occupancy, cfg, params)
    state = init_state(sim.occ if not sim.hard else sim.footprint, cfg)
    frames = []
    for t in range(cfg.T):
        try:
            state = sim.step(state)
        except SolverError as exc:
            raise SolverError(f"frame {t + 1}: {exc}") from exc
        frames.append(state)
    mask = (sim.occ > 0.5).astype(np.uint8)
    return FlowSequence(frames, conditioning_frame(mask, cfg), cfg, mask)

"""Inverse design of building layouts against a pedestrian wind comfort objective.

Pipeline per objective evaluation: soft rasterization of the layout, rotation
so the inlet sits on the left edge, Brinkman-penalized simulation, and the
sigmoid-smoothed comfort loss inside the objective region. Flow gradients are
central finite differences over trainable center coordinates; regularizer
gradients are analytic.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import BuildingFootprint, FlowSequence, GridSpec, SimConfig
from .rasterizer import (DEFAULT_TAU, LayoutParams, binarize_straight_through,
                         rasterize_soft, sigmoid)
from .solver import SolverError, SolverParams, simulate

log = logging.getLogger(__name__)

# number of counter-clockwise quarter turns bringing each inlet edge to the left
# (rows run along +y, so the "top" edge is the last row)
DIRECTION_TURNS = {"left": 0, "bottom": 1, "right": 2, "top": 3}
ZONE_EDGES = (1.0, 3.0, 5.0, 15.0)


@dataclass(frozen=True)
class InletSpec:
    direction: str = "left"
    u_in: float = 15.0
    theta_d: float = 15.0
    theta_c: float = 5.0
    theta_s: float = 1.0

    def __post_init__(self):
        if self.direction not in DIRECTION_TURNS:
            raise ValueError(f"unknown inlet direction {self.direction!r}")
        if not self.theta_s < self.theta_c < self.theta_d:
            raise ValueError("thresholds must satisfy theta_s < theta_c < theta_d")

    @property
    def turns(self) -> int:
        return DIRECTION_TURNS[self.direction]


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 200
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_move: float = 1e-4
    lambda_coh: float = 0.1
    cohesion_hinge: float = 5.0
    danger_weight: float = 10.0
    fd_step: float | None = None  # meters; None: one pixel pitch
    grad_mode: str = "finite_difference"
    tau: float = DEFAULT_TAU
    T: int = 28
    dt: float = 1.0
    u_max: float = 25.0
    jobs: int = 1
    verify_gt: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if min(self.lr, self.lambda_move, self.lambda_coh, self.danger_weight) < 0:
            raise ValueError("weights must be nonnegative")
        if self.grad_mode not in ("finite_difference", "provided"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass(frozen=True)
class ComfortTerms:
    total: float
    e_danger: float
    e_comfort: float
    e_stag: float


def _speeds(seq) -> np.ndarray:
    if isinstance(seq, FlowSequence):
        u, v = seq.stack()
        return np.hypot(u, v)
    return np.asarray(seq, dtype=float)


def comfort_loss(seq, omega: np.ndarray, inlet: InletSpec = InletSpec(),
                 danger_weight: float = 10.0) -> ComfortTerms:
    """Sigmoid-smoothed exceedance fractions over (time, region pixel) entries.

    ``seq`` is a FlowSequence or a (T, H, W) array of speeds.
    """
    speed = _speeds(seq)
    mask = np.asarray(omega).astype(bool)
    if not mask.any():
        raise ValueError("objective region is empty")
    s = speed[:, mask]
    e_d = float(np.mean(sigmoid(s - inlet.theta_d)))
    e_c = float(np.mean(sigmoid(s - inlet.theta_c)))
    e_s = float(np.mean(sigmoid(inlet.theta_s - s)))
    return ComfortTerms(danger_weight * e_d + e_c + e_s, e_d, e_c, e_s)


def zone_fractions(seq, omega: np.ndarray, edges=ZONE_EDGES) -> np.ndarray:
    """Fraction of (time, region pixel) speeds in each bin delimited by ``edges``."""
    s = _speeds(seq)[:, np.asarray(omega).astype(bool)].ravel()
    bins = np.concatenate([[-np.inf], edges, [np.inf]])
    counts, _ = np.histogram(s, bins=bins)
    return counts / s.size


def exceedance(seq, omega: np.ndarray) -> dict[str, float]:
    s = _speeds(seq)[:, np.asarray(omega).astype(bool)]
    return {"gt15": float(np.mean(s > 15.0)), "gt5": float(np.mean(s > 5.0)),
            "lt1": float(np.mean(s < 1.0))}


# ---------------------------------------------------------------------------
# regularizers


def _train_groups(params: LayoutParams) -> list[np.ndarray]:
    idx = np.flatnonzero(params.trainable)
    parents = params.parent[idx]
    return [idx[parents == p] for p in np.unique(parents)]


def move_penalty(params: LayoutParams) -> float:
    """Mean squared displacement of trainable buildings (parent-mean in morph mode)."""
    groups = _train_groups(params)
    if not groups:
        return 0.0
    disp = params.centers - params.initial_centers
    return float(sum(np.sum(disp[g].mean(axis=0) ** 2) for g in groups) / len(groups))


def move_penalty_grad(params: LayoutParams) -> np.ndarray:
    groups = _train_groups(params)
    g = np.zeros_like(params.centers)
    disp = params.centers - params.initial_centers
    for grp in groups:
        g[grp] = 2.0 * disp[grp].mean(axis=0) / (len(grp) * len(groups))
    return g[params.trainable].ravel()


def cohesion_penalty(params: LayoutParams, hinge: float = 5.0) -> float:
    """Hinged spread of sub-block displacements around their parent mean (morph only)."""
    if params.mode != "morph":
        return 0.0
    groups = _train_groups(params)
    if not groups:
        return 0.0
    disp = params.centers - params.initial_centers
    total = 0.0
    for grp in groups:
        dev = disp[grp] - disp[grp].mean(axis=0)
        excess = np.maximum(np.linalg.norm(dev, axis=1) - hinge, 0.0)
        total += np.sum(excess ** 2) / len(grp)
    return float(total / len(groups))


def cohesion_penalty_grad(params: LayoutParams, hinge: float = 5.0) -> np.ndarray:
    g = np.zeros_like(params.centers)
    if params.mode == "morph":
        groups = _train_groups(params)
        disp = params.centers - params.initial_centers
        for grp in groups:
            dev = disp[grp] - disp[grp].mean(axis=0)
            r = np.linalg.norm(dev, axis=1)
            excess = np.maximum(r - hinge, 0.0)
            unit = np.where(r[:, None] > 0, dev / np.where(r > 0, r, 1.0)[:, None], 0.0)
            a = 2.0 * excess[:, None] * unit
            g[grp] = (a - a.mean(axis=0)) / (len(grp) * len(groups))
    return g[params.trainable].ravel()


# ---------------------------------------------------------------------------
# objective


@dataclass
class FlowObjective:
    """Mean comfort loss over inlets as a function of the trainable coordinates.

    Picklable, so finite-difference evaluations can run in worker processes.
    """

    params: LayoutParams
    grid: GridSpec
    inlets: list[InletSpec]
    omega: np.ndarray
    optim: OptimConfig = field(default_factory=OptimConfig)
    solver: SolverParams = field(default_factory=lambda: SolverParams(occupancy_mode="soft"))

    def sim_config(self, inlet: InletSpec) -> SimConfig:
        o = self.optim
        return SimConfig(u_in=inlet.u_in, grid=self.grid, T=o.T, dt=o.dt,
                         u_max=max(o.u_max, inlet.u_in))

    def evaluate(self, theta: np.ndarray) -> tuple[float, list[ComfortTerms]]:
        soft = rasterize_soft(self.params.with_theta(theta), self.grid, self.optim.tau).B
        return self._flow_loss(soft, self.solver)

    def evaluate_ground_truth(self, theta: np.ndarray) -> tuple[float, list[ComfortTerms]]:
        """Comfort loss on a hard-mask simulation of the binarized layout."""
        soft = rasterize_soft(self.params.with_theta(theta), self.grid, self.optim.tau)
        mask = binarize_straight_through(soft)
        mask[:, 0] = 0
        mask[:, -1] = 0
        return self._flow_loss(mask, replace(self.solver, occupancy_mode="hard"))

    def _flow_loss(self, occupancy: np.ndarray, solver: SolverParams):
        terms = []
        for k, inlet in enumerate(self.inlets):
            occ = np.rot90(occupancy, inlet.turns)
            om = np.rot90(self.omega, inlet.turns)
            try:
                seq = simulate(np.ascontiguousarray(occ, dtype=float), self.sim_config(inlet), solver)
            except SolverError as exc:
                raise SolverError(f"inlet {k} ({inlet.direction}): {exc}") from exc
            terms.append(comfort_loss(seq, om, inlet, self.optim.danger_weight))
        return float(np.mean([t.total for t in terms])), terms

    def simulate_inlets(self, theta: np.ndarray, hard: bool = True) -> list[FlowSequence]:
        """Flow sequences per inlet, returned in the inlet's rotated frame."""
        soft = rasterize_soft(self.params.with_theta(theta), self.grid, self.optim.tau)
        occ = binarize_straight_through(soft).astype(float) if hard else soft.B
        if hard:
            occ[:, 0] = 0
            occ[:, -1] = 0
        solver = replace(self.solver, occupancy_mode="hard" if hard else "soft")
        return [simulate(np.ascontiguousarray(np.rot90(occ, i.turns)), self.sim_config(i), solver)
                for i in self.inlets]

    def __call__(self, theta: np.ndarray) -> float:
        return self.evaluate(theta)[0]


def total_objective(params: LayoutParams, inlets: list[InletSpec], omega: np.ndarray,
                    grid: GridSpec, optim: OptimConfig = OptimConfig(),
                    solver: SolverParams | None = None) -> tuple[float, dict]:
    """Flow loss averaged over inlets plus weighted regularizers, with breakdown."""
    obj = FlowObjective(params, grid, list(inlets), omega, optim,
                        solver or SolverParams(occupancy_mode="soft"))
    flow, terms = obj.evaluate(params.theta())
    r_move = move_penalty(params)
    r_coh = cohesion_penalty(params, optim.cohesion_hinge)
    total = flow + optim.lambda_move * r_move + optim.lambda_coh * r_coh
    return total, {"flow": flow, "per_inlet": terms, "R_move": r_move, "R_coh": r_coh}


def _call(args):
    fn, theta = args
    return fn(theta)


def fd_gradient(objective, theta: np.ndarray, fd_step: float, jobs: int = 1) -> np.ndarray:
    """Central differences of ``objective`` over every coordinate of ``theta``.

    Values are assembled by coordinate index, so the result does not depend on
    the number of workers.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    theta = np.asarray(theta, dtype=float)
    points = []
    for i in range(theta.size):
        for sgn in (1.0, -1.0):
            t = theta.copy()
            t[i] += sgn * fd_step
            points.append(t)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            values = list(ex.map(_call, [(objective, p) for p in points]))
    else:
        values = [objective(p) for p in points]
    values = np.asarray(values, dtype=float).reshape(-1, 2)
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        raise SolverError(f"non-finite objective at coordinate {int(np.flatnonzero(bad)[0])}")
    return (values[:, 0] - values[:, 1]) / (2.0 * fd_step)


class Adam:
    """Adam with bias correction over a flat parameter vector."""

    def __init__(self, size: int, lr=1.0, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: Adam | None, cfg: OptimConfig):
    """Functional wrapper: returns (new theta, optimizer state)."""
    if state is None:
        state = Adam(theta.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return state.step(theta, grad), state


@dataclass
class StepRecord:
    step: int
    theta: np.ndarray
    total: float
    flow: float
    e_danger: float
    e_comfort: float
    e_stag: float
    R_move: float
    R_coh: float
    gt_total: float | None
    per_inlet: list[ComfortTerms]
    gt_per_inlet: list[ComfortTerms] | None = None

    def row(self) -> dict:
        k = len(self.per_inlet)
        return {
            "step": self.step, "total": self.total,
            "e_danger": self.e_danger, "e_comfort": self.e_comfort, "e_stag": self.e_stag,
            "R_move": self.R_move, "R_coh": self.R_coh,
            "gt_total": float("nan") if self.gt_total is None else self.gt_total,
            "flow": self.flow, "n_inlets": k,
        }


@dataclass
class Trajectory:
    records: list[StepRecord]
    objective: FlowObjective
    error: str | None = None

    def params_at(self, i: int = -1) -> LayoutParams:
        return self.objective.params.with_theta(self.records[i].theta)


def optimize(initial: LayoutParams, inlets: list[InletSpec], omega: np.ndarray, grid: GridSpec,
             optim: OptimConfig = OptimConfig(), solver: SolverParams | None = None,
             gradient_fn=None, callback=None) -> Trajectory:
    """Run ``optim.steps`` Adam steps; records an evaluation at every iterate.

    ``gradient_fn(objective, theta) -> flow gradient`` replaces finite
    differences when ``optim.grad_mode == "provided"``. A solver failure ends
    the run; the trajectory up to that point is kept with ``error`` set.
    """
    solver = solver or SolverParams(occupancy_mode="soft")
    omega = np.asarray(omega).astype(np.uint8)
    if not omega.any():
        raise ValueError("objective region is empty")
    obj = FlowObjective(initial, grid, list(inlets), omega, optim, solver)
    h = optim.fd_step if optim.fd_step is not None else grid.dx
    if optim.grad_mode == "provided" and gradient_fn is None:
        raise ValueError("grad_mode 'provided' needs gradient_fn")
    theta = initial.theta()
    adam = Adam(theta.size, optim.lr, optim.beta1, optim.beta2, optim.adam_eps)
    records: list[StepRecord] = []
    for k in range(optim.steps + 1):
        try:
            rec = _evaluate_record(obj, theta, k)
            records.append(rec)
            if callback is not None:
                callback(rec)
            log.info("step %d total %.6f flow %.6f gt %s", k, rec.total, rec.flow, rec.gt_total)
            if k == optim.steps:
                break
            if optim.grad_mode == "provided":
                g_flow = np.asarray(gradient_fn(obj, theta), dtype=float)
            else:
                g_flow = fd_gradient(obj, theta, h, optim.jobs)
            p = initial.with_theta(theta)
            grad = (g_flow + optim.lambda_move * move_penalty_grad(p)
                    + optim.lambda_coh * cohesion_penalty_grad(p, optim.cohesion_hinge))
            theta = adam.step(theta, grad)
        except SolverError as exc:
            log.error("optimization stopped at step %d: %s", k, exc)
            return Trajectory(records, obj, error=str(exc))
    return Trajectory(records, obj)


def _evaluate_record(obj: FlowObjective, theta: np.ndarray, k: int) -> StepRecord:
    p = obj.params.with_theta(theta)
    flow, terms = obj.evaluate(theta)
    r_move = move_penalty(p)
    r_coh = cohesion_penalty(p, obj.optim.cohesion_hinge)
    total = flow + obj.optim.lambda_move * r_move + obj.optim.lambda_coh * r_coh
    gt_total, gt_terms = (None, None)
    if obj.optim.verify_gt:
        gt_total, gt_terms = obj.evaluate_ground_truth(theta)
    return StepRecord(
        step=k, theta=theta.copy(), total=total, flow=flow,
        e_danger=float(np.mean([t.e_danger for t in terms])),
        e_comfort=float(np.mean([t.e_comfort for t in terms])),
        e_stag=float(np.mean([t.e_stag for t in terms])),
        R_move=r_move, R_coh=r_coh, gt_total=gt_total, per_inlet=terms, gt_per_inlet=gt_terms)


def select_trainable(centers: np.ndarray, omega: np.ndarray, grid: GridSpec, n: int = 15) -> np.ndarray:
    """Flags for the ``n`` blocks whose centers are nearest the objective region."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    x, y = grid.pixel_centers()
    m = np.asarray(omega).astype(bool)
    pts = np.stack([x[m], y[m]], axis=1)
    if pts.size == 0:
        raise ValueError("objective region is empty")
    d = np.array([np.min(np.hypot(*(pts - c).T)) for c in centers]) if len(centers) else np.zeros(0)
    order = np.argsort(d, kind="stable")[:n]
    flags = np.zeros(len(centers), dtype=bool)
    flags[order] = True
    return flags


def region_from_boxes(grid: GridSpec, boxes_m) -> np.ndarray:
    """Mask of pixels whose centers fall in any (x0, y0, x1, y1) box in meters."""
    x, y = grid.pixel_centers()
    m = np.zeros(grid.shape, dtype=bool)
    for x0, y0, x1, y1 in boxes_m:
        m |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return m.astype(np.uint8)


def check_region(omega: np.ndarray, footprint: BuildingFootprint) -> None:
    om = np.asarray(omega).astype(bool)
    if not om.any():
        raise ValueError("objective region is empty")
    if (om & footprint.occupancy.astype(bool)).any():
        raise ValueError("objective region overlaps buildings at the initial layout")


def histogram_rows(seqs_before, seqs_after, omega, inlets) -> list[dict]:
    labels = ["<1", "1-3", "3-5", "5-15", ">15"]
    rows = []
    for inlet, sb, sa in zip(inlets, seqs_before, seqs_after):
        om = np.rot90(omega, inlet.turns)
        fb, fa = zone_fractions(sb, om), zone_fractions(sa, om)
        for lab, b, a in zip(labels, fb, fa):
            rows.append({"inlet": inlet.direction, "bin": lab,
                         "initial_pct": round(100 * b, 6), "final_pct": round(100 * a, 6)})
    return rows

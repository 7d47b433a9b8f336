"""Physics-informed losses for predicted velocity sequences.

All differences are in pixel units. Frames are 0-indexed; the divergence and
wall terms use frames ``t >= warmup_frames``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .domain import (BuildingFootprint, FlowSequence, WallNormals,
                     derive_distance_field, derive_wall_normals)
from .solver import divergence, valid_stencil_mask


@dataclass(frozen=True)
class PhysLossConfig:
    lambda_div: float = 10.0
    lambda_wall: float = 10.0
    alpha: float = 2.0
    sigma: float = 20.0
    warmup_frames: int = 10

    def __post_init__(self):
        if min(self.lambda_div, self.lambda_wall, self.alpha, self.warmup_frames) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def _arrays(seq) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(seq, FlowSequence):
        return seq.stack()
    u, v = seq
    return np.asarray(u, dtype=float), np.asarray(v, dtype=float)


def wall_weights(footprint: BuildingFootprint, cfg: PhysLossConfig = PhysLossConfig()) -> np.ndarray:
    """omega(p) = F(p) * (1 + alpha * exp(-d^2 / (2 sigma^2)))."""
    d = derive_distance_field(footprint).d
    return footprint.fluid_mask * (1.0 + cfg.alpha * np.exp(-d ** 2 / (2.0 * cfg.sigma ** 2)))


def distance_weighted_mse(pred, gt, footprint: BuildingFootprint,
                          cfg: PhysLossConfig = PhysLossConfig()) -> float:
    pu, pv = _arrays(pred)
    gu, gv = _arrays(gt)
    if pu.shape != gu.shape or pv.shape != gv.shape:
        raise ValueError(f"shape mismatch: {pu.shape} vs {gu.shape}")
    w = wall_weights(footprint, cfg)
    err = (pu - gu) ** 2 + (pv - gv) ** 2
    T = pu.shape[0]
    return float(np.sum(w * err) / (T * np.sum(w)))


def divergence_loss(pred, footprint: BuildingFootprint,
                    cfg: PhysLossConfig = PhysLossConfig()) -> float:
    u, v = _arrays(pred)
    valid = valid_stencil_mask(footprint.fluid_mask)
    if not valid.any():
        warnings.warn("no valid divergence stencils; divergence loss set to 0")
        return 0.0
    late = slice(cfg.warmup_frames, None)
    D = divergence(u[late], v[late])
    if D.shape[0] == 0:
        return 0.0
    return float(np.mean(D[:, valid] ** 2))


def wall_penetration_loss(pred, footprint: BuildingFootprint, normals: WallNormals | None = None,
                          cfg: PhysLossConfig = PhysLossConfig()) -> float:
    u, v = _arrays(pred)
    normals = normals or derive_wall_normals(footprint)
    band = normals.wall_band.astype(bool)
    if not band.any():
        warnings.warn("empty wall band; wall loss set to 0")
        return 0.0
    late = slice(cfg.warmup_frames, None)
    n = normals.n[band]
    wn = u[late][:, band] * n[:, 0] + v[late][:, band] * n[:, 1]
    if wn.shape[0] == 0:
        return 0.0
    return float(np.mean(wn ** 2))


def total_physics_loss(pred, gt, footprint: BuildingFootprint,
                       cfg: PhysLossConfig = PhysLossConfig()) -> tuple[float, dict[str, float]]:
    """Weighted sum data + lambda_div * div + lambda_wall * wall, with the breakdown."""
    data = distance_weighted_mse(pred, gt, footprint, cfg)
    div = divergence_loss(pred, footprint, cfg)
    wall = wall_penetration_loss(pred, footprint, cfg=cfg)
    total = data + cfg.lambda_div * div + cfg.lambda_wall * wall
    return total, {"data": data, "div": div, "wall": wall, "total": total}

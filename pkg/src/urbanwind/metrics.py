"""Evaluation metrics on fluid pixels: VRMSE, MAE/MRE, spectral divergence, W1."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .domain import BuildingFootprint, FlowSequence

VAR_EPS = 1e-12
SPECTRAL_EPS = 1e-10
CONSTANT_GT_SENTINEL = float("inf")


@dataclass(frozen=True)
class MetricReport:
    vrmse: float
    mae: float
    mre: float
    spectral: float
    w1: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _fluid_samples(seq, footprint: BuildingFootprint) -> tuple[np.ndarray, np.ndarray]:
    u, v = seq.stack() if isinstance(seq, FlowSequence) else (np.asarray(seq[0], float),
                                                              np.asarray(seq[1], float))
    fluid = footprint.fluid_mask.astype(bool)
    return u[:, fluid], v[:, fluid]  # (T, P)


def _pair(pred, gt, footprint):
    pu, pv = _fluid_samples(pred, footprint)
    gu, gv = _fluid_samples(gt, footprint)
    if pu.shape != gu.shape:
        raise ValueError(f"shape mismatch: {pu.shape} vs {gu.shape}")
    return pu, pv, gu, gv


def vrmse(pred, gt, footprint: BuildingFootprint) -> float:
    """RMSE normalized by the variance of gt pooled over time, pixels and components."""
    pu, pv, gu, gv = _pair(pred, gt, footprint)
    g = np.concatenate([gu.ravel(), gv.ravel()])
    p = np.concatenate([pu.ravel(), pv.ravel()])
    var = np.var(g)
    if var == 0.0:
        warnings.warn("ground truth is constant on the fluid support; VRMSE undefined")
        return CONSTANT_GT_SENTINEL
    return float(np.sqrt(np.mean((p - g) ** 2) / (var + VAR_EPS)))


def mae_mre(pred, gt, footprint: BuildingFootprint) -> tuple[float, float]:
    """Component-pooled MAE (m/s) and MRE (%) relative to mean |component| of gt."""
    pu, pv, gu, gv = _pair(pred, gt, footprint)
    err = np.concatenate([np.abs(pu - gu).ravel(), np.abs(pv - gv).ravel()])
    ref = np.concatenate([np.abs(gu).ravel(), np.abs(gv).ravel()])
    mae = float(err.mean())
    denom = float(ref.mean())
    mre = 100.0 * mae / denom if denom > 0 else (0.0 if mae == 0 else float("inf"))
    return mae, mre


def _log_power(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0, keepdims=True)
    P = np.abs(np.fft.rfft(x, axis=0)) ** 2
    return np.log(P[1:] + SPECTRAL_EPS)  # drop the zero frequency


def spectral_divergence(pred, gt, footprint: BuildingFootprint) -> float:
    """Mean squared log-power difference over pixels, components and nonzero frequencies."""
    pu, pv, gu, gv = _pair(pred, gt, footprint)
    if pu.shape[0] < 4:
        raise ValueError("spectral divergence needs T >= 4")
    du = (_log_power(pu) - _log_power(gu)) ** 2
    dv = (_log_power(pv) - _log_power(gv)) ** 2
    return float(np.mean(np.concatenate([du.ravel(), dv.ravel()])))


def wasserstein1(pred, gt, footprint: BuildingFootprint) -> float:
    """Per-pixel W1 between the T-sample speed distributions, averaged over pixels."""
    pu, pv, gu, gv = _pair(pred, gt, footprint)
    sp = np.sort(np.hypot(pu, pv), axis=0)
    sg = np.sort(np.hypot(gu, gv), axis=0)
    return float(np.mean(np.abs(sp - sg)))


def metric_report(pred, gt, footprint: BuildingFootprint) -> MetricReport:
    mae, mre = mae_mre(pred, gt, footprint)
    return MetricReport(vrmse=vrmse(pred, gt, footprint), mae=mae, mre=mre,
                        spectral=spectral_divergence(pred, gt, footprint),
                        w1=wasserstein1(pred, gt, footprint))

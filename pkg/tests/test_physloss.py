import math

import numpy as np
import pytest

from conftest import random_footprint
from urbanwind.domain import BuildingFootprint, derive_distance_field, derive_wall_normals
from urbanwind.physloss import (PhysLossConfig, distance_weighted_mse, divergence_loss,
                                total_physics_loss, wall_penetration_loss, wall_weights)

NO_WARMUP = PhysLossConfig(warmup_frames=0)


def ref_mse(pu, pv, gu, gv, occ, cfg):
    T, H, W = pu.shape
    d = derive_distance_field(BuildingFootprint(occ, validate=False)).d
    num = den = 0.0
    for i in range(H):
        for j in range(W):
            if occ[i, j]:
                continue
            w = 1 + cfg.alpha * math.exp(-d[i, j] ** 2 / (2 * cfg.sigma ** 2))
            den += w
            for t in range(T):
                num += w * ((pu[t, i, j] - gu[t, i, j]) ** 2 + (pv[t, i, j] - gv[t, i, j]) ** 2)
    return num / (T * den)


def ref_div(u, v, occ, t0):
    T, H, W = u.shape
    acc, n = 0.0, 0
    for t in range(t0, T):
        for i in range(H - 1):
            for j in range(W - 1):
                if occ[i, j] or occ[i, j + 1] or occ[i + 1, j] or occ[i + 1, j + 1]:
                    continue
                D = (u[t, i, j + 1] - u[t, i, j]) + (v[t, i + 1, j] - v[t, i, j])
                acc += D * D
                n += 1
    return acc / n


def ref_wall(u, v, occ, normals, t0):
    T, H, W = u.shape
    acc, n = 0.0, 0
    for t in range(t0, T):
        for i in range(H):
            for j in range(W):
                if normals.wall_band[i, j]:
                    wn = u[t, i, j] * normals.n[i, j, 0] + v[t, i, j] * normals.n[i, j, 1]
                    acc += wn * wn
                    n += 1
    return acc / n


@pytest.mark.parametrize("seed", range(4))
def test_losses_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    fp = random_footprint(rng)
    occ = fp.occupancy
    pu, pv, gu, gv = rng.normal(size=(4, 3, 8, 8))
    cfg = PhysLossConfig(warmup_frames=1)
    nrm = derive_wall_normals(fp)
    got = distance_weighted_mse((pu, pv), (gu, gv), fp, cfg)
    assert got == pytest.approx(ref_mse(pu, pv, gu, gv, occ, cfg), rel=1e-12)
    assert divergence_loss((pu, pv), fp, cfg) == pytest.approx(ref_div(pu, pv, occ, 1), rel=1e-12)
    assert wall_penetration_loss((pu, pv), fp, cfg=cfg) == pytest.approx(
        ref_wall(pu, pv, occ, nrm, 1), rel=1e-12)


def test_wall_adjacent_weight():
    occ = np.zeros((8, 8), np.uint8)
    occ[3:5, 3:5] = 1
    w = wall_weights(BuildingFootprint(occ))
    assert w[3, 2] == pytest.approx(1 + 2 * math.exp(-1 / 800), abs=1e-6)
    assert w[3, 2] == pytest.approx(2.9975, abs=1e-4)
    assert np.all(w[occ == 1] == 0)


def test_zero_at_identity_and_nonnegative(rng):
    fp = random_footprint(rng)
    u, v = rng.normal(size=(2, 3, 8, 8))
    assert distance_weighted_mse((u, v), (u, v), fp) == 0
    total, parts = total_physics_loss((u, v), (u + 1, v), fp, NO_WARMUP)
    assert min(parts.values()) >= 0
    assert total == pytest.approx(parts["data"] + 10 * parts["div"] + 10 * parts["wall"])


def test_linear_ramp_divergence():
    fp = BuildingFootprint.empty(8)
    c = 0.7
    u = np.broadcast_to(c * np.arange(8.0), (3, 8, 8))
    v = np.zeros((3, 8, 8))
    assert divergence_loss((u, v), fp, NO_WARMUP) == pytest.approx(c * c, rel=1e-12)


def test_rigid_rotation_divergence_free():
    fp = BuildingFootprint.empty(8)
    y, x = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
    u = np.broadcast_to(-y, (3, 8, 8))
    v = np.broadcast_to(x, (3, 8, 8))
    assert divergence_loss((u, v), fp, NO_WARMUP) == 0.0


def test_single_normal_violation_scaling():
    occ = np.zeros((8, 8), np.uint8)
    occ[3:5, 3:5] = 1
    fp = BuildingFootprint(occ)
    nrm = derive_wall_normals(fp)
    band = np.argwhere(nrm.wall_band)
    nb = len(band)
    i, j = band[0]
    u = np.zeros((3, 8, 8))
    v = np.zeros((3, 8, 8))
    u[1, i, j], v[1, i, j] = nrm.n[i, j]
    assert wall_penetration_loss((u, v), fp, cfg=NO_WARMUP) == pytest.approx(1 / (3 * nb))


def test_invariant_to_values_inside_buildings(rng):
    fp = random_footprint(rng, p=0.3)
    pu, pv, gu, gv = rng.normal(size=(4, 3, 8, 8))
    solid = fp.occupancy.astype(bool)
    qu, qv = pu.copy(), pv.copy()
    qu[:, solid] += 100.0
    qv[:, solid] -= 50.0
    a, _ = total_physics_loss((pu, pv), (gu, gv), fp, NO_WARMUP)
    b, _ = total_physics_loss((qu, qv), (gu, gv), fp, NO_WARMUP)
    assert a == pytest.approx(b, rel=1e-12)


def test_warmup_excludes_early_frames():
    fp = BuildingFootprint.empty(8)
    u = np.zeros((12, 8, 8))
    u[:10] = np.arange(8.0)  # divergent, but only before frame 10
    assert divergence_loss((u, np.zeros_like(u)), fp) == 0.0


def test_shape_mismatch_raises():
    fp = BuildingFootprint.empty(8)
    a = np.zeros((3, 8, 8))
    with pytest.raises(ValueError):
        distance_weighted_mse((a, a), (a[:2], a[:2]), fp)

"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (the lines also appear without ``-s``).
"""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import seeded_scene
from test_physloss import ref_div, ref_mse, ref_wall
from urbanwind.citygen import (BlockSet, CityGenConfig, canonicalize_direction, generate_layout,
                               rasterize_hard)
from urbanwind.domain import BuildingFootprint, GridSpec, derive_wall_normals
from urbanwind.inverseopt import (FlowObjective, InletSpec, OptimConfig, cohesion_penalty,
                                  comfort_loss, exceedance, move_penalty, optimize,
                                  region_from_boxes)
from urbanwind.metrics import metric_report, spectral_divergence, vrmse, wasserstein1
from urbanwind.physloss import (PhysLossConfig, distance_weighted_mse, divergence_loss,
                                wall_penetration_loss, wall_weights)
from urbanwind.rasterizer import LayoutParams, rasterize_gradient, rasterize_soft
from urbanwind.solver import divergence, simulate, valid_stencil_mask

TOY_GRID = GridSpec(64, 64, 320.0)
TOY_OMEGA = region_from_boxes(TOY_GRID, [[180, 170, 215, 205]])


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, detail
    return emit


def test_c01_solver_incompressibility(report):
    worst, t0 = 0.0, time.perf_counter()
    for seed in range(5):
        fp, cfg = seeded_scene(seed, n=64, T=28)
        u, v = simulate(fp, cfg).stack()
        valid = valid_stencil_mask(fp.fluid_mask)
        # pixel-unit divergence; physical divergence is this over dx
        D = divergence(u, v)[:, valid] / cfg.grid.dx
        rms = np.sqrt(np.mean(D ** 2, axis=1))
        worst = max(worst, float(np.max(rms / (cfg.u_in / cfg.grid.dx))))
    elapsed = time.perf_counter() - t0
    report("C1 solver incompressibility", worst < 1e-3 and elapsed < 10.0,
           f"max RMS div = {worst:.2e} u_in/dx (< 1e-3), runtime {elapsed:.2f} s (< 10 s)")


def test_c02_no_penetration(report):
    worst = 0.0
    for seed in range(5):
        fp, cfg = seeded_scene(seed, n=64, T=28)
        u, v = simulate(fp, cfg).stack()
        nrm = derive_wall_normals(fp)
        band = nrm.wall_band.astype(bool)
        late = slice(cfg.T // 2, None)
        wn = u[late][:, band] * nrm.n[band, 0] + v[late][:, band] * nrm.n[band, 1]
        worst = max(worst, float(np.mean(np.abs(wn)) / cfg.u_in))
    report("C2 hard-mode no-penetration", worst < 1e-2,
           f"max mean |w.n| = {worst:.2e} u_in (< 1e-2)")


def test_c03_physics_losses(report):
    rng = np.random.default_rng(3)
    occ = (rng.random((8, 8)) < 0.2).astype(np.uint8)
    occ[:, 0] = occ[:, -1] = 0
    occ[4, 4] = 1
    fp = BuildingFootprint(occ)
    pu, pv, gu, gv = rng.normal(size=(4, 3, 8, 8))
    cfg = PhysLossConfig(warmup_frames=0)
    nrm = derive_wall_normals(fp)
    pairs = [
        (distance_weighted_mse((pu, pv), (gu, gv), fp, cfg), ref_mse(pu, pv, gu, gv, occ, cfg)),
        (divergence_loss((pu, pv), fp, cfg), ref_div(pu, pv, occ, 0)),
        (wall_penetration_loss((pu, pv), fp, cfg=cfg), ref_wall(pu, pv, occ, nrm, 0)),
    ]
    rel = max(abs(a - b) / abs(b) for a, b in pairs)
    single = np.zeros((8, 8), np.uint8)
    single[3:5, 3:5] = 1
    w = wall_weights(BuildingFootprint(single))[3, 2]
    werr = abs(w - (1 + 2 * math.exp(-1 / 800)))
    report("C3 physics losses", rel < 1e-12 and werr < 1e-6 and abs(w - 2.9975) < 1e-4,
           f"max rel err vs brute force {rel:.1e} (< 1e-12); wall weight {w:.7f}")


def test_c04_metric_identities(report):
    rng = np.random.default_rng(4)
    fp = BuildingFootprint.empty(6)
    g = tuple(rng.normal(3, 1, (2, 8, 6, 6)))
    r = metric_report(g, g, fp)
    zero = max(r.as_dict().values())
    shift = spectral_divergence(tuple(np.roll(c, 5, axis=0) for c in g), g, fp)
    perm = rng.permutation(8)
    shuf = wasserstein1(tuple(c[perm] for c in g), g, fp)
    pm = wasserstein1((np.full((4, 6, 6), 2.0), np.zeros((4, 6, 6))),
                      (np.full((4, 6, 6), 5.0), np.zeros((4, 6, 6))), fp)
    mean = np.concatenate([g[0].ravel(), g[1].ravel()]).mean()
    vr = vrmse((np.full_like(g[0], mean), np.full_like(g[1], mean)), g, fp)
    ok = zero == 0 and abs(shift) < 1e-12 and shuf == 0 and pm == 3.0 and abs(vr - 1) < 1e-9
    report("C4 metric identities", ok,
           f"self={zero}, shift={shift:.1e}, shuffle W1={shuf}, point-mass W1={pm}, "
           f"constant-mean VRMSE-1={vr - 1:.1e}")


def test_c05_rasterizer(report):
    grid = GridSpec(48, 48, 240.0)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 5))
        p = LayoutParams(rng.uniform(50, 190, (n, 2)), rng.uniform(4, 25, (n, 2)),
                         rng.uniform(-1.5, 1.5, n), np.ones(n, bool), np.arange(n), L=grid.L)
        up = rng.normal(size=grid.shape)
        ga = rasterize_gradient(p, grid, 2.0, up)
        th = p.theta()
        gf = np.empty_like(th)
        for i in range(th.size):
            e = np.zeros_like(th)
            e[i] = 1e-3
            gf[i] = (np.sum(up * rasterize_soft(p.with_theta(th + e), grid).B)
                     - np.sum(up * rasterize_soft(p.with_theta(th - e), grid).B)) / 2e-3
        worst = max(worst, float(np.linalg.norm(ga - gf) / np.linalg.norm(gf)))
    big = LayoutParams([[122.5, 122.5]], [[50.0, 50.0]], [0.0], [True], [0], L=grid.L)
    face = float(rasterize_soft(big, grid, tau=2.0).B[24, 34])
    report("C5 rasterizer", worst < 1e-5 and abs(face - 0.5) < 1e-3,
           f"max FD rel err {worst:.1e} (< 1e-5); face-midpoint occupancy {face:.6f}")


def test_c06_comfort_loss(report):
    t = comfort_loss(np.full((4, 5, 5), 20.0), np.ones((5, 5)), InletSpec(), danger_weight=10)
    ok = abs(t.e_danger - 0.9933071) < 1e-6 and \
        abs(t.total - (10 * t.e_danger + t.e_comfort + t.e_stag)) < 1e-12
    report("C6 comfort loss", ok, f"e_danger {t.e_danger:.7f}, total {t.total:.7f}")


def test_c07_regularizers(report):
    centers = np.stack([np.arange(15) * 40.0, np.zeros(15)], axis=1)
    p = LayoutParams.from_blocks(BlockSet(centers, np.full((15, 2), 5.0), np.zeros(15), 1000.0),
                                 np.ones(15, bool))
    c = p.centers.copy()
    c[7] += [10.0, 0.0]
    q = LayoutParams(c, p.half_extents, p.rotations, p.trainable, p.parent, L=p.L,
                     initial_centers=p.initial_centers)
    rm = move_penalty(q)
    m = LayoutParams.from_blocks(BlockSet(np.array([[100.0, 100.0], [200.0, 100.0]]),
                                          np.full((2, 2), 15.0), np.zeros(2), 400.0),
                                 [True, True], mode="morph", S=2)
    c = m.centers + [17.0, -4.0]
    mt = LayoutParams(c, m.half_extents, m.rotations, m.trainable, m.parent, "morph", 2, m.L,
                      m.initial_centers)
    rc = cohesion_penalty(mt)
    report("C7 regularizers", abs(rm - 100 / 15) < 1e-9 and rc == 0.0,
           f"R_move {rm:.12f} (100/15), R_coh under translation {rc}")


@pytest.fixture(scope="module")
def toy_run():
    blocks = BlockSet(np.array([[120.0, 160.0]]), np.array([[20.0, 20.0]]), np.zeros(1), 320.0)
    params = LayoutParams.from_blocks(blocks, [True])
    cfg = OptimConfig(steps=50, lr=1.0, beta1=0.9, beta2=0.99, T=28)
    t0 = time.perf_counter()
    traj = optimize(params, [InletSpec("left", 15.0)], TOY_OMEGA, TOY_GRID, cfg)
    return traj, time.perf_counter() - t0


def test_c08_toy_end_to_end(report, toy_run):
    traj, elapsed = toy_run
    r0, r1 = traj.records[0], traj.records[-1]
    soft_drop = r1.flow < r0.flow
    same_sign = np.sign(r1.gt_total - r0.gt_total) == np.sign(r1.flow - r0.flow)
    ok = traj.error is None and len(traj.records) == 51 and soft_drop and same_sign \
        and elapsed < 15 * 60
    report("C8 toy end-to-end", ok,
           f"soft {r0.flow:.4f} -> {r1.flow:.4f}, hard-mask {r0.gt_total:.4f} -> "
           f"{r1.gt_total:.4f}, {elapsed:.1f} s (< 900 s)")


def test_c09_zone_shift(report, toy_run):
    traj, _ = toy_run
    obj: FlowObjective = traj.objective
    before = obj.simulate_inlets(traj.records[0].theta, hard=True)[0]
    after = obj.simulate_inlets(traj.records[-1].theta, hard=True)[0]
    b, a = exceedance(before, TOY_OMEGA), exceedance(after, TOY_OMEGA)
    ok = a["gt15"] < b["gt15"] and a["gt5"] < b["gt5"] and a["lt1"] > b["lt1"]
    report("C9 zone shift", ok,
           f">15: {b['gt15']:.4f}->{a['gt15']:.4f}, >5: {b['gt5']:.4f}->{a['gt5']:.4f}, "
           f"<1: {b['lt1']:.4f}->{a['lt1']:.4f}")


def _min_gap(c, h):
    """Vectorized pairwise gap between axis-aligned rectangles (inf for < 2 blocks)."""
    if len(c) < 2:
        return np.inf
    d = np.abs(c[:, None] - c[None]) - (h[:, None] + h[None])
    gap = np.hypot(*np.maximum(d, 0).transpose(2, 0, 1))
    gap[np.diag_indices(len(c))] = np.inf
    return float(gap.min())


def test_c10_dataset_constraints(report):
    alley = outside = buffer_px = 0
    for seed in range(200):
        blocks, sim = generate_layout(CityGenConfig(seed=seed))
        if _min_gap(blocks.centers, blocks.half_extents) < 10.0:
            alley += 1
        canon = canonicalize_direction(blocks, blocks.meta["wind_direction"])
        r = blocks.meta["diameter"] / 2
        far = np.hypot(*(canon.corners() - blocks.L / 2).transpose(2, 0, 1))
        outside += int(np.sum(far.max(axis=1) > r + 1e-9))
        occ = rasterize_hard(canon, sim.grid).occupancy.astype(bool)
        x, y = sim.grid.pixel_centers()
        buffer_px += int(occ[np.hypot(x - blocks.L / 2, y - blocks.L / 2) > r].sum())
    counts = [len(generate_layout(CityGenConfig(seed=s, city_diameter=500))[0])
              for s in range(200)]
    mean = float(np.mean(counts))
    ok = alley == 0 and outside == 0 and buffer_px == 0 and abs(mean - 52) <= 5.2
    report("C10 dataset constraints", ok,
           f"alley violations {alley}, blocks outside {outside}, buffer pixels {buffer_px}, "
           f"mean count at D=500 {mean:.2f} (52 +/- 10%)")


def _run(args, threads, cwd):
    env = dict(os.environ, OMP_NUM_THREADS=str(threads), OPENBLAS_NUM_THREADS=str(threads),
               MKL_NUM_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "urbanwind", *args], env=env, cwd=cwd, check=True)


def _tree(root: Path):
    if root.is_file():
        return {"": root.read_bytes()}
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith("manifest.json")}


def test_c11_determinism(report, tmp_path):
    (tmp_path / "toy.json").write_text(
        '{"seed": 0, "L": 320.0, "u_in": 15.0, "blocks": '
        '[{"cx": 120.0, "cy": 160.0, "ax": 20.0, "ay": 20.0, "rot": 0.0}]}')
    (tmp_path / "omega.json").write_text('{"boxes_m": [[180, 170, 215, 205]]}')
    (tmp_path / "opt.toml").write_text("grid = 64\nT = 8\n")
    _run(["citygen", "--seed", "7", "--grid", "64", "--out", "lay.json"], 1, tmp_path)
    commands = {
        "dataset": lambda out, jobs: ["dataset", "--n-train", "3", "--n-val", "1", "--n-test", "1",
                                      "--seed", "11", "--grid", "32", "--frames", "6",
                                      "--jobs", str(jobs), "--out-dir", out],
        "simulate": lambda out, jobs: ["simulate", "--layout", "lay.json", "--grid", "64",
                                       "--frames", "8", "--out", out],
        "optimize": lambda out, jobs: ["optimize", "--layout", "toy.json", "--region",
                                       "omega.json", "--config", "opt.toml", "--steps", "2",
                                       "--jobs", str(jobs), "--out", out],
    }
    results = {}
    for name, argv in commands.items():
        trees = []
        for k, (threads, jobs) in enumerate([(1, 1), (1, 1), (4, 2)]):
            out = f"{name}_{k}" + (".wnd" if name == "simulate" else "")
            _run(argv(out, jobs), threads, tmp_path)
            trees.append(_tree(tmp_path / out))
        results[name] = trees[0] == trees[1] == trees[2] and len(trees[0]) > 0
    report("C11 determinism", all(results.values()),
           ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items())
           + " (rerun and 1 vs N threads)")

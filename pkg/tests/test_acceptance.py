"""Acceptance gate: one test per shipped claim, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines live.
Each criterion states its tolerance inline; nothing here is tuned to the
implementation beyond the published constants.
"""

import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from twophase.cli import main as cli_main
from twophase.momentum import (
    ModeParams,
    MomentumFlavor,
    SyncVariant,
    complex_region,
    gpa_khat,
    gpa_matrix,
    single_step_matrix,
    sla_full_matrix,
    sla_reduced_matrix,
    spectral_summary,
    weight_ema_matrix,
)
from twophase.simulator import ReplicaPlan, run_diloco
from twophase.spectrum import Spectrum, make_isotropic, make_power_law, make_spiked, realize_ntk
from twophase.sweeps import (
    GridSpec,
    curve_gap,
    first_divergent_eta,
    la_vs_sgd_gain,
    linear_grid,
    log_grid,
    loss_grid,
    r_scaling_experiment,
    stability_map,
    stability_mismatches,
    theorem_scan,
)
from twophase.theory import (
    NoiseModel,
    TwoPhaseConfig,
    coefficient_ratio,
    dense_cycle_matrix,
    diloco_cycle,
    init_pvec_iid,
    iterate_cycles,
    la_cycle,
    scaling_rule,
    sgd_step,
)

EMA = MomentumFlavor.EMA
NESTEROV = MomentumFlavor.NESTEROV


def _report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


def _random_spectrum(rng, max_dim=64):
    n_blocks = rng.integers(1, 5)
    values = np.sort(rng.uniform(0.05, 4.0, size=n_blocks))[::-1]
    counts = rng.integers(1, 8, size=n_blocks)
    spec = Spectrum(tuple((float(v), int(c)) for v, c in zip(values, counts)))
    return spec if spec.dim <= max_dim else _random_spectrum(rng, max_dim)


def _random_config(rng, spec, R_choices=(1, 2, 4)):
    return TwoPhaseConfig(
        eta=float(rng.uniform(0.01, 0.4)),
        nu=float(rng.uniform(0.1, 2.5)),
        S=int(rng.integers(1, 8)),
        noise=NoiseModel(B=int(rng.integers(1, spec.dim + 1)), D=spec.dim, R=int(rng.choice(R_choices))),
    )


def test_criterion_01_reduction_identities():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        spec = _random_spectrum(rng)
        cfg = _random_config(rng, spec, R_choices=(1,))
        p = rng.uniform(0.1, 2.0, size=spec.dim)
        via_cycle = la_cycle(p, spec, replace(cfg, nu=1.0))
        via_steps = p
        for _ in range(cfg.S):
            via_steps = sgd_step(via_steps, spec, cfg.eta, cfg.noise)
        worst = max(worst, float(np.max(np.abs(via_cycle - via_steps) / np.abs(via_steps))))
        exact = np.array_equal(diloco_cycle(p, spec, cfg), la_cycle(p, spec, cfg))
        if not exact:
            worst = math.inf
    _report(1, worst <= 1e-12, f"nu=1 cycle == S plain steps and R=1 == single-worker; max rel err {worst:.2e}")


def test_criterion_02_structured_matches_dense():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(50):
        spec = _random_spectrum(rng)
        cfg = _random_config(rng, spec)
        p = rng.uniform(0.1, 2.0, size=spec.dim)
        dense = dense_cycle_matrix(spec, cfg) @ p
        structured = diloco_cycle(p, spec, cfg)
        worst = max(worst, float(np.max(np.abs(structured - dense) / (np.abs(dense) + 1e-300))))
    _report(2, worst <= 1e-12, f"50 random D<=64 configs, structured vs dense cycle; max rel err {worst:.2e}")


@pytest.fixture(scope="module")
def mc_runs():
    spec = make_isotropic(400)
    ntk = realize_ntk(spec, seed=0)
    plan = ReplicaPlan(base_seed=0, replicas=500, cycles=20)
    runs = {}
    for R in (1, 2, 4):
        cfg = TwoPhaseConfig(eta=0.01, nu=1.5, S=10, noise=NoiseModel(B=16 // R, D=400, R=R))
        mean, _ = run_diloco(ntk, cfg, plan, n_jobs=4)
        theory, _ = iterate_cycles(spec, cfg, plan.cycles)
        runs[R] = (mean, theory)
    return runs


def test_criterion_03_monte_carlo_concentration(mc_runs):
    within = total = 0
    worst = 0.0
    for mean, theory in mc_runs.values():
        gap = np.abs(mean.losses - theory)
        sigmas = gap / mean.stderr
        within += int(np.sum(sigmas <= 3.0))
        total += len(sigmas)
        worst = max(worst, float(sigmas.max()))
    frac = within / total
    _report(
        3,
        frac >= 0.95,
        f"D=400 B_tot=16 R in (1,2,4) S=10, 500 replicas: {within}/{total} cells within 3 SE (worst {worst:.2f} SE)",
    )


@pytest.mark.skipif(not os.environ.get("TWOPHASE_SLOW"), reason="set TWOPHASE_SLOW=1 for the full-scale run")
def test_criterion_03_slow_full_scale():
    spec = make_isotropic(3200)
    ntk = realize_ntk(spec, seed=0)
    plan = ReplicaPlan(base_seed=0, replicas=200, cycles=20)
    within = total = 0
    for R in (1, 2, 4):
        cfg = TwoPhaseConfig(eta=0.01, nu=1.5, S=10, noise=NoiseModel(B=64 // R, D=3200, R=R))
        mean, _ = run_diloco(ntk, cfg, plan, n_jobs=-1)
        theory, _ = iterate_cycles(spec, cfg, plan.cycles)
        sigmas = np.abs(mean.losses - theory) / mean.stderr
        within += int(np.sum(sigmas <= 3.0))
        total += len(sigmas)
    frac = within / total
    _report(3, frac >= 0.95, f"D=3200 B_tot=64 full scale: {within}/{total} cells within 3 SE")


def _spiked_grid():
    return GridSpec(
        etas=log_grid(1e-3, 0.5, 40),
        nus=linear_grid(0.0, 4.0, 40),
        spectrum=make_spiked(100, 0.99, 1.0, 20.0),
        noise=NoiseModel(B=20, D=100),
        S=10,
    )


def test_criterion_04_surface_optima_direction():
    spiked = loss_grid(_spiked_grid())
    power = loss_grid(
        GridSpec(
            etas=log_grid(1e-2, 2.0, 40),
            nus=linear_grid(0.0, 4.0, 40),
            spectrum=make_power_law(400, -1.5),
            noise=NoiseModel(B=2, D=400),
            S=10,
        )
    )
    ok = spiked.nu_star > 1.0 and not spiked.boundary and power.nu_star < 1.0 and not power.boundary
    _report(
        4,
        ok,
        f"spiked nu*={spiked.nu_star:.4f} (>1, interior), power-law nu*={power.nu_star:.4f} (<1, interior)",
    )


def test_criterion_05_gain_band():
    report = la_vs_sgd_gain(_spiked_grid())
    ok = 0.05 <= report.gain <= 0.30 and not report.boundary
    _report(5, ok, f"tuned two-phase vs tuned nu=1 gain {report.gain:.4f} in [0.05, 0.30]")


def test_criterion_06_worst_eigenvalue_grows_with_workers():
    rows = theorem_scan(1.0, 100, 5, 0.05, 1.0, 20, [1, 2, 4])
    eigs = [row["max_eig"] for row in rows]
    ok = eigs[0] < eigs[1] < eigs[2]
    _report(6, ok, "max cycle eigenvalue " + " < ".join(f"{e:.6f}" for e in eigs) + " over R=1,2,4")


def test_criterion_07_scaling_rule():
    loc = (2.0, 0.1)
    dil = scaling_rule(loc, 4)
    ratios = [coefficient_ratio(s, loc, dil, 4) for s in range(1, 9)]
    exact = max(abs(r - 1.0) for r in ratios) <= 1e-12
    gaps = {}
    for rule in ("fixed", "sqrt_rule"):
        recs = r_scaling_experiment(400, 16, [1, 4], np.array([0.002]), rule, cycles=20)
        gaps[rule] = curve_gap(recs[0], recs[1])
    tighter = gaps["sqrt_rule"] < gaps["fixed"]
    scan = r_scaling_experiment(400, 16, [1, 4], log_grid(0.002, 0.12, 20), "fixed", cycles=2000)
    e1, e4 = first_divergent_eta(scan, 1), first_divergent_eta(scan, 4)
    earlier = math.isfinite(e1) and math.isfinite(e4) and e4 < e1
    _report(
        7,
        exact and tighter and earlier,
        f"rescaled coefficients ratio 1 exactly; R=1 vs R=4 gap {gaps['sqrt_rule']:.2e} < {gaps['fixed']:.2e}; "
        f"fixed-rule first divergence eta(R=4)={e4:.4f} < eta(R=1)={e1:.4f}",
    )


def test_criterion_08_stability_boundary():
    eta_lams = linear_grid(0.02, 3.0, 100)
    nus = linear_grid(0.0, 4.0, 100)
    bad = 0
    checked = 0
    for S in (1, 2, 3):
        smap = stability_map(eta_lams, nus, S, cycles=128)
        bad += stability_mismatches(smap)
        checked += int((~smap.marginal).sum())
    _report(8, bad == 0 and checked > 25000, f"{bad} mismatches on {checked} non-marginal cells, S in (1,2,3)")


def test_criterion_09_momentum_closed_forms():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(500):
        beta = rng.uniform(0.05, 0.995)
        for flavor in (EMA, NESTEROV):
            lo, hi = complex_region(beta, flavor)
            x = lo + rng.uniform(0.01, 0.99) * (hi - lo)
            rho = spectral_summary(single_step_matrix(x, 1.0, beta, flavor)).rho
            want = math.sqrt(beta) if flavor is EMA else math.sqrt(beta * (1.0 - (1.0 - beta) * x))
            worst = max(worst, abs(rho - want))
    _report(9, worst <= 1e-10, f"1000-point complex-window sample; max |rho - closed form| {worst:.2e}")


def _mode(**kw):
    base = dict(lam=0.2, eta=1.0, nu=2.0, S=1, beta_in=0.9, beta_out=0.8)
    base.update(kw)
    return ModeParams(**base)


def _r_step(params):
    M = sla_reduced_matrix(params) if params.sync is SyncVariant.RESET else sla_full_matrix(params)
    return spectral_summary(M, s_effective=params.S).r_step


def test_criterion_10_momentum_outer_rates():
    # (a) ordering on the full cycle, saturation of the reduced one
    gaps = []
    for S in range(1, 65):
        r_nes = _r_step(_mode(S=S, outer=NESTEROV, sync=SyncVariant.KEEP))
        r_ema = _r_step(_mode(S=S, outer=EMA, sync=SyncVariant.KEEP))
        gaps.append(r_nes - r_ema)
    ordering = min(gaps) > 0.0
    cycles = [S * _r_step(_mode(S=S, outer=EMA, sync=SyncVariant.RESET)) for S in (16, 32, 64)]
    saturates = max(cycles) / min(cycles) - 1.0 <= 0.05
    # (b) at the critical outer rate the per-step rate stops moving in S
    r64 = _r_step(_mode(S=64, nu=5.0, outer=NESTEROV, sync=SyncVariant.RESET))
    r32 = _r_step(_mode(S=32, nu=5.0, outer=NESTEROV, sync=SyncVariant.RESET))
    invariant = 0.8 <= r64 / r32 <= 1.25
    # (c) reduced (reset) and full (keep) land together at large S
    rel = []
    for flavor in (EMA, NESTEROV):
        red = _r_step(_mode(S=64, outer=flavor, sync=SyncVariant.RESET))
        full = _r_step(_mode(S=64, outer=flavor, sync=SyncVariant.KEEP))
        rel.append(abs(red - full) / full)
    agree = max(rel) <= 0.10
    _report(
        10,
        ordering and saturates and invariant and agree,
        f"nesterov>ema at all S (min gap {min(gaps):.2e}); ema r_cycle flat {max(cycles)/min(cycles)-1:.2e}; "
        f"nu=5 r64/r32={r64/r32:.4f}; reduced vs full at S=64 within {max(rel):.2e}",
    )


def test_criterion_11_averaging_structures():
    rng = np.random.default_rng(14)
    worst_ema = 0.0
    for _ in range(200):
        lam, eta = rng.uniform(0.05, 2.0), rng.uniform(0.05, 1.5)
        beta1, beta_ema = rng.uniform(0.0, 0.99), rng.uniform(0.0, 0.99)
        got = np.sort_complex(np.linalg.eigvals(weight_ema_matrix(lam, eta, beta1, beta_ema)))
        base = np.linalg.eigvals(single_step_matrix(lam, eta, beta1, EMA))
        want = np.sort_complex(np.concatenate([base, [beta_ema]]))
        worst_ema = max(worst_ema, float(np.max(np.abs(got - want))))
    worst_gpa = 0.0
    for _ in range(5):
        lam, eta = rng.uniform(0.1, 2.0), rng.uniform(0.1, 1.0)
        mu_x, mu_y = rng.uniform(0.2, 0.95), rng.uniform(0.2, 0.95)
        M = gpa_matrix(lam, eta, mu_x, mu_y)
        s = M @ rng.standard_normal(3)
        for _ in range(1000):
            k = gpa_khat(s, mu_x, mu_y)
            d = -lam * s[0]
            s_next = M @ s
            k_next = gpa_khat(s_next, mu_x, mu_y)
            worst_gpa = max(
                worst_gpa,
                abs(k_next - (mu_x * k + (1.0 - mu_x) * eta * d)),
                abs(s_next[0] - (s[0] + mu_y * k_next + (1.0 - mu_y) * eta * d)),
            )
            norm = np.linalg.norm(s_next)
            s = s_next / norm if norm > 0 else s_next
    ok = worst_ema <= 1e-10 and worst_gpa <= 1e-12
    _report(
        11,
        ok,
        f"weight-EMA spectrum split max err {worst_ema:.2e}; path-averaging recurrences max err {worst_gpa:.2e}",
    )


SMALL_CONFIGS = {
    "fig1-surface": {
        "spectrum": {"kind": "spiked", "D": 40, "bulk_frac": 0.9, "bulk_val": 1.0, "spike_ratio": 10.0},
        "B": 8,
        "S": 5,
        "eta_grid": {"min": 0.005, "max": 0.3, "count": 8},
        "nu_grid": {"min": 0.0, "max": 3.0, "count": 8},
    },
    "fig1-nu-curve": {
        "spectrum": {"kind": "spiked", "D": 40, "bulk_frac": 0.9, "bulk_val": 1.0, "spike_ratio": 10.0},
        "B": 8,
        "S": 5,
        "eta_grid": {"min": 0.005, "max": 0.3, "count": 8},
        "nu_grid": {"min": 0.0, "max": 3.0, "count": 8},
    },
    "fig2-rscaling": {
        "D": 50,
        "B_tot": 8,
        "R_list": [1, 2],
        "cycles": 5,
        "eta_grid": {"min": 0.005, "max": 0.05, "count": 4},
        "replicas": 2,
        "divergence_budget": 40,
    },
    "fig3-rates": {"S_list": [1, 4], "nu_list": [2.0]},
    "theorem1": {"D": 20, "B_tot": 4, "R_list": [1, 2]},
    "sweep": {
        "spectrum": {"kind": "isotropic", "D": 24},
        "B": 6,
        "S": 3,
        "cycles": 2,
        "eta_grid": {"min": 0.01, "max": 0.2, "count": 5},
        "nu_grid": {"min": 0.5, "max": 2.5, "count": 5},
    },
    "simulate": {
        "spectrum": {"kind": "isotropic", "D": 16},
        "eta": 0.05,
        "nu": 1.5,
        "S": 3,
        "B": 4,
        "replicas": 3,
        "cycles": 3,
        "per_replica": True,
    },
    "stability-map": {
        "S_list": [1],
        "eta_lam_grid": {"min": 0.1, "max": 2.0, "count": 6},
        "nu_grid": {"min": 0.0, "max": 3.0, "count": 5},
        "cycles": 32,
    },
}


def test_criterion_12_byte_identical_reruns(tmp_path):
    mismatched = []
    for name, body in SMALL_CONFIGS.items():
        cfg_path = tmp_path / f"{name}.json"
        cfg_path.write_text(json.dumps(dict(body, experiment=name)))
        dirs = [tmp_path / name / tag for tag in ("a", "b")]
        for d in dirs:
            assert cli_main(["run", str(cfg_path), "--out", str(d), "--seed", "3"]) == 0
        files = sorted(os.listdir(dirs[0]))
        if files != sorted(os.listdir(dirs[1])):
            mismatched.append(name)
            continue
        for fname in files:
            if (dirs[0] / fname).read_bytes() != (dirs[1] / fname).read_bytes():
                mismatched.append(f"{name}/{fname}")
    _report(
        12,
        not mismatched,
        "all 8 experiments rerun byte-identical" if not mismatched else f"mismatches: {mismatched}",
    )

"""Experiment pipelines over the theory and momentum engines.

Five families: (eta, nu) loss grids with per-nu optima and an SGD
baseline gain, worker-count scaling comparisons under a fixed or
sqrt-rescaled learning rate, momentum rate-vs-S curves, worst-eigenvalue
scans of the dense cycle operator, and deterministic stability maps
checked against the closed-form region.

Everything is deterministic given its inputs.  Diverged cells carry
loss = inf and are excluded from every argmin; a result whose argmin
sits on a grid edge is flagged boundary and should be rerun wider.
CSV floats are written with repr so identical runs give identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .momentum import (
    ModeParams,
    MomentumFlavor,
    SyncVariant,
    sla_full_matrix,
    sla_reduced_matrix,
    spectral_summary,
)
from .simulator import (
    PROV_MC_MEAN,
    PROV_THEORY,
    ReplicaPlan,
    TrajectoryRecord,
    run_diloco,
)
from .spectrum import Spectrum, make_isotropic, realize_ntk
from .theory import (
    OVERFLOW,
    NoiseModel,
    StabilityClass,
    TwoPhaseConfig,
    diloco_cycle,
    init_pvec_iid,
    iterate_cycles,
    scaling_rule,
    stability_region,
    theorem1_check,
)

NU_RULES = ("fixed", "sqrt_rule")

SURFACE_CSV_COLUMNS = ("nu", "eta", "loss", "diverged")
OPTIMAL_CSV_COLUMNS = ("nu", "eta_star", "loss_star", "boundary_flag")
RATE_CSV_COLUMNS = (
    "S",
    "flavor_out",
    "nu",
    "rho",
    "r_cycle",
    "r_step",
    "sync_variant",
    "system",
    "lam",
    "eta",
    "beta_in",
    "beta_out",
    "flavor_in",
)
THEOREM_CSV_COLUMNS = ("R", "max_eig", "lam0", "D", "S", "eta", "nu", "B_tot")
STABILITY_CSV_COLUMNS = ("nu", "eta_lam", "S", "predicted", "empirical", "marginal")


def log_grid(lo: float, hi: float, count: int) -> np.ndarray:
    if not (0.0 < lo < hi):
        raise ValueError(f"log grid needs 0 < lo < hi, got [{lo}, {hi}]")
    if count < 1:
        raise ValueError(f"grid count must be >= 1, got {count}")
    return np.geomspace(lo, hi, count)


def linear_grid(lo: float, hi: float, count: int) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"linear grid needs lo < hi, got [{lo}, {hi}]")
    if count < 1:
        raise ValueError(f"grid count must be >= 1, got {count}")
    return np.linspace(lo, hi, count)


@dataclass(frozen=True)
class GridSpec:
    """One (eta, nu) sweep: grids, spectrum, noise, S inner steps, cycles.

    cycles defaults to 1: a single outer cycle from the standard-normal
    initialization, which is the protocol behind the surface figures.
    """

    etas: np.ndarray
    nus: np.ndarray
    spectrum: Spectrum
    noise: NoiseModel
    S: int
    cycles: int = 1

    def __post_init__(self):
        etas = np.asarray(self.etas, dtype=float)
        nus = np.asarray(self.nus, dtype=float)
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "nus", nus)
        if etas.ndim != 1 or nus.ndim != 1 or len(etas) < 1 or len(nus) < 1:
            raise ValueError("eta and nu grids must be non-empty 1-d arrays")
        if not (etas > 0.0).all():
            raise ValueError("eta grid must be positive")
        if (np.diff(etas) <= 0.0).any() or (np.diff(nus) <= 0.0).any():
            raise ValueError("grids must be strictly increasing")
        if (nus < 0.0).any():
            raise ValueError("nu grid must be >= 0")
        if self.S < 1 or self.cycles < 1:
            raise ValueError(f"S and cycles must be >= 1, got {self.S}, {self.cycles}")


@dataclass(frozen=True)
class SweepResult:
    """Loss surface with divergence mask and the masked global argmin."""

    nus: np.ndarray
    etas: np.ndarray
    loss: np.ndarray  # shape (len(nus), len(etas)); inf where diverged
    diverged: np.ndarray  # bool, same shape
    nu_star: float
    eta_star: float
    loss_star: float
    argmin: tuple[int, int]
    boundary: bool  # argmin touches a grid edge: widen the grid


@dataclass(frozen=True)
class OptimalEta:
    """Best eta at one nu; boundary means the argmin sat on an eta edge
    (or the whole row diverged, in which case eta_star is nan)."""

    nu: float
    eta_star: float
    loss_star: float
    boundary: bool


def loss_grid(grid: GridSpec) -> SweepResult:
    """Loss after `cycles` outer cycles at every (nu, eta) grid point."""
    p0 = init_pvec_iid(grid.spectrum)
    n_nu, n_eta = len(grid.nus), len(grid.etas)
    loss = np.empty((n_nu, n_eta))
    div = np.zeros((n_nu, n_eta), dtype=bool)
    for i, nu in enumerate(grid.nus):
        for j, eta in enumerate(grid.etas):
            cfg = TwoPhaseConfig(eta=float(eta), nu=float(nu), S=grid.S, noise=grid.noise)
            losses, d = iterate_cycles(grid.spectrum, cfg, grid.cycles, p0=p0)
            div[i, j] = d
            loss[i, j] = math.inf if d else float(losses[-1])
    if div.all():
        raise ValueError("every grid cell diverged; shrink eta or nu ranges")
    masked = np.where(div, math.inf, loss)
    i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
    boundary = i in (0, n_nu - 1) or j in (0, n_eta - 1)
    return SweepResult(
        nus=grid.nus,
        etas=grid.etas,
        loss=loss,
        diverged=div,
        nu_star=float(grid.nus[i]),
        eta_star=float(grid.etas[j]),
        loss_star=float(loss[i, j]),
        argmin=(int(i), int(j)),
        boundary=boundary,
    )


def optimal_eta_curve(result: SweepResult) -> list[OptimalEta]:
    """Masked per-nu argmin over eta, in grid order."""
    out = []
    n_eta = len(result.etas)
    for i, nu in enumerate(result.nus):
        row = np.where(result.diverged[i], math.inf, result.loss[i])
        if not np.isfinite(row).any():
            out.append(OptimalEta(float(nu), math.nan, math.inf, True))
            continue
        j = int(np.argmin(row))
        out.append(
            OptimalEta(
                nu=float(nu),
                eta_star=float(result.etas[j]),
                loss_star=float(row[j]),
                boundary=j in (0, n_eta - 1),
            )
        )
    return out


@dataclass(frozen=True)
class GainReport:
    """Tuned two-phase loss vs tuned one-phase (nu = 1) loss on one grid.

    gain = 1 - L(nu*, eta*) / L(1, eta*_sgd); positive means the extra
    outer phase helped.  boundary taints either argmin.
    """

    gain: float
    nu_star: float
    eta_star: float
    loss_star: float
    eta_star_sgd: float
    loss_star_sgd: float
    boundary: bool


def la_vs_sgd_gain(grid: GridSpec) -> GainReport:
    """Optimize (nu, eta) on the grid and eta alone at nu = 1, then compare."""
    surface = loss_grid(grid)
    sgd = loss_grid(replace(grid, nus=np.array([1.0])))
    j = sgd.argmin[1]
    sgd_boundary = j in (0, len(grid.etas) - 1)
    return GainReport(
        gain=1.0 - surface.loss_star / sgd.loss_star,
        nu_star=surface.nu_star,
        eta_star=surface.eta_star,
        loss_star=surface.loss_star,
        eta_star_sgd=sgd.eta_star,
        loss_star_sgd=sgd.loss_star,
        boundary=surface.boundary or sgd_boundary,
    )


def r_scaling_experiment(
    D: int,
    B_tot: int,
    R_list: list[int],
    eta_list: np.ndarray,
    nu_rule: str,
    cycles: int = 20,
    S: int = 5,
    nu0: float = 2.0,
    spectrum: Spectrum | None = None,
    mc_plan: ReplicaPlan | None = None,
    ntk_seed: int = 0,
    n_jobs: int = 1,
) -> list[TrajectoryRecord]:
    """Theory trajectories for each (R, eta) at fixed total batch B_tot.

    Under "fixed" every R runs the same (nu0, eta); under "sqrt_rule" R
    workers run (nu0*sqrt(R), eta/sqrt(R)), which preserves nu*eta and
    every noise coefficient.  Each record's config carries eta_base (the
    pre-rule eta, the natural x axis) and the rule name.  When mc_plan is
    given, a paired Monte Carlo mean record follows each theory record,
    all on one kernel realized from ntk_seed.
    """
    if nu_rule not in NU_RULES:
        raise ValueError(f"nu_rule must be one of {NU_RULES}, got {nu_rule!r}")
    if spectrum is None:
        spectrum = make_isotropic(D)
    if spectrum.dim != D:
        raise ValueError(f"spectrum dim {spectrum.dim} != D={D}")
    ntk = realize_ntk(spectrum, seed=ntk_seed) if mc_plan is not None else None
    records = []
    for R in R_list:
        if B_tot % R != 0:
            raise ValueError(f"R={R} does not divide B_tot={B_tot}")
        noise = NoiseModel(B=B_tot // R, D=D, R=R)
        for eta in np.asarray(eta_list, dtype=float):
            nu_r, eta_r = (nu0, eta) if nu_rule == "fixed" else scaling_rule((nu0, eta), R)
            cfg = TwoPhaseConfig(eta=float(eta_r), nu=float(nu_r), S=S, noise=noise)
            extras = {"eta_base": float(eta), "rule": nu_rule, "seed": ""}
            losses, diverged = iterate_cycles(spectrum, cfg, cycles)
            records.append(
                TrajectoryRecord(
                    losses=losses,
                    provenance=PROV_THEORY,
                    config=dict(cfg.asdict(), **extras),
                    diverged=diverged,
                )
            )
            if mc_plan is not None:
                mean, _ = run_diloco(ntk, cfg, mc_plan, n_jobs=n_jobs)
                mean.config.update(eta_base=float(eta), rule=nu_rule)
                records.append(mean)
    return records


def curve_gap(a: TrajectoryRecord, b: TrajectoryRecord) -> float:
    """Sup-norm distance between two loss curves over their common length."""
    n = min(len(a.losses), len(b.losses))
    if n == 0:
        return math.inf
    return float(np.max(np.abs(a.losses[:n] - b.losses[:n])))


def first_divergent_eta(records: list[TrajectoryRecord], R: int, rule: str | None = None) -> float:
    """Smallest eta_base whose trajectory diverged within its cycle budget.

    nan if nothing diverged for that R (widen the eta grid or the budget).
    """
    etas = [
        rec.config["eta_base"]
        for rec in records
        if rec.config.get("R") == R
        and rec.provenance == PROV_THEORY
        and (rule is None or rec.config.get("rule") == rule)
        and rec.diverged
    ]
    return min(etas) if etas else math.nan


def sla_rate_sweep(
    template: ModeParams,
    S_list: list[int],
    nu_list: list[float],
    outer_flavors: list[MomentumFlavor] | None = None,
    sync_variants: list[SyncVariant] | None = None,
) -> list[dict]:
    """Convergence-rate table over (S, nu, outer flavor, sync variant).

    Every combination gets a row from the full 4x4 cycle matrix; reset
    combinations get an additional row from the reduced 2x2 (system column
    "full" vs "reduced").  Rates are per cycle and per inner step.
    """
    if outer_flavors is None:
        outer_flavors = [MomentumFlavor.EMA, MomentumFlavor.NESTEROV]
    if sync_variants is None:
        sync_variants = [SyncVariant.KEEP, SyncVariant.RESET]
    rows = []
    for S in S_list:
        for nu in nu_list:
            for flavor in outer_flavors:
                for sync in sync_variants:
                    params = replace(template, S=S, nu=float(nu), outer=flavor, sync=sync)
                    systems = [("full", sla_full_matrix(params))]
                    if sync is SyncVariant.RESET:
                        systems.append(("reduced", sla_reduced_matrix(params)))
                    for system, M in systems:
                        summary = spectral_summary(M, s_effective=S)
                        rows.append(
                            {
                                "S": S,
                                "flavor_out": flavor.value,
                                "nu": float(nu),
                                "rho": summary.rho,
                                "r_cycle": summary.r_cycle,
                                "r_step": summary.r_step,
                                "sync_variant": sync.value,
                                "system": system,
                                "lam": params.lam,
                                "eta": params.eta,
                                "beta_in": params.beta_in,
                                "beta_out": params.beta_out,
                                "flavor_in": params.inner.value,
                            }
                        )
    return rows


def theorem_scan(
    lam0: float, D: int, S: int, eta: float, nu: float, B_tot: int, R_list: list[int]
) -> list[dict]:
    """Worst eigenvalue of the cycle operator per worker count, as rows."""
    rows = []
    for R, top in theorem1_check(lam0, D, S, eta, nu, B_tot, R_list):
        rows.append(
            {
                "R": R,
                "max_eig": top,
                "lam0": lam0,
                "D": D,
                "S": S,
                "eta": eta,
                "nu": nu,
                "B_tot": B_tot,
            }
        )
    return rows


EMP_STABLE = "stable"
EMP_UNSTABLE = "unstable"
EMP_AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class StabilityMap:
    """Predicted vs iterated stability over an (eta*lam, nu) grid.

    predicted holds StabilityClass values; empirical compares the mode
    amplitude after `cycles` zero-noise cycles against its start.  A cell
    is marginal when its predicted class is not plain stable/unstable or
    any of its 8 neighbors predicts differently (the boundary passes
    within one grid step); agreement is only meaningful elsewhere.
    """

    eta_lams: np.ndarray
    nus: np.ndarray
    S: int
    cycles: int
    predicted: np.ndarray  # (len(nus), len(eta_lams)) of str
    empirical: np.ndarray  # same shape, EMP_* strings
    marginal: np.ndarray  # bool


def stability_map(eta_lams: np.ndarray, nus: np.ndarray, S: int, cycles: int = 128) -> StabilityMap:
    """Iterate the deterministic (full-batch) cycle on every grid cell.

    All eta*lam values ride one zero-noise spectrum (eta = 1, lambda =
    eta*lam), so each nu costs a single p-vector trajectory.  Amplitudes
    are clamped at OVERFLOW each cycle; clamped cells still compare as
    grown.
    """
    eta_lams = np.asarray(eta_lams, dtype=float)
    nus = np.asarray(nus, dtype=float)
    if len(np.unique(eta_lams)) != len(eta_lams):
        raise ValueError("eta_lam grid must have distinct values")
    if (eta_lams <= 0.0).any():
        raise ValueError("eta_lam grid must be positive")
    n_d, n_nu = len(eta_lams), len(nus)
    order = np.argsort(-eta_lams, kind="stable")  # descending for the spectrum
    spec = Spectrum(tuple((float(d), 1) for d in eta_lams[order]))
    noise = NoiseModel(B=n_d, D=n_d)  # full batch: zero noise weight
    predicted = np.empty((n_nu, n_d), dtype=object)
    empirical = np.empty((n_nu, n_d), dtype=object)
    for i, nu in enumerate(nus):
        for j, d in enumerate(eta_lams):
            predicted[i, j] = stability_region(1.0, float(nu), float(d), S).value
        cfg = TwoPhaseConfig(eta=1.0, nu=float(nu), S=S, noise=noise) if nu > 0.0 else None
        p = np.ones(n_d)
        if cfg is not None:
            for _ in range(cycles):
                p = np.minimum(diloco_cycle(p, spec, cfg), OVERFLOW)
        row = np.where(p > 1.0, EMP_UNSTABLE, np.where(p < 1.0, EMP_STABLE, EMP_AMBIGUOUS))
        empirical[i, order] = row
    plain = (predicted == StabilityClass.STABLE.value) | (
        predicted == StabilityClass.UNSTABLE.value
    )
    marginal = ~plain
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            shifted = np.roll(np.roll(predicted, di, axis=0), dj, axis=1)
            disagree = shifted != predicted
            # roll wraps; edge cells only compare against true neighbors
            if di == 1:
                disagree[0, :] = False
            if di == -1:
                disagree[-1, :] = False
            if dj == 1:
                disagree[:, 0] = False
            if dj == -1:
                disagree[:, -1] = False
            marginal |= disagree
    return StabilityMap(
        eta_lams=eta_lams,
        nus=nus,
        S=S,
        cycles=cycles,
        predicted=predicted,
        empirical=empirical,
        marginal=marginal,
    )


def stability_mismatches(smap: StabilityMap) -> int:
    """Non-marginal cells where the iteration contradicts the inequality."""
    check = ~smap.marginal
    return int(np.sum(check & (smap.predicted != smap.empirical)))


def _fmt(x) -> str:
    if isinstance(x, bool) or isinstance(x, np.bool_):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_lines(path, header: tuple, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_surface_csv(path, result: SweepResult) -> None:
    rows = (
        (result.nus[i], result.etas[j], result.loss[i, j], bool(result.diverged[i, j]))
        for i in range(len(result.nus))
        for j in range(len(result.etas))
    )
    _write_lines(path, SURFACE_CSV_COLUMNS, rows)


def write_optimal_csv(path, points: list[OptimalEta]) -> None:
    rows = ((p.nu, p.eta_star, p.loss_star, p.boundary) for p in points)
    _write_lines(path, OPTIMAL_CSV_COLUMNS, rows)


def write_rate_csv(path, rows: list[dict]) -> None:
    _write_lines(path, RATE_CSV_COLUMNS, (tuple(r[c] for c in RATE_CSV_COLUMNS) for r in rows))


def write_theorem_csv(path, rows: list[dict]) -> None:
    _write_lines(path, THEOREM_CSV_COLUMNS, (tuple(r[c] for c in THEOREM_CSV_COLUMNS) for r in rows))


def write_stability_csv(path, smap: StabilityMap) -> None:
    rows = (
        (
            smap.nus[i],
            smap.eta_lams[j],
            smap.S,
            smap.predicted[i, j],
            smap.empirical[i, j],
            bool(smap.marginal[i, j]),
        )
        for i in range(len(smap.nus))
        for j in range(len(smap.eta_lams))
    )
    _write_lines(path, STABILITY_CSV_COLUMNS, rows)

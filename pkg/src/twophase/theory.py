"""Exact expected-loss dynamics for two-phase optimizers on linear regression.

Everything here works in the eigenbasis of the kernel.  The state is the
mode vector p with p_i = E[<v_i, z>^2] / lambda_i, where z is the residual
vector; the expected loss is

    L = (1/(2D)) sum_i lambda_i p_i.

One minibatch-SGD step maps p -> (A + B) p with

    A = diag((1 - eta*lambda_i)^2)
    B = (1/B - 1/D) * eta^2 * lam lam^T        (rank one)

which is the second-moment closure over uniform random B-subsets in a
Haar-typical eigenbasis.  A two-phase cycle (S inner steps, one outer step
with learning rate nu, R workers averaged) acts as

    p -> [(1-nu) + nu*(1-eta*lam)^S]^2 * p
         + (nu^2/R) * [T_S p - (1-eta*lam)^(2S) p],       T_S = (A + B)^S.

p vectors are plain float arrays, either block form (one entry per distinct
eigenvalue of the Spectrum) or expanded form (one entry per mode).  Block
form is exact, not an approximation: A is constant within an eigenvalue
block and B only sees the weighted trace, so block-constant p stays
block-constant.  All maps are applied as S structured steps; the only
dense matrix ever formed is dense_cycle_matrix, a cross-check tool.

Divergence is data, not an error: once values pass OVERFLOW the trajectory
helpers truncate and flag, and the raw maps simply return what IEEE gives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .spectrum import Spectrum

# Trajectories are truncated and flagged once any mode passes this.
OVERFLOW = 1e300

# Dense cycle matrices above this dimension are refused by default.
DENSE_CYCLE_CAP = 512

# A p vector: block form (len == number of distinct eigenvalues) or
# expanded form (len == D).
PVector = np.ndarray


@dataclass(frozen=True)
class NoiseModel:
    """Minibatch source: batch size B per worker, D modes, R workers."""

    B: int
    D: int
    R: int = 1

    def __post_init__(self):
        if self.B < 1 or self.D < 1 or self.R < 1:
            raise ValueError(f"B, D, R must be >= 1, got B={self.B} D={self.D} R={self.R}")
        if self.B > self.D:
            raise ValueError(f"batch B={self.B} larger than D={self.D}")

    @property
    def weight(self) -> float:
        """Per-step noise weight w = 1/B - 1/D; zero for full batch."""
        return 1.0 / self.B - 1.0 / self.D


@dataclass(frozen=True)
class TwoPhaseConfig:
    """Inner learning rate eta, outer learning rate nu, sync period S."""

    eta: float
    nu: float
    S: int
    noise: NoiseModel

    def __post_init__(self):
        if not (self.eta > 0.0) or not np.isfinite(self.eta):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")
        if self.nu < 0.0 or not np.isfinite(self.nu):
            raise ValueError(f"nu must be >= 0 and finite, got {self.nu}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")

    def asdict(self) -> dict:
        return {
            "eta": self.eta,
            "nu": self.nu,
            "S": self.S,
            "B": self.noise.B,
            "D": self.noise.D,
            "R": self.noise.R,
        }


def _modes(spec: Spectrum, p: PVector) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and multiplicity weights matching the form of p."""
    n_blocks = len(spec.entries)
    if p.shape == (n_blocks,):
        return spec.values, spec.counts.astype(float)
    if p.shape == (spec.dim,):
        return spec.expand(), np.ones(spec.dim)
    raise ValueError(
        f"p has shape {p.shape}; expected ({n_blocks},) block form or ({spec.dim},) expanded"
    )


def init_pvec_iid(spec: Spectrum, expanded: bool = False) -> PVector:
    """p for a standard-normal residual: p_i = 1/lambda_i, 0 on null modes."""
    lam = spec.expand() if expanded else spec.values
    return np.divide(1.0, lam, out=np.zeros_like(lam), where=lam > 0.0)


def loss_from_pvec(p: PVector, spec: Spectrum) -> float:
    """Expected loss (1/(2D)) sum_i lambda_i p_i (multiplicity-weighted)."""
    p = np.asarray(p, dtype=float)
    lam, mult = _modes(spec, p)
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.dot(mult * lam, p)) / (2.0 * spec.dim)


def sgd_step(p: PVector, spec: Spectrum, eta: float, noise: NoiseModel) -> PVector:
    """One minibatch step of the second-moment map, p -> (A + B) p."""
    p = np.asarray(p, dtype=float)
    lam, mult = _modes(spec, p)
    with np.errstate(over="ignore", invalid="ignore"):
        trace = np.dot(mult * lam, p)
        return (1.0 - eta * lam) ** 2 * p + noise.weight * eta * eta * lam * trace


def diloco_cycle(p: PVector, spec: Spectrum, cfg: TwoPhaseConfig) -> PVector:
    """One outer cycle with R workers: deterministic contraction plus 1/R noise.

    T_S p is computed by S structured sgd_step applications, never a matrix
    power.  The outer combination is evaluated so that nu = 1, R = 1
    collapses to exactly the S inner steps up to roundoff.
    """
    p = np.asarray(p, dtype=float)
    lam, _ = _modes(spec, p)
    with np.errstate(over="ignore", invalid="ignore"):
        m = (1.0 - cfg.eta * lam) ** cfg.S
        det = ((1.0 - cfg.nu) + cfg.nu * m) ** 2
        q = p
        for _ in range(cfg.S):
            q = sgd_step(q, spec, cfg.eta, cfg.noise)
        return det * p + (cfg.nu * cfg.nu / cfg.noise.R) * (q - m * m * p)


def la_cycle(p: PVector, spec: Spectrum, cfg: TwoPhaseConfig) -> PVector:
    """Single-worker cycle; requires R = 1 in the noise model."""
    if cfg.noise.R != 1:
        raise ValueError(f"la_cycle needs R = 1, got R = {cfg.noise.R}")
    return diloco_cycle(p, spec, cfg)


def iterate_cycles(
    spec: Spectrum,
    cfg: TwoPhaseConfig,
    cycles: int,
    p0: PVector | None = None,
) -> tuple[np.ndarray, bool]:
    """Loss after each of `cycles` cycles, truncated at overflow.

    Returns (losses, diverged); losses[0] is the initial loss, so the
    array has cycles+1 entries unless truncated.
    """
    p = init_pvec_iid(spec) if p0 is None else np.asarray(p0, dtype=float)
    losses = [loss_from_pvec(p, spec)]
    diverged = False
    for _ in range(cycles):
        p = diloco_cycle(p, spec, cfg)
        bad = not bool(np.isfinite(p).all()) or float(np.max(p, initial=0.0)) > OVERFLOW
        if not bad:
            val = loss_from_pvec(p, spec)
            bad = not math.isfinite(val) or val > OVERFLOW
        if bad:
            diverged = True
            break
        losses.append(val)
    return np.asarray(losses), diverged


@dataclass(frozen=True)
class CycleOperator:
    """A cycle map frozen for one (spectrum, config): diagonal deterministic
    part d(lambda) plus the implicitly represented noise bracket."""

    spectrum: Spectrum
    config: TwoPhaseConfig
    det_diag: np.ndarray  # d(lambda) per distinct eigenvalue

    def apply(self, p: PVector) -> PVector:
        return diloco_cycle(p, self.spectrum, self.config)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config.asdict(),
                "noise_weight": self.config.noise.weight,
                "det_diag": [
                    {"lam": float(v), "d": float(d)}
                    for v, d in zip(self.spectrum.values, self.det_diag)
                ],
            },
            sort_keys=True,
        )


def cycle_operator(spec: Spectrum, cfg: TwoPhaseConfig) -> CycleOperator:
    lam = spec.values
    m = (1.0 - cfg.eta * lam) ** cfg.S
    det = ((1.0 - cfg.nu) + cfg.nu * m) ** 2
    return CycleOperator(spectrum=spec, config=cfg, det_diag=det)


def dense_cycle_matrix(spec: Spectrum, cfg: TwoPhaseConfig, cap: int = DENSE_CYCLE_CAP) -> np.ndarray:
    """The full D x D cycle matrix, for cross-checks and eigenanalysis only."""
    D = spec.dim
    if D > cap:
        raise ValueError(f"dense cycle matrix of D={D} exceeds cap={cap}")
    lam = spec.expand()
    A = np.diag((1.0 - cfg.eta * lam) ** 2)
    Bm = cfg.noise.weight * cfg.eta * cfg.eta * np.outer(lam, lam)
    T = np.linalg.matrix_power(A + Bm, cfg.S)
    m = (1.0 - cfg.eta * lam) ** cfg.S
    det = ((1.0 - cfg.nu) + cfg.nu * m) ** 2
    return np.diag(det) + (cfg.nu * cfg.nu / cfg.noise.R) * (T - np.diag(m * m))


def noise_coefficient(s: int, cfg: TwoPhaseConfig) -> float:
    """Weight a_s of the order-s noise word in the cycle expansion:
    a_s = nu^2 eta^(2s) R^(s-1) / B_tot^s with B_tot = B*R."""
    if not (1 <= s <= cfg.S):
        raise ValueError(f"s must be in 1..S={cfg.S}, got {s}")
    B_tot = cfg.noise.B * cfg.noise.R
    return cfg.nu**2 * cfg.eta ** (2 * s) * cfg.noise.R ** (s - 1) / B_tot**s


def coefficient_ratio(
    s: int, loc: tuple[float, float], dil: tuple[float, float], R: int
) -> float:
    """Ratio of the R-worker coefficient to the single-worker one at fixed
    B_tot: (nu_dil/nu_loc)^2 * R^(s-1) * (eta_dil/eta_loc)^(2s).

    loc and dil are (nu, eta) pairs.
    """
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    nu_loc, eta_loc = loc
    nu_dil, eta_dil = dil
    return (nu_dil / nu_loc) ** 2 * R ** (s - 1) * (eta_dil / eta_loc) ** (2 * s)


def scaling_rule(loc: tuple[float, float], R: int) -> tuple[float, float]:
    """Match all noise coefficients across R at fixed B_tot:
    eta -> eta/sqrt(R), nu -> nu*sqrt(R) (the product nu*eta is preserved)."""
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    nu, eta = loc
    root = math.sqrt(R)
    return (nu * root, eta / root)


class StabilityClass(Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"
    STATIONARY = "stationary"

    @property
    def converges(self) -> bool:
        return self is StabilityClass.STABLE


def stability_region(eta: float, nu: float, lam: float, S: int) -> StabilityClass:
    """Deterministic (zero-noise) cycle stability for one mode.

    The per-cycle factor is [(1-nu) + nu*(1-eta*lam)^S]^2; it contracts iff

        1 - 2/nu < (1 - eta*lam)^S < 1      (both strict).

    Equality at either bound is MARGINAL; nu = 0 never moves and is
    STATIONARY rather than stable.
    """
    if nu < 0.0:
        raise ValueError(f"nu must be >= 0, got {nu}")
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if nu == 0.0:
        return StabilityClass.STATIONARY
    m = (1.0 - eta * lam) ** S
    lo = 1.0 - 2.0 / nu
    if m == 1.0 or m == lo:
        return StabilityClass.MARGINAL
    if lo < m < 1.0:
        return StabilityClass.STABLE
    return StabilityClass.UNSTABLE


def theorem1_check(
    lam0: float,
    D: int,
    S: int,
    eta: float,
    nu: float,
    B_tot: int,
    R_list: list[int],
) -> list[tuple[int, float]]:
    """Largest eigenvalue of the isotropic cycle matrix per worker count.

    At fixed total batch B_tot = B*R the sequence is strictly increasing
    in R; callers assert that.  R must divide B_tot.
    """
    out = []
    for R in R_list:
        if B_tot % R != 0:
            raise ValueError(f"R={R} does not divide B_tot={B_tot}")
        spec = Spectrum(((lam0, D),))
        cfg = TwoPhaseConfig(eta=eta, nu=nu, S=S, noise=NoiseModel(B=B_tot // R, D=D, R=R))
        F = dense_cycle_matrix(spec, cfg, cap=max(D, DENSE_CYCLE_CAP))
        top = float(np.linalg.eigvalsh(0.5 * (F + F.T))[-1])
        out.append((R, top))
    return out

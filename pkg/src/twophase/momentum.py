"""Deterministic spectral analysis of momentum variants, one eigenmode at a time.

Full-batch dynamics decouple across kernel eigenmodes, so every optimizer
here reduces to a small constant matrix per eigenvalue lambda: 2x2 for a
single momentum optimizer (residual z and momentum k), 4x4 for momentum
inside and outside a two-phase loop (z~, k~, z, k), 3x3 for weight-EMA and
for gradient-primal averaging.  Convergence rates come from the spectral
radius: r_cycle = -log rho, r_step = r_cycle / S.

Momentum is parameterized in EMA units,

    k' = (1-beta) g + beta k,       z' = z - eta * ((1-beta) g + beta k')-style,

so the traditional-units learning rate is (1-beta)*eta; converters are at
the bottom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class MomentumFlavor(Enum):
    EMA = "ema"
    NESTEROV = "nesterov"


class SyncVariant(Enum):
    """What happens to the inner momentum state at the start of a cycle."""

    KEEP = "keep_inner_momentum"
    RESET = "reset_inner_momentum"


class EigensolveError(RuntimeError):
    """Eigendecomposition failed to converge; carries the matrix."""

    def __init__(self, matrix: np.ndarray):
        super().__init__(f"eigensolve did not converge for\n{matrix!r}")
        self.matrix = matrix


@dataclass(frozen=True)
class ModeParams:
    """One eigenmode of a two-phase momentum run."""

    lam: float
    eta: float
    nu: float
    S: int
    beta_in: float
    beta_out: float
    inner: MomentumFlavor = MomentumFlavor.EMA
    outer: MomentumFlavor = MomentumFlavor.EMA
    sync: SyncVariant = SyncVariant.KEEP

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        for name, beta in (("beta_in", self.beta_in), ("beta_out", self.beta_out)):
            if not (0.0 <= beta < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {beta}")


def single_step_matrix(lam: float, eta: float, beta: float, flavor: MomentumFlavor) -> np.ndarray:
    """One momentum-SGD step on (z, k) for a single eigenmode."""
    if flavor is MomentumFlavor.EMA:
        return np.array(
            [
                [1.0 - eta * (1.0 - beta) * lam, -eta * beta],
                [(1.0 - beta) * lam, beta],
            ]
        )
    return np.array(
        [
            [1.0 - (1.0 - beta * beta) * eta * lam, -eta * beta * beta],
            [(1.0 - beta) * lam, beta],
        ]
    )


def complex_region(beta: float, flavor: MomentumFlavor) -> tuple[float, float]:
    """Open interval of eta*lam where the 2x2 has complex eigenvalues.

    Computed from the exact discriminant roots:

        EMA:       ((1-sqrt(beta))/(1+sqrt(beta)), (1+sqrt(beta))/(1-sqrt(beta)))
        Nesterov:  ((1-beta)/(1+beta)^2,            1/(1-beta))

    Empty (equal endpoints) at beta = 0.  See complex_region_asymptotic for
    the commonly quoted large-beta endpoints.
    """
    if not (0.0 <= beta < 1.0):
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if flavor is MomentumFlavor.EMA:
        root = math.sqrt(beta)
        return ((1.0 - root) / (1.0 + root), (1.0 + root) / (1.0 - root))
    return ((1.0 - beta) / (1.0 + beta) ** 2, 1.0 / (1.0 - beta))


def complex_region_asymptotic(beta: float, flavor: MomentumFlavor) -> tuple[float, float]:
    """The beta -> 1 approximation of the window; exact for Nesterov.

    EMA: ((1-beta)/4, 2(1+beta)/(1-beta)).
    """
    if not (0.0 <= beta < 1.0):
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if flavor is MomentumFlavor.EMA:
        return ((1.0 - beta) / 4.0, 2.0 * (1.0 + beta) / (1.0 - beta))
    return complex_region(beta, flavor)


def inner_cycle_matrix(params: ModeParams) -> np.ndarray:
    """F = (single inner step)^S on (z~, k~)."""
    step = single_step_matrix(params.lam, params.eta, params.beta_in, params.inner)
    return np.linalg.matrix_power(step, params.S)


def effective_eigenvalue(params: ModeParams) -> float:
    """1 - F_11: what the outer optimizer sees in place of eta*lam."""
    return 1.0 - float(inner_cycle_matrix(params)[0, 0])


def sla_reduced_matrix(params: ModeParams) -> np.ndarray:
    """2x2 outer-cycle map on (z, k) valid when inner momentum is reset.

    With k~ zeroed each cycle the inner phase only feeds F_11 z back, and
    the cycle is a plain momentum step with eta -> nu, lam -> 1 - F_11.
    """
    if params.sync is not SyncVariant.RESET:
        raise ValueError("reduced matrix assumes sync = reset_inner_momentum")
    x = effective_eigenvalue(params)
    nu, bo = params.nu, params.beta_out
    if params.outer is MomentumFlavor.EMA:
        return np.array(
            [
                [1.0 - nu * (1.0 - bo) * x, -nu * bo],
                [(1.0 - bo) * x, bo],
            ]
        )
    return np.array(
        [
            [1.0 - nu * (1.0 - bo * bo) * x, -nu * bo * bo],
            [(1.0 - bo) * x, bo],
        ]
    )


def sla_full_matrix(params: ModeParams) -> np.ndarray:
    """4x4 cycle map on (z~, k~, z, k): T_sync @ T_out @ T_in.

    T_in advances the inner pair S steps; T_out takes one outer momentum
    step on (z, k) using the displaced inner residual z~; T_sync copies the
    new z into z~ and either keeps or zeroes k~.
    """
    nu, bo = params.nu, params.beta_out
    T_in = np.eye(4)
    T_in[:2, :2] = inner_cycle_matrix(params)
    T_out = np.eye(4)
    if params.outer is MomentumFlavor.EMA:
        T_out[2] = [nu * (1.0 - bo), 0.0, 1.0 - nu * (1.0 - bo), -nu * bo]
    else:
        T_out[2] = [nu * (1.0 - bo * bo), 0.0, 1.0 - nu * (1.0 - bo * bo), -nu * bo * bo]
    T_out[3] = [-(1.0 - bo), 0.0, 1.0 - bo, bo]
    T_sync = np.eye(4)
    T_sync[0] = [0.0, 0.0, 1.0, 0.0]
    if params.sync is SyncVariant.RESET:
        T_sync[1] = [0.0, 0.0, 0.0, 0.0]
    return T_sync @ T_out @ T_in


def weight_ema_matrix(lam: float, eta: float, beta1: float, beta_ema: float) -> np.ndarray:
    """3x3 map on (z, k, z_ema): EMA-momentum step followed by weight averaging.

    Block lower triangular, so the spectrum is exactly the 2x2 momentum
    eigenvalues plus beta_ema: averaged weights never change the training
    trajectory.
    """
    step = np.eye(3)
    step[:2, :2] = single_step_matrix(lam, eta, beta1, MomentumFlavor.EMA)
    avg = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0 - beta_ema, 0.0, beta_ema],
        ]
    )
    return avg @ step


def gpa_matrix(lam: float, eta: float, mu_x: float, mu_y: float) -> np.ndarray:
    """3x3 gradient-primal-averaging map on (y, z, x) for d(y) = -lam*y.

    y is the gradient-evaluation point mu_y*x + (1-mu_y)*z, z the fast
    iterate, x the slow average.
    """
    c = mu_x * mu_y
    return np.array(
        [
            [-eta * lam * (1.0 - c), 1.0 - c, c],
            [-eta * lam, 1.0, 0.0],
            [-(1.0 - mu_x) * eta * lam, 1.0 - mu_x, mu_x],
        ]
    )


def gpa_khat(state: np.ndarray, mu_x: float, mu_y: float) -> float:
    """Auxiliary momentum k^ = (-y + (1-mu_x*mu_y) z + mu_x*mu_y x)/(mu_x*mu_y).

    Satisfies k^' = mu_x k^ + (1-mu_x) eta d(y) and
    y' = y + mu_y k^' + (1-mu_y) eta d(y), which is the Nesterov shape with
    the two couplings decoupled.
    """
    c = mu_x * mu_y
    if c == 0.0:
        raise ValueError("k^ needs mu_x*mu_y != 0")
    y, z, x = state
    return (-y + (1.0 - c) * z + c * x) / c


@dataclass(frozen=True)
class ModeSystem:
    """Eigenstructure of one mode matrix plus derived rates."""

    matrix: np.ndarray
    eigenvalues: np.ndarray  # complex
    rho: float
    r_cycle: float
    r_step: float
    s_effective: int
    residual: float  # max |det(M - w I)| over eigenvalues, scaled

    @property
    def diverged(self) -> bool:
        return self.rho >= 1.0


def _eigvals(M: np.ndarray) -> np.ndarray:
    if M.shape == (2, 2):
        # closed form; keeps the complex-window plateau exact to roundoff
        tau = M[0, 0] + M[1, 1]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        disc = complex(tau * tau - 4.0 * det)
        root = np.sqrt(disc)
        return np.array([(tau + root) / 2.0, (tau - root) / 2.0])
    try:
        return np.linalg.eigvals(M)
    except np.linalg.LinAlgError as err:
        raise EigensolveError(M) from err


def spectral_summary(M: np.ndarray, s_effective: int = 1) -> ModeSystem:
    """Eigenvalues, spectral radius and decay rates of a mode matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"mode matrix must be square, got shape {M.shape}")
    if s_effective < 1:
        raise ValueError(f"s_effective must be >= 1, got {s_effective}")
    w = _eigvals(M)
    scale = max(1.0, float(np.linalg.norm(M))) ** M.shape[0]
    residual = max(
        abs(complex(np.linalg.det(M.astype(complex) - wi * np.eye(M.shape[0])))) for wi in w
    ) / scale
    if residual > 1e-6:
        raise EigensolveError(M)
    rho = float(np.max(np.abs(w)))
    r_cycle = -math.log(rho) if rho > 0.0 else math.inf
    return ModeSystem(
        matrix=M,
        eigenvalues=w,
        rho=rho,
        r_cycle=r_cycle,
        r_step=r_cycle / s_effective,
        s_effective=s_effective,
        residual=residual,
    )


def critical_outer_rate(beta_out: float) -> float:
    """nu at which the outer Nesterov per-step rate stops decaying with S."""
    if not (0.0 <= beta_out < 1.0):
        raise ValueError(f"beta_out must be in [0, 1), got {beta_out}")
    return 1.0 / (1.0 - beta_out)


def traditional_lr(eta_ema: float, beta: float) -> float:
    """EMA-units learning rate -> traditional-units (k' = g + beta*k)."""
    return (1.0 - beta) * eta_ema


def ema_units_lr(eta_traditional: float, beta: float) -> float:
    if beta >= 1.0:
        raise ValueError(f"beta must be < 1, got {beta}")
    return eta_traditional / (1.0 - beta)

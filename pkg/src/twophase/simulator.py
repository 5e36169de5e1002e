"""Monte Carlo simulation of two-phase SGD in residual (function) space.

The residual vector z = f(theta) - y evolves as

    z' = z - eta * (D/B) * Theta[:, batch] @ z[batch]

for a uniformly random B-subset per step; weights, features and targets
never appear.  A cycle copies z to R workers, runs S independent inner
steps each, then moves the outer iterate: z <- (1-nu) z + nu * mean_k z~_k.
That form makes nu = 1, R = 1 collapse to plain SGD bitwise, which the
tests rely on.

Randomness is counter-based: every stream is Philox seeded by the key
(seed, replica, lane, cycle) where lane 0 draws the replica's z_0 and lane
k+1 feeds worker k.  Streams never depend on execution order, so replicas
can run in parallel with byte-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .spectrum import NtkMatrix
from .theory import OVERFLOW, TwoPhaseConfig

_INIT_LANE = 0

PROV_THEORY = "theory"
PROV_MC_MEAN = "montecarlo-mean"
PROV_MC_REPLICA = "montecarlo-replica"

TRAJECTORY_CSV_COLUMNS = (
    "cycle",
    "loss_mean",
    "loss_se",
    "provenance",
    "R",
    "B",
    "D",
    "S",
    "eta",
    "nu",
    "seed",
)


@dataclass(frozen=True)
class ReplicaPlan:
    """How many independent runs to average and for how long."""

    base_seed: int
    replicas: int
    cycles: int

    def __post_init__(self):
        if self.base_seed < 0:
            raise ValueError(f"base_seed must be >= 0, got {self.base_seed}")
        if self.replicas < 1 or self.cycles < 1:
            raise ValueError(
                f"replicas and cycles must be >= 1, got {self.replicas}, {self.cycles}"
            )


@dataclass(frozen=True)
class TrajectoryRecord:
    """Per-cycle losses from one source (theory, one replica, or a mean).

    losses[0] is the loss at initialization; a diverged run is truncated
    after its last finite value.  stderr is present only for mean records.
    """

    losses: np.ndarray
    provenance: str
    config: dict = field(default_factory=dict)  # R, B, D, S, eta, nu, seed + extras
    diverged: bool = False
    replicas: int | None = None
    stderr: np.ndarray | None = None


def stream(seed: int, replica: int, lane: int, cycle: int) -> np.random.Generator:
    """The counter-keyed generator for one (replica, lane, cycle) slot."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replica, lane, cycle])))


def sample_projection(D: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a uniformly random B-subset of the D modes, ascending.

    Sorted so the subset has one canonical representation; at B = D every
    draw is then exactly arange(D) and the step is bitwise full-batch.
    """
    if not (1 <= B <= D):
        raise ValueError(f"need 1 <= B <= D, got B={B} D={D}")
    return np.sort(rng.choice(D, size=B, replace=False))


def projected_step(z: np.ndarray, ntk: NtkMatrix, eta: float, B: int, idx: np.ndarray) -> np.ndarray:
    """One SGD step on the residual restricted to the given batch indices."""
    return z - (eta * ntk.dim / B) * (ntk.matrix[:, idx] @ z[idx])


def sgd_inner_step(
    z: np.ndarray, ntk: NtkMatrix, eta: float, B: int, rng: np.random.Generator
) -> np.ndarray:
    return projected_step(z, ntk, eta, B, sample_projection(ntk.dim, B, rng))


def _loss(z: np.ndarray, D: int) -> float:
    return 0.5 * float(z @ z) / D


def _run_replica(
    ntk: NtkMatrix, cfg: TwoPhaseConfig, plan: ReplicaPlan, replica: int, init_seed: int
) -> TrajectoryRecord:
    D = ntk.dim
    R, B, S = cfg.noise.R, cfg.noise.B, cfg.S
    z = stream(init_seed, replica, _INIT_LANE, 0).standard_normal(D)
    losses = [_loss(z, D)]
    diverged = False
    for cycle in range(plan.cycles):
        ends = np.empty((R, D))
        for k in range(R):
            rng = stream(plan.base_seed, replica, k + 1, cycle)
            zw = z
            for _ in range(S):
                zw = sgd_inner_step(zw, ntk, cfg.eta, B, rng)
            ends[k] = zw
        z = (1.0 - cfg.nu) * z + cfg.nu * ends.mean(axis=0)
        val = _loss(z, D)
        if not np.isfinite(val) or val > OVERFLOW or not np.isfinite(z).all():
            diverged = True
            break
        losses.append(val)
    meta = dict(cfg.asdict(), seed=plan.base_seed, replica=replica)
    return TrajectoryRecord(
        losses=np.asarray(losses),
        provenance=PROV_MC_REPLICA,
        config=meta,
        diverged=diverged,
    )


def run_diloco(
    ntk: NtkMatrix,
    cfg: TwoPhaseConfig,
    plan: ReplicaPlan,
    init_seed: int | None = None,
    n_jobs: int = 1,
) -> tuple[TrajectoryRecord, list[TrajectoryRecord]]:
    """Simulate `plan.replicas` independent runs and average them.

    Returns (mean record, per-replica records).  The mean is truncated to
    the shortest replica and flagged diverged if any replica overflowed.
    """
    if cfg.noise.D != ntk.dim:
        raise ValueError(f"noise model D={cfg.noise.D} does not match kernel D={ntk.dim}")
    if init_seed is None:
        init_seed = plan.base_seed
    if n_jobs == 1:
        reps = [_run_replica(ntk, cfg, plan, r, init_seed) for r in range(plan.replicas)]
    else:
        reps = Parallel(n_jobs=n_jobs if n_jobs > 0 else -1)(
            delayed(_run_replica)(ntk, cfg, plan, r, init_seed) for r in range(plan.replicas)
        )
    n_keep = min(len(r.losses) for r in reps)
    stack = np.stack([r.losses[:n_keep] for r in reps])
    with np.errstate(over="ignore"):  # near-OVERFLOW tails square to inf SE
        mean = stack.mean(axis=0)
        if plan.replicas > 1:
            se = stack.std(axis=0, ddof=1) / np.sqrt(plan.replicas)
        else:
            se = np.zeros(n_keep)
    record = TrajectoryRecord(
        losses=mean,
        provenance=PROV_MC_MEAN,
        config=dict(cfg.asdict(), seed=plan.base_seed),
        diverged=any(r.diverged for r in reps),
        replicas=plan.replicas,
        stderr=se,
    )
    return record, reps


def run_la(
    ntk: NtkMatrix,
    cfg: TwoPhaseConfig,
    plan: ReplicaPlan,
    init_seed: int | None = None,
    n_jobs: int = 1,
) -> tuple[TrajectoryRecord, list[TrajectoryRecord]]:
    """Single-worker two-phase run; requires R = 1."""
    if cfg.noise.R != 1:
        raise ValueError(f"run_la needs R = 1, got R = {cfg.noise.R}")
    return run_diloco(ntk, cfg, plan, init_seed=init_seed, n_jobs=n_jobs)


def run_sgd(
    ntk: NtkMatrix,
    eta: float,
    B: int,
    plan: ReplicaPlan,
    init_seed: int | None = None,
    n_jobs: int = 1,
) -> tuple[TrajectoryRecord, list[TrajectoryRecord]]:
    """Plain SGD: the R = 1, nu = 1, S = 1 special case, one step per cycle."""
    from .theory import NoiseModel

    cfg = TwoPhaseConfig(eta=eta, nu=1.0, S=1, noise=NoiseModel(B=B, D=ntk.dim, R=1))
    return run_diloco(ntk, cfg, plan, init_seed=init_seed, n_jobs=n_jobs)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def trajectory_csv_lines(records: list[TrajectoryRecord]) -> list[str]:
    """Rows `cycle, loss_mean, loss_se, provenance, R, B, D, S, eta, nu, seed`.

    loss_se is empty except for mean records; float formatting is repr
    (shortest round-trip), so identical records give identical bytes.
    """
    lines = [",".join(TRAJECTORY_CSV_COLUMNS)]
    for rec in records:
        c = rec.config
        tail = [
            rec.provenance,
            str(c.get("R", "")),
            str(c.get("B", "")),
            str(c.get("D", "")),
            str(c.get("S", "")),
            _fmt(c.get("eta", "")),
            _fmt(c.get("nu", "")),
            str(c.get("seed", "")),
        ]
        for i, val in enumerate(rec.losses):
            se = _fmt(rec.stderr[i]) if rec.stderr is not None else ""
            lines.append(",".join([str(i), _fmt(val), se] + tail))
    return lines


def write_trajectory_csv(path, records: list[TrajectoryRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(trajectory_csv_lines(records)) + "\n")

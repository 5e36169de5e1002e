"""Batch front end: named experiment pipelines driven by JSON configs.

    twophase run --config experiment.json [--out DIR] [--seed N]
                 [--threads N] [--dense-cap N]
    twophase list-experiments

Each run validates its config up front (unknown keys are rejected, every
message names the offending key), writes the experiment's CSV/JSON
artifacts plus a manifest.json with the fully resolved config, and exits
0 on success, 2 on a config error, 3 on a numerical failure.  Diverged
trajectories are data, not failures.  Outputs are byte-reproducible from
the manifest: no timestamps, repr floats, deterministic row order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .momentum import EigensolveError, ModeParams, MomentumFlavor, SyncVariant
from .simulator import (
    PROV_THEORY,
    ReplicaPlan,
    TrajectoryRecord,
    run_diloco,
    write_trajectory_csv,
)
from .spectrum import (
    DENSE_NTK_CAP,
    Spectrum,
    make_isotropic,
    make_power_law,
    make_spiked,
    realize_ntk,
)
from .sweeps import (
    STABILITY_CSV_COLUMNS,
    GridSpec,
    _write_lines,
    first_divergent_eta,
    la_vs_sgd_gain,
    linear_grid,
    log_grid,
    loss_grid,
    optimal_eta_curve,
    r_scaling_experiment,
    sla_rate_sweep,
    stability_map,
    theorem_scan,
    write_optimal_csv,
    write_rate_csv,
    write_surface_csv,
    write_theorem_csv,
)
from .theory import NoiseModel, TwoPhaseConfig, iterate_cycles


class ConfigError(Exception):
    """Invalid experiment config; the message names the offending key."""


_REQUIRED = object()

_FLAVORS = {"ema": MomentumFlavor.EMA, "nesterov": MomentumFlavor.NESTEROV}
_SYNCS = {"keep": SyncVariant.KEEP, "reset": SyncVariant.RESET}


# ---------------------------------------------------------------------------
# typed config access


def _check_keys(obj: dict, allowed, where: str = "") -> None:
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{where}unknown key {k!r}")


def _resolve(cfg: dict, schema: dict) -> dict:
    _check_keys(cfg, set(schema) | {"experiment", "out", "seed"})
    out = {}
    for key, default in schema.items():
        if key in cfg:
            out[key] = cfg[key]
        elif default is _REQUIRED:
            raise ConfigError(f"missing key {key!r}")
        else:
            out[key] = default
    return out


def _get_int(cfg: dict, key: str, lo: int | None = None) -> int:
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{key}: expected an integer, got {val!r}")
    if lo is not None and val < lo:
        raise ConfigError(f"{key}: must be >= {lo}, got {val}")
    return val


def _get_float(cfg: dict, key: str, lo: float | None = None, lo_open: bool = False) -> float:
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {val!r}")
    val = float(val)
    if lo is not None and (val < lo or (lo_open and val == lo)):
        op = ">" if lo_open else ">="
        raise ConfigError(f"{key}: must be {op} {lo}, got {val}")
    return val


def _get_bool(cfg: dict, key: str) -> bool:
    val = cfg[key]
    if not isinstance(val, bool):
        raise ConfigError(f"{key}: expected true or false, got {val!r}")
    return val


def _get_list(cfg: dict, key: str) -> list:
    val = cfg[key]
    if not isinstance(val, list) or not val:
        raise ConfigError(f"{key}: expected a non-empty list, got {val!r}")
    return val


def _get_int_list(cfg: dict, key: str, lo: int = 1) -> list[int]:
    return [_get_int({key: v}, key, lo=lo) for v in _get_list(cfg, key)]


def _get_float_list(cfg: dict, key: str) -> list[float]:
    return [_get_float({key: v}, key) for v in _get_list(cfg, key)]


def _get_choice(cfg: dict, key: str, mapping: dict):
    val = cfg[key]
    if not isinstance(val, str) or val not in mapping:
        raise ConfigError(f"{key}: must be one of {sorted(mapping)}, got {val!r}")
    return mapping[val]


def _get_choices(cfg: dict, key: str, mapping: dict) -> list:
    return [_get_choice({key: v}, key, mapping) for v in _get_list(cfg, key)]


def _get_grid(cfg: dict, key: str, default_scale: str) -> np.ndarray:
    obj = cfg[key]
    if not isinstance(obj, dict):
        raise ConfigError(f"{key}: expected an object with min, max, count")
    _check_keys(obj, {"min", "max", "count", "scale"}, where=f"{key}: ")
    axis = key[: -len("_grid")]
    for field in ("min", "max", "count"):
        if field not in obj:
            raise ConfigError(f"{key}: missing {field}")
    count = _get_int(obj, "count")
    if count < 2:
        raise ConfigError(f"{axis} grid: count must be ≥ 2")
    scale = obj.get("scale", default_scale)
    if scale not in ("log", "linear"):
        raise ConfigError(f'{key}.scale: must be "log" or "linear", got {scale!r}')
    lo, hi = _get_float(obj, "min"), _get_float(obj, "max")
    try:
        grid = log_grid(lo, hi, count) if scale == "log" else linear_grid(lo, hi, count)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err
    cfg[key] = {"min": lo, "max": hi, "count": count, "scale": scale}
    return grid


def _get_spectrum(cfg: dict, key: str = "spectrum") -> Spectrum:
    obj = cfg[key]
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"{key}: expected an object with a kind field")
    kind = obj["kind"]
    fields = {
        "isotropic": {"D", "value"},
        "spiked": {"D", "bulk_frac", "bulk_val", "spike_ratio"},
        "power_law": {"D", "alpha"},
        "explicit": {"entries"},
    }
    if kind not in fields:
        raise ConfigError(f"{key}.kind: must be one of {sorted(fields)}, got {kind!r}")
    _check_keys(obj, fields[kind] | {"kind"}, where=f"{key}: ")
    try:
        if kind == "isotropic":
            spec = make_isotropic(_get_int(obj, "D", lo=1), value=_get_float(obj, "value") if "value" in obj else 1.0)
            obj.setdefault("value", 1.0)
        elif kind == "spiked":
            spec = make_spiked(
                _get_int(obj, "D", lo=2),
                _get_float(obj, "bulk_frac"),
                _get_float(obj, "bulk_val"),
                _get_float(obj, "spike_ratio"),
            )
        elif kind == "power_law":
            spec = make_power_law(_get_int(obj, "D", lo=1), _get_float(obj, "alpha"))
        else:
            entries = _get_list(obj, "entries")
            spec = Spectrum(tuple((float(v), int(c)) for v, c in entries))
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{key}: {err}") from err
    return spec


def _wrap_value_errors(fn, *args, **kwargs):
    """Domain validation errors inside library calls are config errors."""
    try:
        return fn(*args, **kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------------------
# experiment runners


@dataclass(frozen=True)
class RunContext:
    out_dir: str
    seed: int
    threads: int  # joblib n_jobs; 0 on the command line means all cores
    dense_cap: int | None

    @property
    def n_jobs(self) -> int:
        return -1 if self.threads == 0 else self.threads

    @property
    def ntk_cap(self) -> int:
        return self.dense_cap if self.dense_cap is not None else DENSE_NTK_CAP

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)


_FIG1_DEFAULTS = {
    "spectrum": {
        "kind": "spiked",
        "D": 100,
        "bulk_frac": 0.99,
        "bulk_val": 1.0,
        "spike_ratio": 20.0,
    },
    "B": 20,
    "R": 1,
    "S": 10,
    "cycles": 1,
    "eta_grid": {"min": 1e-3, "max": 0.5, "count": 40, "scale": "log"},
    "nu_grid": {"min": 0.0, "max": 4.0, "count": 40, "scale": "linear"},
}


def _surface_grid(cfg: dict) -> GridSpec:
    spec = _get_spectrum(cfg)
    noise = _wrap_value_errors(
        NoiseModel, B=_get_int(cfg, "B", lo=1), D=spec.dim, R=_get_int(cfg, "R", lo=1)
    )
    return _wrap_value_errors(
        GridSpec,
        etas=_get_grid(cfg, "eta_grid", "log"),
        nus=_get_grid(cfg, "nu_grid", "linear"),
        spectrum=spec,
        noise=noise,
        S=_get_int(cfg, "S", lo=1),
        cycles=_get_int(cfg, "cycles", lo=1),
    )


def _run_fig1_surface(cfg: dict, ctx: RunContext) -> list[str]:
    grid = _surface_grid(cfg)
    result = _wrap_value_errors(loss_grid, grid)
    write_surface_csv(ctx.path("surface.csv"), result)
    write_optimal_csv(ctx.path("optimal_eta.csv"), optimal_eta_curve(result))
    gain = _wrap_value_errors(la_vs_sgd_gain, grid)
    with open(ctx.path("gain.json"), "w") as fh:
        json.dump(asdict(gain), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return ["surface.csv", "optimal_eta.csv", "gain.json"]


def _run_fig1_nu_curve(cfg: dict, ctx: RunContext) -> list[str]:
    result = _wrap_value_errors(loss_grid, _surface_grid(cfg))
    write_optimal_csv(ctx.path("nu_curve.csv"), optimal_eta_curve(result))
    return ["nu_curve.csv"]


def _run_sweep(cfg: dict, ctx: RunContext) -> list[str]:
    result = _wrap_value_errors(loss_grid, _surface_grid(cfg))
    write_surface_csv(ctx.path("surface.csv"), result)
    write_optimal_csv(ctx.path("optimal_eta.csv"), optimal_eta_curve(result))
    return ["surface.csv", "optimal_eta.csv"]


def _run_fig2_rscaling(cfg: dict, ctx: RunContext) -> list[str]:
    D = _get_int(cfg, "D", lo=1)
    spectrum = _get_spectrum(cfg) if cfg["spectrum"] is not None else make_isotropic(D)
    if cfg["spectrum"] is None:
        cfg["spectrum"] = {"kind": "isotropic", "D": D, "value": 1.0}
    B_tot = _get_int(cfg, "B_tot", lo=1)
    R_list = _get_int_list(cfg, "R_list")
    S = _get_int(cfg, "S", lo=1)
    nu0 = _get_float(cfg, "nu0", lo=0.0)
    cycles = _get_int(cfg, "cycles", lo=1)
    etas = _get_grid(cfg, "eta_grid", "log")
    rules = _get_choices(cfg, "rules", {"fixed": "fixed", "sqrt_rule": "sqrt_rule"})
    replicas = _get_int(cfg, "replicas", lo=0)
    budget = _get_int(cfg, "divergence_budget", lo=0)
    plan = ReplicaPlan(base_seed=ctx.seed, replicas=replicas, cycles=cycles) if replicas else None
    records = []
    for rule in rules:
        records += _wrap_value_errors(
            r_scaling_experiment,
            D,
            B_tot,
            R_list,
            etas,
            rule,
            cycles=cycles,
            S=S,
            nu0=nu0,
            spectrum=spectrum,
            mc_plan=plan,
            ntk_seed=ctx.seed,
            n_jobs=ctx.n_jobs,
        )
    write_trajectory_csv(ctx.path("trajectories.csv"), records)
    outputs = ["trajectories.csv"]
    if budget:
        rows = []
        for rule in rules:
            scan = _wrap_value_errors(
                r_scaling_experiment,
                D,
                B_tot,
                R_list,
                etas,
                rule,
                cycles=budget,
                S=S,
                nu0=nu0,
                spectrum=spectrum,
            )
            for R in R_list:
                rows.append((rule, R, first_divergent_eta(scan, R)))
        _write_lines(ctx.path("first_divergent.csv"), ("rule", "R", "eta_first_diverged"), rows)
        outputs.append("first_divergent.csv")
    return outputs


def _run_fig3_rates(cfg: dict, ctx: RunContext) -> list[str]:
    template = _wrap_value_errors(
        ModeParams,
        lam=_get_float(cfg, "lam", lo=0.0),
        eta=_get_float(cfg, "eta"),
        nu=1.0,
        S=1,
        beta_in=_get_float(cfg, "beta_in"),
        beta_out=_get_float(cfg, "beta_out"),
        inner=_get_choice(cfg, "inner", _FLAVORS),
    )
    rows = sla_rate_sweep(
        template,
        _get_int_list(cfg, "S_list"),
        _get_float_list(cfg, "nu_list"),
        outer_flavors=_get_choices(cfg, "outer_flavors", _FLAVORS),
        sync_variants=_get_choices(cfg, "sync_variants", _SYNCS),
    )
    write_rate_csv(ctx.path("rates.csv"), rows)
    return ["rates.csv"]


def _run_theorem1(cfg: dict, ctx: RunContext) -> list[str]:
    rows = _wrap_value_errors(
        theorem_scan,
        _get_float(cfg, "lam0", lo=0.0, lo_open=True),
        _get_int(cfg, "D", lo=1),
        _get_int(cfg, "S", lo=1),
        _get_float(cfg, "eta", lo=0.0, lo_open=True),
        _get_float(cfg, "nu", lo=0.0),
        _get_int(cfg, "B_tot", lo=1),
        _get_int_list(cfg, "R_list"),
    )
    write_theorem_csv(ctx.path("theorem1.csv"), rows)
    return ["theorem1.csv"]


def _run_simulate(cfg: dict, ctx: RunContext) -> list[str]:
    spectrum = _get_spectrum(cfg)
    noise = _wrap_value_errors(
        NoiseModel, B=_get_int(cfg, "B", lo=1), D=spectrum.dim, R=_get_int(cfg, "R", lo=1)
    )
    tp_cfg = _wrap_value_errors(
        TwoPhaseConfig,
        eta=_get_float(cfg, "eta", lo=0.0, lo_open=True),
        nu=_get_float(cfg, "nu", lo=0.0),
        S=_get_int(cfg, "S", lo=1),
        noise=noise,
    )
    plan = _wrap_value_errors(
        ReplicaPlan,
        base_seed=ctx.seed,
        replicas=_get_int(cfg, "replicas", lo=1),
        cycles=_get_int(cfg, "cycles", lo=1),
    )
    ntk_seed = _get_int(cfg, "ntk_seed", lo=0) if cfg["ntk_seed"] is not None else ctx.seed
    if cfg["ntk_seed"] is None:
        cfg["ntk_seed"] = ntk_seed
    ntk = _wrap_value_errors(realize_ntk, spectrum, seed=ntk_seed, cap=ctx.ntk_cap)
    mean, reps = run_diloco(ntk, tp_cfg, plan, n_jobs=ctx.n_jobs)
    records = []
    if _get_bool(cfg, "theory"):
        losses, diverged = iterate_cycles(spectrum, tp_cfg, plan.cycles)
        records.append(
            TrajectoryRecord(
                losses=losses,
                provenance=PROV_THEORY,
                config=dict(tp_cfg.asdict(), seed=""),
                diverged=diverged,
            )
        )
    records.append(mean)
    if _get_bool(cfg, "per_replica"):
        records += reps
    write_trajectory_csv(ctx.path("trajectories.csv"), records)
    return ["trajectories.csv"]


def _run_stability_map(cfg: dict, ctx: RunContext) -> list[str]:
    d_grid = _get_grid(cfg, "eta_lam_grid", "linear")
    nu_grid = _get_grid(cfg, "nu_grid", "linear")
    cycles = _get_int(cfg, "cycles", lo=1)
    rows = []
    for S in _get_int_list(cfg, "S_list"):
        smap = _wrap_value_errors(stability_map, d_grid, nu_grid, S, cycles=cycles)
        for i in range(len(smap.nus)):
            for j in range(len(smap.eta_lams)):
                rows.append(
                    (
                        smap.nus[i],
                        smap.eta_lams[j],
                        S,
                        smap.predicted[i, j],
                        smap.empirical[i, j],
                        bool(smap.marginal[i, j]),
                    )
                )
    _write_lines(ctx.path("stability.csv"), STABILITY_CSV_COLUMNS, rows)
    return ["stability.csv"]


# name -> (description, schema, runner); insertion order is the listing order
EXPERIMENTS = {
    "fig1-surface": (
        "loss surface over (eta, nu) after one cycle, per-nu optimal eta, gain over tuned nu=1 [fig1]",
        dict(_FIG1_DEFAULTS),
        _run_fig1_surface,
    ),
    "fig1-nu-curve": (
        "per-nu optimal eta and best loss along the nu grid [fig1]",
        dict(_FIG1_DEFAULTS),
        _run_fig1_nu_curve,
    ),
    "fig2-rscaling": (
        "theory loss curves across worker counts, fixed vs sqrt-rescaled (nu, eta) [fig2]",
        {
            "D": 400,
            "B_tot": 16,
            "R_list": [1, 2, 4, 8],
            "S": 5,
            "nu0": 2.0,
            "cycles": 20,
            "eta_grid": {"min": 0.002, "max": 0.12, "count": 20, "scale": "log"},
            "rules": ["fixed", "sqrt_rule"],
            "replicas": 0,
            "divergence_budget": 0,
            "spectrum": None,
        },
        _run_fig2_rscaling,
    ),
    "fig3-rates": (
        "convergence-rate table for momentum inside and outside the cycle, over S [fig3]",
        {
            "lam": 0.2,
            "eta": 1.0,
            "beta_in": 0.9,
            "beta_out": 0.8,
            "inner": "ema",
            "outer_flavors": ["ema", "nesterov"],
            "sync_variants": ["keep", "reset"],
            "nu_list": [2.0, 5.0],
            "S_list": [1, 2, 4, 8, 16, 32, 64],
        },
        _run_fig3_rates,
    ),
    "theorem1": (
        "worst eigenvalue of the cycle operator vs worker count at fixed total batch [theorem1]",
        {
            "lam0": 1.0,
            "D": 100,
            "S": 5,
            "eta": 0.05,
            "nu": 1.0,
            "B_tot": 20,
            "R_list": [1, 2, 4],
        },
        _run_theorem1,
    ),
    "sweep": (
        "general (eta, nu) grid sweep; fig1-surface with every field explicit [fig1]",
        {
            "spectrum": _REQUIRED,
            "B": _REQUIRED,
            "R": 1,
            "S": _REQUIRED,
            "cycles": _REQUIRED,
            "eta_grid": _REQUIRED,
            "nu_grid": _REQUIRED,
        },
        _run_sweep,
    ),
    "simulate": (
        "Monte Carlo replicas of the stochastic two-phase run against the exact theory curve [fig2]",
        {
            "spectrum": _REQUIRED,
            "eta": _REQUIRED,
            "nu": _REQUIRED,
            "S": _REQUIRED,
            "B": _REQUIRED,
            "R": 1,
            "replicas": _REQUIRED,
            "cycles": _REQUIRED,
            "theory": True,
            "per_replica": False,
            "ntk_seed": None,
        },
        _run_simulate,
    ),
    "stability-map": (
        "predicted vs iterated deterministic stability over an (eta*lam, nu) grid [appendix]",
        {
            "S_list": [1, 2, 3],
            "eta_lam_grid": {"min": 0.02, "max": 3.0, "count": 100, "scale": "linear"},
            "nu_grid": {"min": 0.0, "max": 4.0, "count": 100, "scale": "linear"},
            "cycles": 128,
        },
        _run_stability_map,
    ),
}


def list_experiments() -> str:
    width = max(len(name) for name in EXPERIMENTS)
    return "\n".join(f"{name:<{width}}  {desc}" for name, (desc, _, _) in EXPERIMENTS.items())


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise ConfigError(f"config file {path!r}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path!r}: invalid JSON ({err})") from err
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path!r}: top level must be an object")
    return cfg


def run_config(path: str, out: str | None, seed: int | None, threads: int, dense_cap: int | None) -> None:
    cfg = _load_config(path)
    if "experiment" not in cfg:
        raise ConfigError("missing key 'experiment'")
    name = cfg["experiment"]
    if name not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {sorted(EXPERIMENTS)}, got {name!r}")
    _, schema, runner = EXPERIMENTS[name]
    resolved = _resolve(cfg, schema)
    if seed is None:
        seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected an integer >= 0, got {seed!r}")
    out_dir = out if out is not None else cfg.get("out", ".")
    if not isinstance(out_dir, str):
        raise ConfigError(f"out: expected a path string, got {out_dir!r}")
    os.makedirs(out_dir, exist_ok=True)
    ctx = RunContext(out_dir=out_dir, seed=seed, threads=threads, dense_cap=dense_cap)
    outputs = runner(resolved, ctx)
    resolved["seed"] = seed
    manifest = {
        "experiment": name,
        "version": __version__,
        "config": resolved,
        "outputs": sorted(outputs),
        "threads": threads,
        "dense_cap": dense_cap,
    }
    with open(ctx.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twophase",
        description="Exact loss dynamics and spectral analysis for two-phase optimizers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("config_path", nargs="?", help="experiment config (same as --config)")
    run_p.add_argument("--config", help="experiment config file")
    run_p.add_argument("--out", help="output directory (overrides the config's out field)")
    run_p.add_argument("--seed", type=int, help="base seed (overrides the config's seed field)")
    run_p.add_argument("--threads", type=int, default=1, help="replica workers; 0 = all cores")
    run_p.add_argument("--dense-cap", type=int, help="max dimension for dense kernels")
    sub.add_parser("list-experiments", help="list experiment names and what they produce")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        print(list_experiments())
        return 0
    try:
        paths = [p for p in (args.config_path, args.config) if p is not None]
        if len(paths) != 1:
            raise ConfigError("pass exactly one config file (positional or --config)")
        run_config(paths[0], args.out, args.seed, args.threads, args.dense_cap)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (EigensolveError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands cover the full workflow: ``generate`` draws and stores a
batched dataset, ``infer`` runs the smoothing + fitting pipeline and
stores a self-contained result bundle, ``sweep`` repeats inference over a
parameter axis and seeds, ``spectral`` decomposes a fitted transfer
matrix into coherent-set candidates, and ``parametric`` profiles a scalar
model parameter directly on the batch functional.

Exit codes: 0 success, 2 configuration problem, 3 input/output problem,
4 iteration limit reached, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass

import numpy as np

from .analysis import (
    TransferEstimate,
    l2_baseline,
    l2_error,
    parametric_fit,
    svd_cluster,
    transfer_matrix,
    write_profile_csv,
)
from .entropic_kernel import EntropicPotentials, kernel_matrix, sinkhorn
from .errors import (
    AssemblyError,
    ConfigError,
    ConvergenceError,
    NumericalError,
)
from .geometry import DiscreteMeasure, MetricSpace
from .inference import (
    BatchDataset,
    Coupling,
    assemble_problem,
    coverage_anchors,
    generate_dataset,
    load_dataset,
    pooled_measures,
    save_dataset,
    uniform_anchors,
)
from .solver import cemml_run, emml_run, kkt_residual, write_trace_csv
from .systems import DoubleGyre, TorusMixture, truth

__all__ = ["RunConfig", "load_config", "build_system", "run_pipeline", "main"]

_SYSTEMS = ("torus-mixture", "double-gyre")
_ANCHOR_MODES = ("uniform", "coverage")
_ANCHOR_CAP = 300


@dataclass
class RunConfig:
    """Flat run configuration; JSON config files use these exact keys."""

    system: str = "torus-mixture"
    dim: int = 1
    sigma: float = 0.05
    shifts: tuple = (0.0, 0.3)
    weights: tuple = (0.5, 0.5)
    amplitude: float = 0.25
    alpha: float = 0.25
    omega: float = 2.0 * math.pi
    delta_t: float = 3.0
    steps: int = 3000
    n_batches: int = 100
    batch_size: int = 10
    seed: int = 0
    epsilon: float = 0.0025
    epsilon_x: float | None = None
    epsilon_y: float | None = None
    n_anchors_x: int | None = None
    n_anchors_y: int | None = None
    anchors: str = "uniform"
    constrained: bool = True
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 100_000
    solver_tol: float = 1e-10
    solver_max_iter: int = 50_000
    grid_resolution: int | None = None
    theta_min: float = 0.01
    theta_max: float = 0.5
    theta_count: int = 21

    def epsilon_pair(self) -> tuple[float, float]:
        ex = self.epsilon if self.epsilon_x is None else self.epsilon_x
        ey = self.epsilon if self.epsilon_y is None else self.epsilon_y
        return float(ex), float(ey)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a run configuration from an optional JSON file plus overrides.

    Unknown keys and out-of-range values raise :class:`ConfigError`; file
    access and JSON syntax problems propagate as I/O errors.
    """
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict = {}

    def absorb(mapping, origin):
        for key, val in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r} in {origin}")
            if key in ("shifts", "weights"):
                if not isinstance(val, (list, tuple)):
                    raise ConfigError(f"{key} must be a list of numbers")
                val = tuple(float(v) for v in val)
            values[key] = val

    if path is not None:
        with open(path) as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict):
            raise ConfigError("configuration file must hold a JSON object")
        absorb(payload, str(path))
    if overrides:
        absorb(overrides, "command line")
    cfg = RunConfig(**values)
    if cfg.system not in _SYSTEMS:
        raise ConfigError(f"system must be one of {_SYSTEMS}, got {cfg.system!r}")
    if cfg.anchors not in _ANCHOR_MODES:
        raise ConfigError(f"anchors must be one of {_ANCHOR_MODES}, got {cfg.anchors!r}")
    for key in ("n_batches", "batch_size", "theta_count"):
        if int(getattr(cfg, key)) < 1:
            raise ConfigError(f"{key} must be a positive integer")
    for key in ("epsilon", "sigma", "sinkhorn_tol", "solver_tol"):
        if float(getattr(cfg, key)) <= 0:
            raise ConfigError(f"{key} must be positive")
    if not 0 < cfg.theta_min < cfg.theta_max:
        raise ConfigError("need 0 < theta_min < theta_max")
    return cfg


def build_system(cfg: RunConfig):
    """Instantiate the configured sampling system."""
    try:
        if cfg.system == "torus-mixture":
            return TorusMixture(
                sigma=float(cfg.sigma),
                shifts=tuple(cfg.shifts),
                weights=tuple(cfg.weights),
                dim=int(cfg.dim),
            )
        if cfg.system == "double-gyre":
            return DoubleGyre(
                amplitude=float(cfg.amplitude),
                alpha=float(cfg.alpha),
                omega=float(cfg.omega),
                delta_t=float(cfg.delta_t),
                steps=int(cfg.steps),
            )
    except ValueError as exc:
        raise ConfigError(f"invalid system parameters: {exc}") from exc
    raise ConfigError(f"unknown system {cfg.system!r}")


@dataclass
class PipelineResult:
    """Everything produced by one inference run."""

    ds: BatchDataset
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    pot_x: EntropicPotentials
    pot_y: EntropicPotentials
    est: TransferEstimate
    state: object
    kkt: float


def run_pipeline(cfg: RunConfig, ds: BatchDataset | None = None) -> PipelineResult:
    """Dataset -> anchors -> smoothing -> assembly -> solve -> estimate."""
    if ds is None:
        ds = generate_dataset(
            build_system(cfg), cfg.n_batches, cfg.batch_size, cfg.seed
        )
    mu, nu = pooled_measures(ds)
    nm = len(mu)
    k = cfg.n_anchors_x if cfg.n_anchors_x is not None else min(_ANCHOR_CAP, nm)
    l = cfg.n_anchors_y if cfg.n_anchors_y is not None else min(_ANCHOR_CAP, nm)
    eps_x, eps_y = cfg.epsilon_pair()
    if cfg.anchors == "uniform":
        ax = uniform_anchors(ds.space_x, mu.points, k, cfg.seed, tag="x")
        ay = uniform_anchors(ds.space_y, nu.points, l, cfg.seed, tag="y")
    else:
        ax = coverage_anchors(ds.space_x, mu.points, k, cfg.seed, tag="x")
        ay = coverage_anchors(ds.space_y, nu.points, l, cfg.seed, tag="y")
    pot_x = sinkhorn(
        mu, ax, epsilon=eps_x, tol=cfg.sinkhorn_tol, max_iter=cfg.sinkhorn_max_iter
    )
    pot_y = sinkhorn(
        nu, ay, epsilon=eps_y, tol=cfg.sinkhorn_tol, max_iter=cfg.sinkhorn_max_iter
    )
    prob = assemble_problem(
        kernel_matrix(pot_x), kernel_matrix(pot_y), ds, constrained=cfg.constrained
    )
    inst = prob.to_instance()
    solve = cemml_run if cfg.constrained else emml_run
    state = solve(inst, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    est = TransferEstimate(prob.coupling_from(state.x), pot_x, pot_y)
    return PipelineResult(
        ds=ds,
        mu=mu,
        nu=nu,
        pot_x=pot_x,
        pot_y=pot_y,
        est=est,
        state=state,
        kkt=kkt_residual(inst, state.x),
    )


def _potential_arrays(tagname: str, pot: EntropicPotentials) -> dict:
    return {
        f"anchor_{tagname}_points": pot.anchor.points,
        f"anchor_{tagname}_weights": pot.anchor.weights,
        f"phi_{tagname}": pot.phi,
        f"psi_{tagname}": pot.psi,
        f"epsilon_{tagname}": np.float64(pot.epsilon),
        f"residual_{tagname}": np.float64(pot.residual),
        f"tol_{tagname}": np.float64(pot.tol),
        f"iterations_{tagname}": np.int64(pot.iterations),
    }


def save_bundle(path, res: PipelineResult) -> None:
    """Store a self-contained inference result as an .npz archive."""
    ds = res.ds
    arrays = {
        "format": np.str_("inference-bundle-v1"),
        "system": np.str_(ds.system),
        "dataset_seed": np.int64(ds.seed),
        "xs": ds.xs,
        "ys": ds.ys,
        "bounds_x": ds.space_x.bounds,
        "periodic_x": ds.space_x.periodic,
        "bounds_y": ds.space_y.bounds,
        "periodic_y": ds.space_y.periodic,
        "xi": res.est.coupling.xi,
        "constrained": np.bool_(res.est.coupling.constrained),
        "objective_trace": np.asarray(res.state.objective_trace),
        "constraint_trace": np.asarray(res.state.constraint_trace),
        "solver_iterations": np.int64(res.state.iteration),
        "solver_converged": np.bool_(res.state.converged),
        "kkt_residual": np.float64(res.kkt),
    }
    arrays.update(_potential_arrays("x", res.pot_x))
    arrays.update(_potential_arrays("y", res.pot_y))
    np.savez(path, **arrays)


def _load_potentials_from(data, tagname: str, src: DiscreteMeasure) -> EntropicPotentials:
    anchor = DiscreteMeasure(
        src.space,
        data[f"anchor_{tagname}_points"],
        data[f"anchor_{tagname}_weights"],
    )
    return EntropicPotentials(
        src=src,
        anchor=anchor,
        epsilon=float(data[f"epsilon_{tagname}"]),
        phi=data[f"phi_{tagname}"],
        psi=data[f"psi_{tagname}"],
        residual=float(data[f"residual_{tagname}"]),
        tol=float(data[f"tol_{tagname}"]),
        iterations=int(data[f"iterations_{tagname}"]),
    )


def load_bundle(path):
    """Rebuild (dataset, estimate) from a stored inference bundle."""
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != "inference-bundle-v1":
            raise ValueError(f"{path} is not an inference bundle")
        space_x = MetricSpace(data["bounds_x"], data["periodic_x"])
        space_y = MetricSpace(data["bounds_y"], data["periodic_y"])
        ds = BatchDataset(
            system=str(data["system"]),
            seed=int(data["dataset_seed"]),
            xs=data["xs"],
            ys=data["ys"],
            space_x=space_x,
            space_y=space_y,
        )
        mu, nu = pooled_measures(ds)
        pot_x = _load_potentials_from(data, "x", mu)
        pot_y = _load_potentials_from(data, "y", nu)
        est = TransferEstimate(
            Coupling(data["xi"], constrained=bool(data["constrained"])),
            pot_x,
            pot_y,
        )
    return ds, est


def _config_overrides(args) -> dict:
    overrides = {}
    for key in ("seed", "epsilon", "n_batches", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "constrained", None) is not None:
        overrides["constrained"] = args.constrained == "true"
    return overrides


def _emit(payload: dict, path=None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_generate(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    ds = generate_dataset(build_system(cfg), cfg.n_batches, cfg.batch_size, cfg.seed)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_batches} batches of size {ds.batch_size} to {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    ds = load_dataset(args.data) if args.data else None
    t0 = time.perf_counter()
    res = run_pipeline(cfg, ds)
    elapsed = time.perf_counter() - t0
    if args.out:
        save_bundle(args.out, res)
    if args.trace:
        write_trace_csv(res.state, args.trace)
    summary = {
        "n_batches": res.ds.n_batches,
        "batch_size": res.ds.batch_size,
        "seed": res.ds.seed,
        "constrained": res.est.coupling.constrained,
        "epsilon_x": res.pot_x.epsilon,
        "epsilon_y": res.pot_y.epsilon,
        "n_anchors_x": len(res.pot_x.anchor),
        "n_anchors_y": len(res.pot_y.anchor),
        "smoothing_iterations": [res.pot_x.iterations, res.pot_y.iterations],
        "solver_iterations": res.state.iteration,
        "solver_converged": bool(res.state.converged),
        "objective": float(res.state.objective_trace[-1]),
        "kkt_residual": res.kkt,
        "timing": {"seconds": elapsed},
    }
    tr = truth(build_system(cfg))
    if tr.has_density and res.ds.system.startswith(cfg.system):
        summary["l2_error"] = l2_error(res.est, tr, cfg.grid_resolution)
        summary["l2_baseline"] = l2_baseline(tr, cfg.grid_resolution)
    _emit(summary, args.summary)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    axis = args.axis
    caster = int if axis in ("n_batches", "batch_size") else float
    try:
        values = [caster(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values {args.values!r}: {exc}") from exc
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    if not truth(build_system(cfg)).has_density:
        raise ConfigError(
            "sweep reports the density error, which needs a system "
            "with a closed-form pair density"
        )
    rows = []
    for value in values:
        cfg_v = dataclasses.replace(cfg, **{axis: value})
        if axis == "epsilon":
            cfg_v = dataclasses.replace(cfg_v, epsilon_x=None, epsilon_y=None)
        for offset in range(args.seeds):
            cfg_run = dataclasses.replace(cfg_v, seed=cfg.seed + offset)
            t0 = time.perf_counter()
            status, err = "ok", ""
            try:
                res = run_pipeline(cfg_run)
                tr = truth(build_system(cfg_run))
                err = repr(l2_error(res.est, tr, cfg.grid_resolution))
            except (ConvergenceError, NumericalError, AssemblyError) as exc:
                status = type(exc).__name__
            rows.append(
                [
                    axis,
                    repr(float(value)),
                    cfg_run.seed,
                    err,
                    repr(time.perf_counter() - t0),
                    status,
                ]
            )
            print(f"{axis}={value} seed={cfg_run.seed}: {status} {err}", file=sys.stderr)
    import csv as _csv

    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([axis, "value", "seed", "l2_error", "seconds", "status"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_spectral(args) -> int:
    ds, est = load_bundle(args.bundle)
    if not est.coupling.constrained:
        raise ConfigError(
            "spectral analysis needs a transfer matrix with unit row sums; "
            "re-run inference with constrained=true"
        )
    mu, nu = pooled_measures(ds)
    T = transfer_matrix(est, mu, nu)
    n_modes = min(args.modes, min(T.shape))
    res = svd_cluster(T, mu.weights, nu.weights, n_modes)
    np.savez(
        args.out,
        singular_values=res.singular_values,
        right_vectors=res.right_vectors,
        left_vectors=res.left_vectors,
        right_partitions=res.right_partitions,
        left_partitions=res.left_partitions,
        x_points=mu.points,
        y_points=nu.points,
    )
    _emit({"singular_values": res.singular_values.tolist()}, args.summary)
    return 0


def cmd_parametric(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    if cfg.system != "torus-mixture":
        raise ConfigError("parametric profiling is defined for the torus mixture only")
    ds = (
        load_dataset(args.data)
        if args.data
        else generate_dataset(build_system(cfg), cfg.n_batches, cfg.batch_size, cfg.seed)
    )

    def family(theta):
        return truth(build_system(dataclasses.replace(cfg, sigma=theta))).pair_density

    grid = np.geomspace(cfg.theta_min, cfg.theta_max, cfg.theta_count)
    theta_hat, profile = parametric_fit(ds, family, grid)
    if args.out:
        write_profile_csv(args.out, profile)
    _emit({"theta_hat": theta_hat, "grid_size": int(profile.shape[0])}, args.summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="artifact",
        description="Pair-density estimation from batched unpaired samples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--epsilon", type=float, help="override the smoothing scale")
        p.add_argument("--n-batches", dest="n_batches", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--constrained", choices=("true", "false"))
        p.add_argument("--summary", help="write the JSON summary here instead of stdout")

    p = sub.add_parser("generate", help="draw a dataset and store it as JSON")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("infer", help="run the full estimation pipeline")
    common(p)
    p.add_argument("--data", help="read the dataset from this JSON file")
    p.add_argument("--out", help="write the result bundle (.npz) here")
    p.add_argument("--trace", help="write the solver trace CSV here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="repeat inference over an axis and seeds")
    common(p)
    p.add_argument(
        "--axis",
        required=True,
        choices=("n_batches", "batch_size", "epsilon"),
    )
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=1, help="number of seed offsets")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("spectral", help="decompose a fitted transfer matrix")
    p.add_argument("--bundle", required=True, help="bundle written by infer --out")
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--out", required=True, help="npz output path")
    p.add_argument("--summary", help="write the JSON summary here instead of stdout")
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("parametric", help="profile the mixture scale parameter")
    common(p)
    p.add_argument("--data", help="read the dataset from this JSON file")
    p.add_argument("--out", help="profile CSV output path")
    p.set_defaults(func=cmd_parametric)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"failed to converge: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, AssemblyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 5
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

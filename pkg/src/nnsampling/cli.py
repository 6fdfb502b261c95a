"""Experiment runner CLI.

Subcommands:
  run        execute a JSON config or a named recipe
  aggregate  mean/std across the averages.csv of several run directories
  iat        integrated autocorrelation time of a trajectory CSV column
  spectrum   covariance eigendecomposition of stored theta snapshots
  landscape  loss grid in two stored covariance directions

Exit codes: 0 success, 2 invalid config/arguments, 3 numerical divergence,
4 analysis failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .analysis import (AnalysisError, Trajectory, integrated_autocorrelation_time,
                       landscape_grid, project_trajectory, trajectory_covariance,
                       trajectory_from_csv)
from .data import (MinibatchStream, filter_two_classes, full_gradient,
                   load_mnist_idx, make_gaussian_model, make_harmonic,
                   make_two_clusters, minibatch_gradient)
from .ensemble import make_ensemble, preconditioner_spectra, run_eqn
from .model import Architecture, random_params
from .samplers import (DivergenceError, SamplerConfig, ensure_gradient, make_walker,
                       step_bbgd, step_gd, step_hmc, step_sgld, step_splitting)
from . import recipes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_ANALYSIS = 4

SPLITTING_KINDS = recipes.SPLITTING_SAMPLERS
OPTIMIZER_KINDS = ("GD", "SGD", "BBGD")
PHASE_KINDS = OPTIMIZER_KINDS + ("SGLD", "HMC", "EQN") + SPLITTING_KINDS


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists every violation."""


def fit_slope(points, small_eps_weight: float = 0.1) -> float:
    """Weighted least-squares slope of log(error) vs log(eps); the point
    with the smallest eps gets weight small_eps_weight."""
    points = [(float(e), float(v)) for e, v in points]
    if len(points) < 3:
        raise AnalysisError(f"need at least 3 points for a slope fit, got {len(points)}")
    eps = np.array([p[0] for p in points])
    err = np.array([p[1] for p in points])
    if np.any(eps <= 0) or np.any(err <= 0):
        raise AnalysisError("slope fit requires positive stepsizes and errors")
    x, y = np.log(eps), np.log(err)
    w = np.ones_like(x)
    w[np.argmin(x)] = small_eps_weight
    xbar = np.sum(w * x) / np.sum(w)
    ybar = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (x - xbar) * (y - ybar)) / np.sum(w * (x - xbar) ** 2))


# ---------------------------------------------------------------------------
# config handling

def _build_dataset(spec, errors):
    kind = spec.get("kind")
    dataset = None
    try:
        if kind == "harmonic":
            dataset = make_harmonic(spec["a"])
        elif kind == "two_clusters":
            dataset = make_two_clusters(spec["n_points"], spec["seed"],
                                        cluster_std=spec.get("cluster_std", 1.0),
                                        relative_noise=spec.get("relative_noise", 0.1))
        elif kind == "gaussian_model":
            dataset, _, _ = make_gaussian_model(spec["dim"], spec.get("eig_lo", 1.0),
                                                spec.get("eig_hi", 100.0), spec["seed"])
        elif kind == "mnist_idx":
            # split first (take_first = canonical training split), then filter
            dataset = load_mnist_idx(spec["images"], spec["labels"])
            if spec.get("take_first"):
                dataset = dataset.subset(slice(0, int(spec["take_first"])))
            two = spec.get("two_class_filter")
            if two:
                dataset = filter_two_classes(dataset, tuple(two))
        else:
            errors.append(f"dataset.kind must be one of harmonic/two_clusters/"
                          f"gaussian_model/mnist_idx, got {kind!r}")
        if dataset is not None and kind != "mnist_idx" and spec.get("take_first"):
            dataset = dataset.subset(slice(0, int(spec["take_first"])))
    except KeyError as exc:
        errors.append(f"dataset spec missing field {exc}")
    except (ValueError, OSError) as exc:
        errors.append(f"dataset: {exc}")
    return dataset


def _build_architecture(spec, errors):
    try:
        return Architecture(layer_sizes=tuple(spec["layer_sizes"]),
                            hidden_activation=spec.get("hidden_activation", "linear"),
                            output_activation=spec.get("output_activation", "linear"),
                            loss=spec.get("loss", "mean_squared_error"))
    except KeyError as exc:
        errors.append(f"architecture spec missing field {exc}")
    except ValueError as exc:
        errors.append(f"architecture: {exc}")
    return None


def bias_freeze_mask(arch: Architecture) -> np.ndarray:
    """True on every bias coordinate."""
    parts = []
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        parts.append(np.zeros(n_in * n_out, dtype=bool))
        parts.append(np.ones(n_out, dtype=bool))
    return np.concatenate(parts)


def _validate_phase(i, phase, dataset, errors):
    kind = phase.get("kind")
    if kind not in PHASE_KINDS:
        errors.append(f"phases[{i}].kind {kind!r} not in {PHASE_KINDS}")
        return
    if not isinstance(phase.get("steps"), int) or phase["steps"] <= 0:
        errors.append(f"phases[{i}].steps must be a positive integer")
    if not (isinstance(phase.get("step_size"), (int, float)) and phase["step_size"] > 0):
        errors.append(f"phases[{i}].step_size must be positive")
    stochastic = kind not in ("GD", "BBGD") or phase.get("batch_size")
    if stochastic and "seed" not in phase:
        errors.append(f"phases[{i}] is stochastic and must carry an explicit seed")
    if phase.get("batch_size") is not None:
        if kind == "HMC":
            errors.append(f"phases[{i}]: HMC requires full gradients (no batch_size)")
        elif dataset is not None and not (1 <= phase["batch_size"] <= dataset.n_items):
            errors.append(f"phases[{i}].batch_size outside [1, {dataset.n_items}]")
    if kind == "EQN" and phase.get("walkers", 1) < 1:
        errors.append(f"phases[{i}].walkers must be >= 1")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def validate_config(config: dict):
    """Returns (dataset, architecture); raises ConfigError listing every
    violation."""
    errors = []
    dataset = _build_dataset(config.get("dataset", {}), errors)
    arch = _build_architecture(config.get("architecture", {}), errors)
    if dataset is not None and arch is not None:
        if dataset.n_features != arch.n_inputs:
            errors.append(f"dataset has {dataset.n_features} features but the "
                          f"architecture expects {arch.n_inputs}")
        if dataset.n_label_components != arch.n_outputs:
            errors.append(f"dataset labels have {dataset.n_label_components} "
                          f"components but the architecture emits {arch.n_outputs}")
    phases = config.get("phases", [])
    if not phases:
        errors.append("config needs at least one phase")
    for i, phase in enumerate(phases):
        _validate_phase(i, phase, dataset, errors)
    init = config.get("init", {"kind": "zeros"})
    if init.get("kind") not in ("zeros", "normal"):
        errors.append(f"init.kind must be zeros or normal, got {init.get('kind')!r}")
    if errors:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(errors))
    return dataset, arch


def _write_rows_csv(path, rows, fieldnames=None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        if fieldnames is None:
            names = list(dict.fromkeys(key for row in rows for key in row))
        else:
            names = fieldnames
        writer = csv.DictWriter(fh, fieldnames=names, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating))
                             else v) for k, v in row.items()})
    os.replace(tmp, path)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(output_dir, config, phase_times, seed_override=None) -> str:
    outputs = []
    for name in sorted(os.listdir(output_dir)):
        if name == "manifest.json" or name.endswith(".tmp"):
            continue
        full = os.path.join(output_dir, name)
        if os.path.isfile(full):
            outputs.append({"name": name, "size": os.path.getsize(full),
                            "sha256": _sha256(full)})
    manifest = {
        "version": __version__,
        "config_sha256": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seed_override": seed_override,
        "phase_wall_times": phase_times,
        "outputs": outputs,
    }
    path = os.path.join(output_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# generic phase runner

def _phase_grad_fn(arch, dataset, phase):
    if phase.get("batch_size"):
        stream = MinibatchStream(dataset, phase["batch_size"], phase["seed"])
        return minibatch_gradient(arch, dataset, stream)
    return full_gradient(arch, dataset)


def _phase_config(phase, freeze_mask):
    return SamplerConfig(
        step_size=phase["step_size"],
        friction=phase.get("friction", 1.0),
        inverse_temperature=phase.get("inverse_temperature", 1.0),
        hmc_inner_steps=phase.get("hmc_inner_steps", 10),
        hmc_randomize_steps=phase.get("hmc_randomize_steps", False),
        freeze_mask=freeze_mask,
        bb_initial_step=phase.get("initial_step_size", 0.05),
    )


def run_config(config: dict, output_dir, seed_override=None) -> dict:
    """Execute the phases of a validated config, carrying parameters across
    phases; writes per-walker trajectory CSVs, averages.csv and a manifest."""
    dataset, arch = validate_config(config)
    os.makedirs(output_dir, exist_ok=True)
    out = config.get("output", {})
    thin = int(out.get("thin_interval", 100))
    store_theta = bool(out.get("store_theta", False))
    freeze_mask = bias_freeze_mask(arch) if config.get("freeze_biases") else None

    init = config.get("init", {"kind": "zeros"})
    if init.get("kind") == "normal":
        theta = random_params(arch, init.get("seed", 0), init.get("scale", 0.1))
    else:
        theta = np.zeros(arch.n_parameters)

    phase_times = []
    trajectories = [Trajectory(walker_id=0, thin_interval=thin)]
    hmc_accepts = []
    for phase_index, phase in enumerate(config["phases"]):
        if seed_override is not None and "seed" in phase:
            phase = dict(phase, seed=seed_override + phase_index)
        kind = phase["kind"]
        sampler_config = _phase_config(phase, freeze_mask)
        grad_fn = _phase_grad_fn(arch, dataset, phase)
        t0 = time.perf_counter()
        if kind == "EQN" or phase.get("walkers", 1) > 1:
            theta = _run_ensemble_phase(phase, sampler_config, grad_fn, theta,
                                        thin, store_theta, trajectories, output_dir)
        else:
            theta = _run_single_phase(phase, sampler_config, grad_fn, theta,
                                      thin, store_theta, trajectories, hmc_accepts)
        phase_times.append({"phase": phase_index, "kind": kind,
                            "seconds": time.perf_counter() - t0})

    names = []
    for traj in trajectories:
        name = f"trajectory_w{traj.walker_id}.csv"
        traj.to_csv(os.path.join(output_dir, name), include_theta=store_theta)
        names.append(name)
    averages = []
    for traj in trajectories:
        averages.append({
            "walker": traj.walker_id,
            "mean_loss": float(np.mean(traj.losses)) if traj.losses else float("nan"),
            "mean_kinetic_energy": float(np.mean(traj.kinetic_energies)) if traj.losses else float("nan"),
            "mean_virial": float(np.mean(traj.virials)) if traj.losses else float("nan"),
        })
        if hmc_accepts:
            averages[-1]["hmc_acceptance_rate"] = float(np.mean(hmc_accepts))
    _write_rows_csv(os.path.join(output_dir, "averages.csv"), averages)
    write_manifest(output_dir, config, phase_times, seed_override)
    return {"theta": theta, "trajectories": trajectories}


def _run_single_phase(phase, config, grad_fn, theta, thin, store_theta,
                      trajectories, hmc_accepts):
    kind = phase["kind"]
    beta = phase.get("inverse_temperature")
    stochastic = kind not in ("GD", "SGD", "BBGD")
    walker = make_walker(theta, phase.get("seed", 0),
                         beta=beta if stochastic else None,
                         freeze_mask=config.freeze_mask)
    traj = trajectories[0]
    base_step = traj.steps[-1] if traj.steps else 0
    for k in range(phase["steps"]):
        if kind in ("GD", "SGD"):
            step_gd(walker, config, grad_fn)
        elif kind == "BBGD":
            step_bbgd(walker, config, grad_fn)
        elif kind == "SGLD":
            step_sgld(walker, config, grad_fn)
        elif kind == "HMC":
            _, accepted = step_hmc(walker, config, grad_fn)
            hmc_accepts.append(bool(accepted))
        else:
            step_splitting(walker, config, grad_fn, kind)
        if (base_step + k + 1) % thin == 0:
            ensure_gradient(walker, config, grad_fn)
            traj.record(base_step + k + 1, float(walker.cached_loss),
                        0.5 * float(np.sum(walker.momentum**2)),
                        float(np.sum(walker.theta * walker.cached_grad)),
                        theta=walker.theta.copy() if store_theta else None)
    return walker.theta


def _run_ensemble_phase(phase, config, grad_fn, theta, thin, store_theta,
                        trajectories, output_dir):
    n_walkers = phase.get("walkers", 1)
    state = make_ensemble(theta, n_walkers, phase.get("seed", 0),
                          covariance_blending=phase.get("covariance_blending", 0.0),
                          rebuild_period=phase.get("rebuild_period", 1000),
                          beta=phase.get("inverse_temperature", 1.0),
                          initial_spread=phase.get("initial_spread", 0.0),
                          freeze_mask=config.freeze_mask)

    def eqn_grad(thetas):
        # generic model closures evaluate one parameter vector at a time
        losses = np.empty(thetas.shape[0])
        grads = np.empty_like(thetas)
        for i, row in enumerate(thetas):
            losses[i], grads[i] = grad_fn(row)
        return losses, grads

    if len(trajectories) == 1 and not trajectories[0].steps:
        trajectories.clear()
        trajectories.extend(Trajectory(walker_id=i, thin_interval=thin)
                            for i in range(n_walkers))
    elif len(trajectories) != n_walkers:
        raise ConfigError("walker count cannot change between ensemble phases")

    spectra_rows = []
    base_steps = [t.steps[-1] if t.steps else 0 for t in trajectories]

    def record(s):
        k = s.step_count
        if s.step_count % s.rebuild_period == 1 and s.preconditioners is not None:
            for i, eigs in enumerate(preconditioner_spectra(s)):
                spectra_rows.append({"step": k, "walker": i,
                                     "eigenvalues": " ".join(repr(v) for v in eigs)})
        if (base_steps[0] + k) % thin == 0:
            for i, traj in enumerate(trajectories):
                traj.record(base_steps[i] + k, float(s.cached_losses[i]),
                            0.5 * float(np.sum(s.momenta[i]**2)),
                            float(np.sum(s.thetas[i] * s.cached_grads[i])),
                            theta=s.thetas[i].copy() if store_theta else None)

    run_eqn(state, config, eqn_grad, phase["steps"], record=record)
    if spectra_rows:
        _write_rows_csv(os.path.join(output_dir, "preconditioner_spectra.csv"),
                        spectra_rows)
    return state.thetas[0]


# ---------------------------------------------------------------------------
# recipes

def _sgld_paper_rows(rows):
    """Slope table rows; SGLD additionally under the reference plotting
    convention (abscissa sqrt(eps), i.e. twice the standard slope)."""
    by_sampler = {}
    for row in rows:
        by_sampler.setdefault(row["sampler"], []).append(row)
    out = []
    for sampler, srows in by_sampler.items():
        points = [(r["eps"], max(r["virial_error_of_mean"], 1e-16)) for r in srows]
        try:
            slope = fit_slope(points)
        except AnalysisError:
            continue
        entry = {"sampler": sampler, "observable": "virial",
                 "slope": slope, "n_points": len(points)}
        if sampler == "SGLD":
            entry["slope_sqrt_abscissa"] = 2.0 * slope
        out.append(entry)
    return out


def run_recipe(name, output_dir, smoke=False, seed_override=None, threads=1,
               mnist_dir=None):
    os.makedirs(output_dir, exist_ok=True)
    t0 = time.perf_counter()
    seed = 2024 if seed_override is None else seed_override
    if name == "harmonic-slopes":
        steps = 20_000 if smoke else 100_000
        a_values = (0.01, 4.0) if smoke else (0.01, 1.0, 4.0)
        gammas = (1.0, 10.0) if smoke else (0.01, 0.1, 1.0, 10.0, 100.0)
        rows = recipes.run_harmonic_recipe(a_values=a_values, gammas=gammas,
                                           n_steps=steps, seed=seed, threads=threads)
        _write_rows_csv(os.path.join(output_dir, "errors.csv"), rows)
        slope_rows = []
        for a in sorted({r["a"] for r in rows}):
            for gamma in sorted({r["gamma"] for r in rows if r["a"] == a}):
                for sampler in sorted({r["sampler"] for r in rows}):
                    sel = [r for r in rows
                           if r["a"] == a and r["gamma"] == gamma and r["sampler"] == sampler]
                    for col in ("kinetic_error_of_mean", "virial_error_of_mean"):
                        try:
                            slope = fit_slope([(r["eps"], max(r[col], 1e-16)) for r in sel])
                        except AnalysisError:
                            continue
                        row = {"a": a, "gamma": gamma, "sampler": sampler,
                               "observable": col, "slope": slope}
                        if sampler == "SGLD" and col.startswith("virial"):
                            row["slope_sqrt_abscissa"] = 2.0 * slope
                        slope_rows.append(row)
        _write_rows_csv(os.path.join(output_dir, "slopes.csv"), slope_rows)
    elif name == "two-cluster-order":
        steps = 100_000 if smoke else 1_000_000
        scale = 0.25 if smoke else 1.0
        rows = recipes.run_two_cluster_recipe(n_steps=steps, seed=seed,
                                              replica_scale=scale, threads=threads)
        _write_rows_csv(os.path.join(output_dir, "errors.csv"), rows)
        _write_rows_csv(os.path.join(output_dir, "slopes.csv"), _sgld_paper_rows(rows))
    elif name == "gaussian-eqn":
        reps = 2 if smoke else 5
        steps = 20_000 if smoke else 50_000
        rows = recipes.run_gaussian_eqn_recipe(repetitions=reps, n_steps=steps,
                                               seed=seed)
        _write_rows_csv(os.path.join(output_dir, "iat.csv"), rows)
    elif name == "mnist-landscape":
        _recipe_mnist_landscape(output_dir, mnist_dir, smoke, seed)
    elif name == "mnist-two-class-eqn":
        _recipe_mnist_eqn(output_dir, mnist_dir, smoke, seed)
    else:
        raise ConfigError(f"unknown recipe {name!r}; available: harmonic-slopes, "
                          f"two-cluster-order, gaussian-eqn, mnist-landscape, "
                          f"mnist-two-class-eqn")
    write_manifest(output_dir, {"recipe": name, "smoke": smoke, "seed": seed},
                   [{"recipe": name, "seconds": time.perf_counter() - t0}],
                   seed_override)


def _require_mnist(mnist_dir):
    if not mnist_dir:
        raise ConfigError("this extended recipe needs --mnist-dir pointing at "
                          "train-images-idx3-ubyte / train-labels-idx1-ubyte / "
                          "t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte")
    paths = {key: os.path.join(mnist_dir, name) for key, name in (
        ("train_images", "train-images-idx3-ubyte"),
        ("train_labels", "train-labels-idx1-ubyte"),
        ("test_images", "t10k-images-idx3-ubyte"),
        ("test_labels", "t10k-labels-idx1-ubyte"))}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise ConfigError("missing MNIST IDX files: " + ", ".join(missing))
    return paths


def _recipe_mnist_landscape(output_dir, mnist_dir, smoke, seed):
    """Ten-class single-layer landscape study (paper-scale figures are out
    of desk scope; expected outcome documented in the README: the pooled
    covariance spectrum spans >= 3 orders of magnitude within the leading
    ~1000 eigenvalues)."""
    paths = _require_mnist(mnist_dir)
    sgd_steps = (300, 300, 50) if smoke else (3000, 3000, 3000)
    sample_steps = 2_000 if smoke else 100_000
    config = {
        # first 55000 items = the canonical training split
        "dataset": {"kind": "mnist_idx", "images": paths["train_images"],
                    "labels": paths["train_labels"], "take_first": 55000},
        "architecture": {"layer_sizes": [784, 10],
                         "loss": "softmax_cross_entropy"},
        "init": {"kind": "zeros"},
        "phases": [
            {"kind": "SGD", "steps": sgd_steps[0], "step_size": 0.5,
             "batch_size": 550, "seed": seed},
            {"kind": "SGD", "steps": sgd_steps[1], "step_size": 0.05,
             "batch_size": 5500, "seed": seed + 1},
            {"kind": "SGD", "steps": sgd_steps[2], "step_size": 0.01,
             "seed": seed + 2},
            {"kind": "BAOAB", "steps": sample_steps, "step_size": 0.125,
             "friction": 10.0, "inverse_temperature": 10.0,
             "batch_size": 550, "seed": seed + 3},
        ],
        "output": {"thin_interval": 100, "store_theta": True},
    }
    result = run_config(config, output_dir)
    spectrum = trajectory_covariance(result["trajectories"], mode="pooled",
                                     top_k=64 if smoke else 1000, method="power")
    spectrum.to_csv(os.path.join(output_dir, "spectrum.csv"))
    spectrum.save_eigenvectors(os.path.join(output_dir, "eigenvectors.txt"))


def _recipe_mnist_eqn(output_dir, mnist_dir, smoke, seed):
    """Two-class (7 vs 9) EQN study; expected outcome documented in the
    README: slowest projected IAT reduced >= 2x at blending >= 1e3 with 8
    walkers versus plain sampling."""
    paths = _require_mnist(mnist_dir)
    steps = 5_000 if smoke else 200_000
    config = {
        "dataset": {"kind": "mnist_idx", "images": paths["train_images"],
                    "labels": paths["train_labels"], "take_first": 55000,
                    "two_class_filter": [7, 9]},
        "architecture": {"layer_sizes": [784, 2], "loss": "softmax_cross_entropy"},
        "init": {"kind": "zeros"},
        "freeze_biases": True,
        "phases": [
            {"kind": "SGD", "steps": 500 if smoke else 5000, "step_size": 0.1,
             "batch_size": 550, "seed": seed},
            {"kind": "EQN", "steps": steps, "step_size": 0.125, "friction": 10.0,
             "inverse_temperature": 10.0, "batch_size": 550, "walkers": 8,
             "covariance_blending": 1e4, "rebuild_period": 10_000,
             "initial_spread": 1e-3, "seed": seed + 1},
        ],
        "output": {"thin_interval": 100, "store_theta": True},
    }
    result = run_config(config, output_dir)
    spectra = trajectory_covariance(result["trajectories"], mode="per_walker",
                                    top_k=20, method="dense")
    rows = []
    for walker, (traj, spec) in enumerate(zip(result["trajectories"], spectra)):
        thetas = traj.theta_matrix()
        for j in range(spec.eigenvectors.shape[1]):
            series = thetas @ spec.eigenvectors[:, j]
            try:
                tau = integrated_autocorrelation_time(series).tau * traj.thin_interval
            except AnalysisError:
                continue
            rows.append({"walker": walker, "direction": j,
                         "eigenvalue": float(spec.eigenvalues[j]), "tau": tau})
    _write_rows_csv(os.path.join(output_dir, "iat.csv"), rows)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_run(args):
    if bool(args.config) == bool(args.recipe):
        raise ConfigError("exactly one of --config or --recipe is required")
    if args.recipe:
        run_recipe(args.recipe, args.output, smoke=args.smoke,
                   seed_override=args.seed_override, threads=args.threads,
                   mnist_dir=args.mnist_dir)
    else:
        config = load_config(args.config)
        run_config(config, args.output, seed_override=args.seed_override)
    return EXIT_OK


def _cmd_aggregate(args):
    tables = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "averages.csv") if os.path.isdir(run_dir) else run_dir
        with open(path, newline="") as fh:
            tables.append(list(csv.DictReader(fh)))
    if not tables:
        raise ConfigError("no run directories given")
    keys = [k for k in tables[0][0] if k != "walker"]
    rows = []
    for walker_row in range(len(tables[0])):
        agg = {"walker": tables[0][walker_row]["walker"], "n_runs": len(tables)}
        for key in keys:
            values = np.array([float(t[walker_row][key]) for t in tables])
            agg[f"{key}_mean"] = float(values.mean())
            agg[f"{key}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        rows.append(agg)
    _write_rows_csv(args.output, rows)
    return EXIT_OK


def _cmd_iat(args):
    traj = trajectory_from_csv(args.input)
    result = integrated_autocorrelation_time(traj.observable(args.column),
                                             window_factor=args.window_factor)
    tau = result.tau * traj.thin_interval
    print(f"tau = {tau:.6g} steps ({result.tau:.6g} records x thin "
          f"{traj.thin_interval}), mean = {result.mean:.6g}, "
          f"sigma = {result.sigma:.6g}")
    if args.output:
        _write_rows_csv(args.output, [{"column": args.column, "tau_steps": tau,
                                       "tau_records": result.tau,
                                       "mean": result.mean, "sigma": result.sigma}])
    return EXIT_OK


def _cmd_spectrum(args):
    trajs = [trajectory_from_csv(p) for p in args.inputs]
    if not all(t.thetas for t in trajs):
        raise AnalysisError("trajectory CSV carries no theta_* columns; rerun "
                            "with output.store_theta = true")
    result = trajectory_covariance(trajs, mode=args.mode, top_k=args.top_k,
                                   method=args.method)
    results = result if isinstance(result, list) else [result]
    for i, spec in enumerate(results):
        suffix = f"_w{i}" if len(results) > 1 else ""
        spec.to_csv(os.path.join(args.output, f"spectrum{suffix}.csv"))
        spec.save_eigenvectors(os.path.join(args.output, f"eigenvectors{suffix}.txt"))
    return EXIT_OK


def _load_eigenvectors(path):
    return np.loadtxt(path)


def _cmd_landscape(args):
    config = load_config(args.config)
    dataset, arch = validate_config(config)
    traj = trajectory_from_csv(args.center_trajectory)
    center = traj.theta_matrix()[-1]
    vectors = _load_eigenvectors(args.eigenvectors)
    v_large = vectors[:, args.large_index - 1]
    v_small = vectors[:, args.small_index - 1]
    extra = None
    if args.project:
        projected = project_trajectory(traj, center, v_large, v_small, arch, dataset)
        extra = projected[:, 2]
        _write_rows_csv(os.path.join(args.output, "projection.csv"),
                        [{"c0": p[0], "c1": p[1], "loss": p[2]} for p in projected])
    grid = landscape_grid(arch, center, v_large, v_small, args.half_width,
                          args.samples, dataset, extra_losses=extra)
    grid.to_csv(os.path.join(args.output, "landscape.csv"))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nnsampling",
        description="Posterior sampling experiments for small neural networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a config file or a named recipe")
    p_run.add_argument("--config", help="path to a JSON experiment config")
    p_run.add_argument("--recipe", help="named recipe (harmonic-slopes, "
                       "two-cluster-order, gaussian-eqn, mnist-landscape, "
                       "mnist-two-class-eqn)")
    p_run.add_argument("--output", required=True, help="output directory")
    p_run.add_argument("--seed-override", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--smoke", action="store_true",
                       help="reduced step counts for a quick look")
    p_run.add_argument("--mnist-dir", default=os.environ.get("NNSAMPLING_MNIST_DIR"))
    p_run.set_defaults(func=_cmd_run)

    p_agg = sub.add_parser("aggregate", help="mean/std across run directories")
    p_agg.add_argument("runs", nargs="+")
    p_agg.add_argument("--output", required=True, help="output CSV path")
    p_agg.set_defaults(func=_cmd_aggregate)

    p_iat = sub.add_parser("iat", help="integrated autocorrelation time")
    p_iat.add_argument("--input", required=True, help="trajectory CSV")
    p_iat.add_argument("--column", default="loss",
                       choices=("loss", "kinetic_energy", "virial"))
    p_iat.add_argument("--window-factor", type=float, default=5.0)
    p_iat.add_argument("--output", default=None)
    p_iat.set_defaults(func=_cmd_iat)

    p_spec = sub.add_parser("spectrum", help="trajectory covariance spectrum")
    p_spec.add_argument("inputs", nargs="+", help="trajectory CSVs with theta columns")
    p_spec.add_argument("--mode", default="pooled", choices=("pooled", "per_walker"))
    p_spec.add_argument("--top-k", type=int, default=None)
    p_spec.add_argument("--method", default="auto", choices=("auto", "dense", "power"))
    p_spec.add_argument("--output", required=True, help="output directory")
    p_spec.set_defaults(func=_cmd_spectrum)

    p_land = sub.add_parser("landscape", help="loss grid in covariance directions")
    p_land.add_argument("--config", required=True, help="config for dataset/architecture")
    p_land.add_argument("--center-trajectory", required=True,
                        help="trajectory CSV whose last theta snapshot is the center")
    p_land.add_argument("--eigenvectors", required=True,
                        help="eigenvectors file from the spectrum subcommand")
    p_land.add_argument("--large-index", type=int, default=1,
                        help="1-based index of the large-covariance direction")
    p_land.add_argument("--small-index", type=int, default=64,
                        help="1-based index of the small-covariance direction")
    p_land.add_argument("--half-width", type=float, default=10.0)
    p_land.add_argument("--samples", type=int, default=41)
    p_land.add_argument("--project", action="store_true",
                        help="also project and re-evaluate the center trajectory")
    p_land.add_argument("--output", required=True, help="output directory")
    p_land.set_defaults(func=_cmd_landscape)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if hasattr(args, "output") and args.command in ("run", "spectrum", "landscape"):
            os.makedirs(args.output, exist_ok=True)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except AnalysisError as exc:
        print(f"analysis failure: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())

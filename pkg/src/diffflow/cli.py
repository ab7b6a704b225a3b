"""Command-line experiments.

Every subcommand takes an optional JSON config (missing keys fall back to the
defaults shown by ``diffflow <cmd> --help``), writes CSV files plus a
``manifest.json`` into ``--out`` and exits nonzero with a JSON error report
on invalid input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .dynamics import (DynamicsError, Kde, NoneCancelled, OracleGaussian, StepStats,
                       gaussian_init, simulate, snapshot_steps, standardized_gaussian_init)
from .elbo import DriftAssembly, elbo, exact_log_likelihood_gaussian
from .estimators import Mlp, TrainConfig, load_model, save_model
from .gan_algos import (MODES, AnnealingPlan, GanConfig, ImprovedConfig, ImprovedResult,
                        difflow_gan_train, eight_gaussians, generator_equivalence_check,
                        improved_sample, improved_train, particle_gradient_norms, two_moons)
from .gaussian_oracle import (PROP1_CONVENTIONS, GaussianState, OracleTrajectory, kl_gaussian,
                              verify_prop1)
from .metrics import energy_distance, gaussian_fit_kl, moments
from .schedules import from_config as schedule_from_config
from .schedules import preset, validate
from .targets import GaussianMixture, SmoothedScaledTarget, fixture_mixtures, growth_bound_constants


class ConfigError(ValueError):
    """The run configuration is invalid; raised before any compute."""


GAUSSIAN_TARGET = {"dim": 2, "components": [{"weight": 1.0, "mean": [1.0, 1.0], "var": 1.0}]}
GAUSSIAN_INIT = {"mean": [0.0, 0.0], "var": 1.0}

DEFAULTS: dict[str, dict] = {
    "simulate": {
        "schedule": {"preset": "langevin", "params": {"sigma0": 0.5, "beta": 1.0, "T": 2.0}},
        "target": GAUSSIAN_TARGET, "init": GAUSSIAN_INIT,
        "estimator": {"kind": "oracle_gaussian"},
        "n": 10000, "dt": 0.001, "snapshots": [0.5, 1.0, 2.0], "write_particles": True, "seed": 0,
    },
    "sweep-g": {
        "sigma0": 0.5, "beta": 1.0, "T": 2.0, "g_factors": [0.0, 1.0, math.sqrt(2.0), 2.0],
        "target": GAUSSIAN_TARGET, "init": GAUSSIAN_INIT,
        "n": 100000, "dt": 0.001, "snapshots": [0.5, 1.0, 2.0], "standardize_init": True,
        "ed_max_points": 5000, "n_perm": 200, "se_tol": 3.0, "min_pairs": 5, "seed": 0,
    },
    "converge": {
        "sigma0": 0.5, "beta": 1.0, "T": 2.0, "g_factor": math.sqrt(2.0),
        "target": GAUSSIAN_TARGET, "init_mean": [0.0, 0.0],
        "n": 100000, "dt": 0.001, "times": [0.25 * i for i in range(9)], "rel_tol": 0.1, "seed": 0,
    },
    "verify-vp": {
        "target": {"dim": 1, "components": [{"weight": 1.0, "mean": [0.5], "var": 2.0}]},
        "beta": 1.0, "times": [0.25, 0.5, 1.0, 2.0], "grid": {"lo": -5.0, "hi": 5.0, "n": 100},
        "tol": 1e-10,
    },
    "growth-bound": {
        "fixtures": sorted(fixture_mixtures()), "sigmas": [0.1, 0.5, 1.0, 2.0], "gamma": 0.95,
        "n_mc": 200000, "grid_points": 10000, "box": 10.0, "seed": 0,
    },
    "elbo": {
        "schedule": {"preset": "langevin", "params": {"sigma0": 0.5, "beta": 1.0, "T": 1.0}},
        "target": GAUSSIAN_TARGET, "init": GAUSSIAN_INIT, "assembly": "oracle",
        "T": 1.0, "n_paths": 4096, "n_steps": 256,
        "probes": {"n": 20, "seed": 3, "mean": 0.5, "std": 1.2}, "seed": 0,
    },
    "gan-train": {
        "algorithm": "improved", "fixture": "two_moons", "n_real": 2000, "data_seed": 1,
        "steps": 200, "eta": 0.02, "beta": 1.0, "annealing": {"sigma_max": 1.0, "sigma_min": 0.01},
        "n_particles": 2000, "hidden": [32, 32],
        "disc": {"step_size": 0.05, "iterations": 200, "batch_size": 128},
        "generator": {"noise_dim": 2, "step_size": 0.05, "iterations": 5},
        "trace_every": 1, "save_models": True, "seed": 0,
    },
    "gan-sample": {"model_dir": None, "n": 2000, "steps": None, "seed": 1},
    "equivalence-check": {
        "seeds": 20, "dim": 2, "noise_dim": 2, "hidden": [8, 8], "batch": 16,
        "modes": list(MODES), "probe_n": 256, "tol": 1e-6,
    },
}

CSV_DOCS = {
    "simulate": "snapshots.csv: particle_id, t, x1..xk; moments.csv: t, coord, mean, var, mean_se, var_se; "
                "oracle.csv: t, mean1..meank, var (single-Gaussian targets)",
    "sweep-g": "moments.csv: g, t, coord, mean, var, mean_se, var_se, oracle_mean, oracle_var; "
               "energy.csv: t, g_a, g_b, energy_distance, std_error, p_value",
    "converge": "kl.csv: t, oracle_kl, rate_kl, rate_rel_err, particle_kl, particle_rel_err",
    "verify-vp": "vp_identity.csv: t, convention, max_error",
    "growth-bound": "bounds.csv: fixture, sigma, A, B, C, radius, max_excess, violations",
    "elbo": "elbo.csv: x1..xk, elbo, se, prior_term, fisher_term, matching_term, exact_loglik, novikov_max",
    "gan-train": "train.csv: t, disc_loss, energy_distance, clip_count; particles.csv: particle_id, x1..xk",
    "gan-sample": "samples.csv: particle_id, x1..xk; energy.csv: energy_distance, std_error",
    "equivalence-check": "equivalence.csv: seed, mode, discrepancy; norms.csv: seed, n_probe, n_d_below_half, "
                         "min_norm_gap",
}


# --------------------------------------------------------------------------
# Config plumbing
# --------------------------------------------------------------------------


def merge_config(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(val, dict) and key not in ("schedule", "target", "init"):
            out[key] = merge_config(defaults[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def _positive(cfg: dict, *keys: str):
    for k in keys:
        v = cfg[k]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"{k!r} must be a positive number")


def _schedule(doc: dict):
    try:
        sch = schedule_from_config(doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc
    bad = validate(sch)
    if bad:
        v = bad[0]
        what = "g^2 - lambda^2 >= 0" if v.field == "lambda" else f"{v.field} constraint"
        raise ConfigError(f"schedule violates {what} at t={v.t} (value {v.value})")
    return sch


def _target(doc: dict) -> GaussianMixture:
    try:
        return GaussianMixture.from_config(doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid target: {exc}") from exc


def _init(doc: dict, dim: int) -> GaussianState:
    try:
        mean = np.broadcast_to(np.asarray(doc["mean"], dtype=float), (dim,))
        return GaussianState(mean, float(doc["var"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid init law: {exc}") from exc


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def resolve_threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        try:
            n = int(os.environ.get("DIFFFLOW_THREADS", "1"))
        except ValueError as exc:
            raise ConfigError("DIFFFLOW_THREADS must be an integer") from exc
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _estimator(spec: dict, schedule, target, init):
    kind = spec.get("kind")
    if kind == "oracle_gaussian":
        return OracleGaussian(init, schedule, target)
    if kind == "kde":
        return Kde(spec.get("bandwidth", "silverman"))
    if kind == "none_cancelled":
        return NoneCancelled(schedule)
    raise ConfigError(f"unknown estimator kind {kind!r}")


def _moment_rows(t, cloud, prefix=()):
    m = moments(cloud)
    for c in range(len(m.mean)):
        yield (*prefix, t, c, m.mean[c], m.var[c], m.mean_se[c], m.var_se[c])


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


def run_simulate(cfg: dict, out: Path, threads: int) -> dict:
    schedule = _schedule(cfg["schedule"])
    target = _target(cfg["target"])
    init = _init(cfg["init"], target.dim)
    _positive(cfg, "n", "dt")
    try:
        snapshot_steps(cfg["snapshots"], cfg["dt"], 0.0, schedule.horizon)
        est = _estimator(cfg["estimator"], schedule, target, init)
    except (DynamicsError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    stats = StepStats()
    snaps = simulate(gaussian_init(int(cfg["n"]), init.mean, init.var), schedule, target, est,
                     cfg["dt"], cfg["snapshots"], cfg["seed"], workers=threads, stats=stats)
    k = target.dim
    outputs = ["moments.csv"]
    write_csv(out / "moments.csv", ["t", "coord", "mean", "var", "mean_se", "var_se"],
              (r for t, c in zip(cfg["snapshots"], snaps) for r in _moment_rows(t, c)))
    if target.is_single and schedule.affine:
        traj = OracleTrajectory(init, schedule, target)
        outputs.append("oracle.csv")
        write_csv(out / "oracle.csv", ["t"] + [f"mean{j + 1}" for j in range(k)] + ["var"],
                  ((t, *traj.state_at(t).mean, traj.state_at(t).var) for t in cfg["snapshots"]))
    if cfg["write_particles"]:
        outputs.append("snapshots.csv")
        write_csv(out / "snapshots.csv", ["particle_id", "t"] + [f"x{j + 1}" for j in range(k)],
                  ((i, t, *c.positions[i]) for t, c in zip(cfg["snapshots"], snaps) for i in range(c.n)))
    return {"outputs": outputs, "clip_count": stats.clip_count}


def sweep_schedule(cfg: dict, factor: float):
    return preset("diffusion_gan", {"beta": cfg["beta"], "g": factor * math.sqrt(cfg["beta"]),
                                    "lambda": 0.0, "sigma0": cfg["sigma0"], "T": cfg["T"]})


def run_sweep_g(cfg: dict, out: Path, threads: int) -> dict:
    target = _target(cfg["target"])
    init = _init(cfg["init"], target.dim)
    _positive(cfg, "n", "dt", "T", "beta")
    if not target.is_single:
        raise ConfigError("sweep-g needs a single-Gaussian target")
    factors = [float(f) for f in cfg["g_factors"]]
    if len(factors) < 2:
        raise ConfigError("sweep-g needs at least two g values")
    scheds = [_schedule(sweep_schedule(cfg, f).to_config()) for f in factors]
    try:
        snapshot_steps(cfg["snapshots"], cfg["dt"], 0.0, cfg["T"])
    except DynamicsError as exc:
        raise ConfigError(str(exc)) from exc
    n = int(cfg["n"])
    # moment-matching the initial draw removes its sampling error from every snapshot
    sampler = standardized_gaussian_init if cfg["standardize_init"] else gaussian_init
    runs = []
    for sch in scheds:
        est = OracleGaussian(init, sch, target)
        runs.append(simulate(sampler(n, init.mean, init.var), sch, target, est, cfg["dt"],
                             cfg["snapshots"], cfg["seed"], workers=threads))
    oracle = OracleTrajectory(init, scheds[0], target)
    tol = cfg["se_tol"]
    mom_rows, ed_rows, verdicts = [], [], []
    half = n // 2
    for si, t in enumerate(cfg["snapshots"]):
        st = oracle.state_at(t)
        ms = [moments(run[si]) for run in runs]
        ok_mom = True
        for gi, m in enumerate(ms):
            for c in range(target.dim):
                mom_rows.append((factors[gi], t, c, m.mean[c], m.var[c], m.mean_se[c], m.var_se[c],
                                 st.mean[c], st.var))
            ok_mom &= bool(np.all(np.abs(m.mean - st.mean) <= tol * m.mean_se))
            ok_mom &= bool(np.all(np.abs(m.var - st.var) <= tol * m.var_se))
        for a, b in combinations(range(len(ms)), 2):
            ok_mom &= bool(np.all(np.abs(ms[a].mean - ms[b].mean) <= tol * np.hypot(ms[a].mean_se, ms[b].mean_se)))
            ok_mom &= bool(np.all(np.abs(ms[a].var - ms[b].var) <= tol * np.hypot(ms[a].var_se, ms[b].var_se)))
        n_pass = 0
        for a, b in combinations(range(len(ms)), 2):
            # disjoint particle indices keep the two samples independent under a shared seed
            rep = energy_distance(runs[a][si].positions[:half], runs[b][si].positions[half:],
                                  n_perm=cfg["n_perm"], seed=cfg["seed"] + si, max_points=cfg["ed_max_points"])
            n_pass += rep.p_value is not None and rep.p_value > 0.05
            ed_rows.append((t, factors[a], factors[b], rep.value, rep.std_error, rep.p_value))
        verdicts.append({"t": t, "moments_ok": ok_mom, "ed_pairs_passing": int(n_pass),
                         "pass": ok_mom and n_pass >= cfg["min_pairs"]})
    write_csv(out / "moments.csv", ["g", "t", "coord", "mean", "var", "mean_se", "var_se",
                                    "oracle_mean", "oracle_var"], mom_rows)
    write_csv(out / "energy.csv", ["t", "g_a", "g_b", "energy_distance", "std_error", "p_value"], ed_rows)
    return {"outputs": ["moments.csv", "energy.csv"], "verdicts": verdicts,
            "pass": all(v["pass"] for v in verdicts)}


def run_converge(cfg: dict, out: Path, threads: int) -> dict:
    target = _target(cfg["target"])
    _positive(cfg, "n", "dt", "T", "beta")
    if not target.is_single:
        raise ConfigError("converge needs a single-Gaussian target")
    sch = _schedule(sweep_schedule(cfg, cfg["g_factor"]).to_config())
    q = GaussianState(target.means[0], float(target.variances[0]) + cfg["sigma0"] ** 2)
    init = _init({"mean": cfg["init_mean"], "var": q.var}, target.dim)
    times = [float(t) for t in cfg["times"]]
    try:
        snapshot_steps(times, cfg["dt"], 0.0, cfg["T"])
    except DynamicsError as exc:
        raise ConfigError(str(exc)) from exc
    rho = 1.0 / q.var
    traj = OracleTrajectory(init, sch, target)
    kl0 = kl_gaussian(init, q)
    snaps = simulate(gaussian_init(int(cfg["n"]), init.mean, init.var), sch, target,
                     OracleGaussian(init, sch, target), cfg["dt"], times, cfg["seed"], workers=threads)
    rows, ok = [], True
    for t, cloud in zip(times, snaps):
        ok_kl = kl_gaussian(traj.state_at(t), q)
        rate = math.exp(-2 * cfg["beta"] * rho * t) * kl0
        pk = gaussian_fit_kl(cloud, q)
        rate_err = abs(ok_kl - rate) / rate
        p_err = abs(pk - ok_kl) / ok_kl
        ok &= rate_err <= 1e-6 and p_err <= cfg["rel_tol"]
        rows.append((t, ok_kl, rate, rate_err, pk, p_err))
    write_csv(out / "kl.csv", ["t", "oracle_kl", "rate_kl", "rate_rel_err", "particle_kl", "particle_rel_err"], rows)
    return {"outputs": ["kl.csv"], "rho": rho, "pass": bool(ok)}


def run_verify_vp(cfg: dict, out: Path, threads: int) -> dict:
    target = _target(cfg["target"])
    if not target.is_single:
        raise ConfigError("verify-vp needs a single-Gaussian target")
    g = cfg["grid"]
    if int(g["n"]) < 1 or not g["hi"] > g["lo"]:
        raise ConfigError("grid needs n >= 1 and hi > lo")
    k = target.dim
    per_axis = max(2, round(int(g["n"]) ** (1.0 / k)))
    axes = [np.linspace(g["lo"], g["hi"], per_axis if k > 1 else int(g["n"]))] * k
    grid = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    rows, worst = [], 0.0
    for t in cfg["times"]:
        for conv in PROP1_CONVENTIONS:
            err = verify_prop1(target, cfg["beta"], float(t), grid, conv)
            rows.append((t, conv, err))
            if conv == "variance":
                worst = max(worst, err)
    write_csv(out / "vp_identity.csv", ["t", "convention", "max_error"], rows)
    return {"outputs": ["vp_identity.csv"], "max_error": worst, "pass": worst <= cfg["tol"]}


def growth_grid(k: int, n_points: int, box: float) -> np.ndarray:
    per_axis = n_points if k == 1 else round(n_points ** (1.0 / k))
    axes = [np.linspace(-box, box, per_axis)] * k
    return np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)


def run_growth_bound(cfg: dict, out: Path, threads: int) -> dict:
    fixtures = fixture_mixtures()
    unknown = [f for f in cfg["fixtures"] if f not in fixtures]
    if unknown:
        raise ConfigError(f"unknown fixtures {unknown}")
    if not 0 < cfg["gamma"] < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    rows, ok = [], True
    for name in cfg["fixtures"]:
        mix = fixtures[name]
        x = growth_grid(mix.dim, int(cfg["grid_points"]), float(cfg["box"]))
        for sigma in cfg["sigmas"]:
            b = growth_bound_constants(mix, float(sigma), cfg["gamma"], n_mc=int(cfg["n_mc"]), seed=cfg["seed"])
            excess = np.abs(SmoothedScaledTarget(mix, 1.0, float(sigma) ** 2).log_density(x)) - b(x)
            n_bad = int(np.sum(excess > 0))
            ok &= n_bad == 0
            rows.append((name, sigma, b.A, b.B, b.C, b.radius, float(excess.max()), n_bad))
    write_csv(out / "bounds.csv", ["fixture", "sigma", "A", "B", "C", "radius", "max_excess", "violations"], rows)
    return {"outputs": ["bounds.csv"], "pass": bool(ok)}


def elbo_probes(spec, dim: int) -> np.ndarray:
    if isinstance(spec, list):
        return np.array(spec, dtype=float).reshape(len(spec), dim)
    rng = np.random.default_rng(spec["seed"])
    return rng.normal(spec["mean"], spec["std"], (int(spec["n"]), dim))


def run_elbo(cfg: dict, out: Path, threads: int) -> dict:
    schedule = _schedule(cfg["schedule"])
    target = _target(cfg["target"])
    init = _init(cfg["init"], target.dim)
    _positive(cfg, "T", "n_paths", "n_steps")
    if cfg["T"] > schedule.horizon + 1e-12:
        raise ConfigError("T exceeds the schedule horizon")
    if cfg["assembly"] == "oracle":
        asm = DriftAssembly.oracle(schedule, target, init)
    elif cfg["assembly"] == "zero":
        asm = DriftAssembly.zero(schedule)
    else:
        raise ConfigError("assembly must be 'oracle' or 'zero'")
    probes = elbo_probes(cfg["probes"], target.dim)
    exact_ok = target.is_single and schedule.affine
    rows, violations = [], 0
    for x in probes:
        try:
            e = elbo(x, asm, init.log_density, cfg["T"], int(cfg["n_paths"]), int(cfg["n_steps"]),
                     cfg["seed"], workers=threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ex = exact_log_likelihood_gaussian(x, schedule, init, target, cfg["T"]) if exact_ok else float("nan")
        violations += bool(e.value - ex > 2 * e.std_error)
        rows.append((*x, e.value, e.std_error, e.prior_term, e.fisher_term, e.matching_term, ex, e.novikov_max))
    k = target.dim
    write_csv(out / "elbo.csv", [f"x{j + 1}" for j in range(k)] + ["elbo", "se", "prior_term", "fisher_term",
                                                              "matching_term", "exact_loglik", "novikov_max"], rows)
    return {"outputs": ["elbo.csv"], "violations_beyond_2se": violations, "pass": violations <= 1}


FIXTURE_SAMPLERS = {"two_moons": two_moons, "eight_gaussians": eight_gaussians}


def _real_data(cfg: dict) -> np.ndarray:
    if cfg["fixture"] not in FIXTURE_SAMPLERS:
        raise ConfigError(f"unknown fixture {cfg['fixture']!r}; expected one of {sorted(FIXTURE_SAMPLERS)}")
    return FIXTURE_SAMPLERS[cfg["fixture"]](int(cfg["n_real"]), seed=int(cfg["data_seed"]))


def run_gan_train(cfg: dict, out: Path, threads: int) -> dict:
    _positive(cfg, "steps", "n_real", "n_particles", "eta")
    real = _real_data(cfg)
    d = cfg["disc"]
    try:
        disc_cfg = TrainConfig(d["step_size"], int(d["iterations"]), int(d["batch_size"]), int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    steps = int(cfg["steps"])
    k = real.shape[1]
    outputs = ["train.csv", "particles.csv"]
    if cfg["algorithm"] == "improved":
        a = cfg["annealing"]
        try:
            plan = AnnealingPlan.geometric(a["sigma_max"], a["sigma_min"], steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        icfg = ImprovedConfig(disc=disc_cfg, hidden=tuple(cfg["hidden"]), n_particles=int(cfg["n_particles"]),
                              trace_every=int(cfg["trace_every"]), seed=int(cfg["seed"]))
        res = improved_train(real, plan, steps, cfg["eta"], cfg["beta"], icfg)
        trace, particles = res.trace, res.particles
        if cfg["save_models"]:
            mdir = out / "models"
            mdir.mkdir(exist_ok=True)
            for t, net in enumerate(res.discriminators, start=1):
                save_model(net, mdir / f"disc_{t:04d}.bin")
            index = {"steps": steps, "dim": k, "eta": cfg["eta"], "beta": cfg["beta"], "shared": res.shared,
                     "fixture": cfg["fixture"], "n_real": cfg["n_real"], "data_seed": cfg["data_seed"]}
            (mdir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
            outputs.append("models/")
    elif cfg["algorithm"] == "difflow":
        gcfg = cfg["generator"]
        gc = GanConfig(disc=disc_cfg, hidden=tuple(cfg["hidden"]), n_particles=int(cfg["n_particles"]),
                       noise_dim=int(gcfg["noise_dim"]), gen_step_size=gcfg["step_size"],
                       gen_iterations=int(gcfg["iterations"]), seed=int(cfg["seed"]))
        res = difflow_gan_train(real, steps, cfg["eta"], cfg["beta"], gc)
        trace, particles = res.trace, res.particles
        if cfg["save_models"]:
            save_model(res.generator, out / "generator.bin")
            save_model(res.discriminator, out / "discriminator.bin")
            outputs += ["generator.bin", "discriminator.bin"]
    else:
        raise ConfigError("algorithm must be 'improved' or 'difflow'")
    write_csv(out / "train.csv", ["t", "disc_loss", "energy_distance", "clip_count"],
              ((r["t"], r["disc_loss"], r["energy_distance"], r["clip_count"]) for r in trace))
    write_csv(out / "particles.csv", ["particle_id"] + [f"x{j + 1}" for j in range(k)],
              ((i, *p) for i, p in enumerate(particles)))
    first, last = trace[0]["energy_distance"], trace[-1]["energy_distance"]
    return {"outputs": outputs, "initial_energy_distance": first, "final_energy_distance": last,
            "ratio": last / first if first > 0 else float("nan")}


def load_improved(model_dir: Path) -> tuple[ImprovedResult, dict]:
    index = json.loads((model_dir / "index.json").read_text())
    nets = [load_model(model_dir / f"disc_{t:04d}.bin") for t in range(1, index["steps"] + 1)]
    return ImprovedResult(nets, np.empty((0, index["dim"])), [], [], index["shared"], index["steps"]), index


def run_gan_sample(cfg: dict, out: Path, threads: int) -> dict:
    if not cfg["model_dir"]:
        raise ConfigError("gan-sample needs 'model_dir' (the models/ folder written by gan-train)")
    mdir = Path(cfg["model_dir"])
    if not (mdir / "index.json").exists():
        raise ConfigError(f"no index.json in {mdir}")
    trained, index = load_improved(mdir)
    steps = index["steps"] if cfg["steps"] is None else int(cfg["steps"])
    if not 0 <= steps <= index["steps"]:
        raise ConfigError(f"steps must lie in [0, {index['steps']}]")
    cloud = improved_sample(trained, int(cfg["n"]), index["dim"], steps, index["eta"], index["beta"], seed=cfg["seed"])
    real = FIXTURE_SAMPLERS[index["fixture"]](int(index["n_real"]), seed=int(index["data_seed"]))
    rep = energy_distance(cloud.positions, real, n_perm=0)
    write_csv(out / "samples.csv", ["particle_id"] + [f"x{j + 1}" for j in range(index["dim"])],
              ((i, *p) for i, p in enumerate(cloud.positions)))
    write_csv(out / "energy.csv", ["energy_distance", "std_error"], [(rep.value, rep.std_error)])
    return {"outputs": ["samples.csv", "energy.csv"], "energy_distance": rep.value}


def run_equivalence(cfg: dict, out: Path, threads: int) -> dict:
    modes = cfg["modes"]
    if any(m not in MODES for m in modes):
        raise ConfigError(f"modes must be drawn from {MODES}")
    rows, norm_rows, worst, norms_ok = [], [], 0.0, True
    k, nz, hidden = int(cfg["dim"]), int(cfg["noise_dim"]), tuple(cfg["hidden"])
    for seed in range(int(cfg["seeds"])):
        gen = Mlp.init((nz, *hidden, k), seed=2 * seed)
        disc = Mlp.init((k, *hidden, 1), seed=2 * seed + 1)
        z = np.random.default_rng(seed).standard_normal((int(cfg["batch"]), nz))
        for mode in modes:
            rep = generator_equivalence_check(gen, disc, z, mode)
            worst = max(worst, rep.discrepancy)
            rows.append((seed, mode, rep.discrepancy))
        probes = np.random.default_rng(10_000 + seed).normal(0.0, 3.0, (int(cfg["probe_n"]), k))
        sn = particle_gradient_norms(disc, probes)
        low = sn.d < 0.5
        gap = float(np.min(sn.non_saturating[low] - sn.saturating[low])) if low.any() else float("nan")
        norms_ok &= not low.any() or gap >= 0
        norm_rows.append((seed, len(probes), int(low.sum()), gap))
    write_csv(out / "equivalence.csv", ["seed", "mode", "discrepancy"], rows)
    write_csv(out / "norms.csv", ["seed", "n_probe", "n_d_below_half", "min_norm_gap"], norm_rows)
    return {"outputs": ["equivalence.csv", "norms.csv"], "max_discrepancy": worst,
            "pass": worst <= cfg["tol"] and bool(norms_ok)}


RUNNERS = {
    "simulate": run_simulate,
    "sweep-g": run_sweep_g,
    "converge": run_converge,
    "verify-vp": run_verify_vp,
    "growth-bound": run_growth_bound,
    "elbo": run_elbo,
    "gan-train": run_gan_train,
    "gan-sample": run_gan_sample,
    "equivalence-check": run_equivalence,
}

HELP = {
    "simulate": "Euler-Maruyama particle run with snapshots",
    "sweep-g": "marginal invariance across g values on the Gaussian fixture",
    "converge": "KL decay of oracle and particles against the log-Sobolev rate",
    "verify-vp": "VP forward score vs the scaled, smoothed target score",
    "growth-bound": "quadratic bound on |log q(x; sigma)| over a grid",
    "elbo": "Monte-Carlo ELBO at probe points vs the exact log-likelihood",
    "gan-train": "particle GAN training (improved or difflow algorithm)",
    "gan-sample": "replay trained per-step discriminators from fresh prior draws",
    "equivalence-check": "GAN generator gradients vs the particle MSE surrogate",
}


def run(experiment: str, config: dict | None, out: Path, threads: int = 1, seed: int | None = None) -> dict:
    """Run one experiment and write its artifacts and manifest into ``out``."""
    if experiment not in RUNNERS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    if config is not None and not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    cfg = merge_config(DEFAULTS[experiment], config or {})
    if seed is not None:
        if "seed" not in cfg:
            raise ConfigError(f"{experiment} takes no seed")
        cfg["seed"] = seed
    if "seed" in cfg and not (isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2**64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = RUNNERS[experiment](cfg, out, threads)
    manifest = {"experiment": experiment, "engine_version": __version__, "backend": kernels.BACKEND,
                "threads": threads, "config": cfg, "summary": summary}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return summary


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffflow", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in RUNNERS:
        defaults = json.dumps(DEFAULTS[name], sort_keys=True)
        p = sub.add_parser(name, help=HELP[name],
                           description=f"{HELP[name]}.\n\nCSV columns: {CSV_DOCS[name]}\n\nDefaults: {defaults}",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="JSON config file (keys override the defaults)")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", type=Path, default=Path("out") / name, help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: $DIFFFLOW_THREADS or 1)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = None
        if args.config is not None:
            try:
                config = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        threads = resolve_threads(args.threads)
        summary = run(args.experiment, config, args.out, threads, args.seed)
    except ConfigError as exc:
        report = {"error": "config", "experiment": args.experiment, "message": str(exc)}
        print(json.dumps(report), file=sys.stderr)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "error.json").write_text(json.dumps(report, indent=2))
        except OSError:
            pass
        return 2
    print(json.dumps({"experiment": args.experiment, "out": str(args.out), **summary},
                     default=_json_default, sort_keys=True))
    return 0 if summary.get("pass", True) else 1


if __name__ == "__main__":
    sys.exit(main())

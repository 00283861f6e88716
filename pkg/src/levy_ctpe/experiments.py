"""Pipelines behind the CLI: simulate, fit, evaluate, study and reproduce."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .basis import FourierBasis
from .coeff_recovery import (
    FitConfig,
    fit,
    is_outlier,
    relative_l2_errors,
    theta_from_json,
    theta_to_json,
    write_history,
)
from .config import ConfigError, RunConfig, dump_config
from .levy_sim import (
    censor_by_filtering,
    generate_mcmc_dataset,
    generate_unbiased_dataset,
    read_dataset,
    write_dataset,
)
from .registry import get_truth
from .value_pide import (
    COS3_2X,
    PideProblem,
    SolverError,
    manufacture_reward,
    perturbation_study,
    solve_pide,
    value_error,
    write_study,
    write_value_csv,
)

log = logging.getLogger("levy_ctpe")


class DataError(RuntimeError):
    """Dataset missing, unreadable or unusable."""


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _require_truth(cfg: RunConfig, what: str):
    if cfg.dynamics.truth is None:
        raise ConfigError("dynamics.truth", f"{what} needs a named ground truth")
    return get_truth(cfg.dynamics.truth)


# ---------------------------------------------------------------------------
# simulate


def make_dataset(cfg: RunConfig):
    truth = _require_truth(cfg, "simulation")
    ds = cfg.dataset
    spec = truth.sde(cfg.dynamics.alpha)
    if ds.kind == "mcmc":
        return generate_mcmc_dataset(spec, None, ds.num_traj, ds.steps, ds.dt, ds.burn_in, ds.seed)
    data = generate_unbiased_dataset(spec, None, ds.num_traj, ds.steps, ds.dt, ds.seed, ds.substeps)
    if ds.kind == "filtered":
        try:
            data = censor_by_filtering(data, ds.trt, ds.ct, ds.drop_fraction)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    return data


def run_simulate(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    data = make_dataset(cfg)
    path = out / "dataset.csv"
    write_dataset(data, path)
    log.info("wrote %d %s to %s", len(data), "trajectories" if data.meta.generator == "unbiased" else "pairs", path)
    return path


# ---------------------------------------------------------------------------
# fit


def fit_config(cfg: RunConfig) -> FitConfig:
    f = cfg.fit
    return FitConfig(eta=f.eta, beta1=f.beta1, beta2=f.beta2, eps=f.eps, step_limit=f.step_limit,
                     batch=f.batch, tcf_warmup=f.tcf_warmup, ma_window=f.ma_window, fd_mix=f.fd_mix,
                     use_tcf=not f.no_tcf)


def load_or_make_dataset(cfg: RunConfig, base_dir: Path | None = None):
    if cfg.dataset.path is None:
        return make_dataset(cfg)
    path = Path(cfg.dataset.path)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        return read_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def run_fit(cfg: RunConfig, out: Path, dataset=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    data = dataset if dataset is not None else load_or_make_dataset(cfg)
    alpha = data.meta.alpha
    basis = FourierBasis(cfg.fit.n_modes)
    try:
        trt = math.inf if cfg.fit.trt is None else cfg.fit.trt
        result = fit(data, basis, alpha, fit_config(cfg), cfg.fit.ct, trt, cfg.fit.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_json(out / "theta.json", theta_to_json(result, alpha))
    write_history(result.history, out / "history.csv", cfg.fit.history_thin)
    metrics = {"converged": result.converged, "steps_run": result.steps_run,
               "final_tcf": result.final_tcf, "r_sample": result.r_sample,
               "ct_effective": result.ct_effective}
    if cfg.dynamics.truth is not None:
        errs = relative_l2_errors(result.theta, get_truth(cfg.dynamics.truth).fields)
        metrics["rel_err"] = errs
        metrics["outlier"] = is_outlier(errs)
    _write_json(out / "metrics.json", metrics)
    log.info("fit finished: steps=%d converged=%s", result.steps_run, result.converged)
    return metrics


# ---------------------------------------------------------------------------
# evaluate


def _load_theta(path):
    try:
        data = json.loads(Path(path).read_text())
        return theta_from_json(data), data.get("alpha")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read theta file {path}: {exc}") from exc


def build_problem(cfg: RunConfig, theta_path=None):
    """PideProblem plus the exact value samples when they are known."""
    p = cfg.pide
    alpha = cfg.dynamics.alpha
    theta_path = theta_path or cfg.dynamics.theta_file
    use_theta = p.coefficients == "theta" or theta_path is not None
    if use_theta:
        if theta_path is None:
            raise ConfigError("dynamics.theta_file", "pide.coefficients is 'theta' but no theta file given")
        theta, theta_alpha = _load_theta(theta_path)
        alpha = theta_alpha if theta_alpha is not None else alpha
        prob = PideProblem(p.beta, alpha, theta=theta, m=p.m)
    else:
        truth = _require_truth(cfg, "evaluation with true coefficients")
        prob = PideProblem(p.beta, alpha, *truth.fields, m=p.m)
    if p.reward == "cos3_2x":
        truth = _require_truth(cfg, "the manufactured reward")
        ref = PideProblem(p.beta, alpha, *truth.fields, m=p.m)
        prob = prob.with_reward(manufacture_reward(COS3_2X, ref))
        exact = COS3_2X(prob.x)
    else:
        c = float(p.reward.split(":", 1)[1])
        prob = prob.with_reward(c)
        exact = np.full(prob.m, c / p.beta)  # constants solve the equation for any coefficients
    return prob, exact


def run_evaluate(cfg: RunConfig, out: Path, theta_path=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    snap = copy.deepcopy(cfg)
    if theta_path is not None:
        snap.dynamics.theta_file = str(Path(theta_path).resolve())
    dump_config(snap, out / "config.yaml")
    prob, exact = build_problem(cfg, theta_path)
    sol = solve_pide(prob)
    write_value_csv(out / "value.csv", sol.value, exact)
    metrics = {"err_sup": value_error(sol.value, exact, "sup"), "err_l2": value_error(sol.value, exact, "l2"),
               "residual": sol.residual, "condition": sol.condition, "m": prob.m, "beta": prob.beta,
               "alpha": prob.alpha}
    _write_json(out / "metrics.json", metrics)
    return metrics


# ---------------------------------------------------------------------------
# perturbation study


def run_study(cfg: RunConfig, out: Path, trials: int | None = None):
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.study
    truth = get_truth(s.truth)
    prob = PideProblem(s.beta, s.alpha, *truth.fields, m=s.m)
    result = perturbation_study(prob, COS3_2X, s.epsilons, trials or s.trials, s.seed, s.shape)
    write_study(result, out / "study.csv", out / "study_summary.json")
    return result


# ---------------------------------------------------------------------------
# reproduce


@dataclass(frozen=True)
class ExamplePreset:
    truth: str
    kind: str
    alphas: tuple
    dt: float
    tcf_variants: tuple  # use_tcf values compared on the same data
    counts: tuple = (10_000, 100_000, 400_000)
    trt: float | None = 20.0  # None: unbiased data is fitted without tail removal


PRESETS = {
    "4.1": ExamplePreset("const_543", "unbiased", (0.3, 0.6), 1 / 40, (False,), trt=None),
    "4.2": ExamplePreset("ex42", "unbiased", (0.3,), 1 / 400, (False,), trt=None),
    "4.3": ExamplePreset("const_543", "filtered", (0.3,), 1 / 40, (True, False)),
    "4.4": ExamplePreset("ex42", "filtered", (0.3,), 1 / 40, (True, False)),
    "4.5": ExamplePreset("const_543", "mcmc", (0.3,), 1 / 40, (True, False)),
}
EXAMPLE_IDS = tuple(PRESETS) + ("study",)
RESULT_HEADER = ["example", "alpha", "num_traj", "repeat", "seed", "tcf", "rel_err_b", "rel_err_d_o",
                 "rel_err_d_f", "outlier", "converged", "final_tcf", "value_err_sup"]


def scaled_count(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def repeat_seed(base: int, *keys) -> int:
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


def _repeat_config(base: RunConfig, preset: ExamplePreset, alpha: float, count: int, seed: int,
                   use_tcf: bool) -> RunConfig:
    cfg = copy.deepcopy(base)
    truth = get_truth(preset.truth)
    cfg.dynamics.truth = preset.truth
    cfg.dynamics.alpha = alpha
    cfg.dataset.kind = preset.kind
    cfg.dataset.num_traj = count
    cfg.dataset.dt = preset.dt
    cfg.dataset.seed = seed
    cfg.dataset.path = None
    cfg.fit.n_modes = truth.n_modes
    cfg.fit.seed = seed
    cfg.fit.no_tcf = not use_tcf
    cfg.fit.trt = preset.trt
    return cfg


def _run_repeat(task):
    example, base, preset, alpha, count, rep, seed, out = task
    logging.getLogger("levy_ctpe").info("example %s alpha=%s n=%d repeat %d", example, alpha, count, rep)
    cfg0 = _repeat_config(base, preset, alpha, count, seed, preset.tcf_variants[0])
    data = make_dataset(cfg0)
    rows = []
    for use_tcf in preset.tcf_variants:
        cfg = _repeat_config(base, preset, alpha, count, seed, use_tcf)
        rdir = out / f"alpha_{alpha}" / f"n_{count}" / f"repeat_{rep:02d}" / ("tcf" if use_tcf else "no_tcf")
        metrics = run_fit(cfg, rdir, dataset=data)
        try:
            ecfg = copy.deepcopy(cfg)
            ecfg.pide.coefficients = "theta"
            ecfg.pide.reward = "cos3_2x"
            value_err = run_evaluate(ecfg, rdir / "evaluate", rdir / "theta.json")["err_sup"]
        except SolverError:
            value_err = math.nan
        e = metrics["rel_err"]
        rows.append([example, alpha, count, rep, seed, int(use_tcf), e["b"], e["d_o"], e["d_f"],
                     int(metrics["outlier"]), int(metrics["converged"]), metrics["final_tcf"], value_err])
    return rows


def run_reproduce(example: str, cfg: RunConfig, out: Path, threads: int = 1) -> Path:
    """Scale and seed come from cfg.reproduce, so the snapshot alone reruns the example."""
    if example not in EXAMPLE_IDS:
        raise ConfigError("example", f"unknown example {example!r}; choose from {EXAMPLE_IDS}")
    scale, seed = cfg.reproduce.scale, cfg.reproduce.seed
    if scale <= 0:
        raise ConfigError("reproduce.scale", "must be positive")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    _write_json(out / "reproduce.json", {"example": example, "scale": scale, "seed": seed})
    if example == "study":
        run_study(cfg, out, scaled_count(cfg.study.trials, scale))
        return out / "study.csv"
    preset = PRESETS[example]
    if cfg.fit.no_tcf:
        preset = replace(preset, tcf_variants=(False,))
    counts = cfg.reproduce.counts or preset.counts
    alphas = cfg.reproduce.alphas or preset.alphas
    tasks = []
    for a in alphas:
        for ci, n in enumerate(counts):
            count = scaled_count(n, scale)
            for rep in range(cfg.reproduce.repeats):
                tasks.append((example, cfg, preset, float(a), count, rep,
                              repeat_seed(seed, int(round(a * 1000)), ci, rep), out))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_repeat, tasks))
    else:
        results = [_run_repeat(t) for t in tasks]
    path = out / "results.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_HEADER)
        for rows in results:
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path

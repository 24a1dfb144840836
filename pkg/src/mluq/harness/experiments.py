"""Experiment stages behind the command line.

Each stage builds what it needs (reusing the offline cache when present),
writes its outputs as plain CSV files plus a manifest with sha256 digests,
and returns a summary dict.  Stages are deterministic given the
configuration: rerunning one produces byte-identical CSV files.
"""

import hashlib
import json
import logging
import os
import time

import numpy as np
import scipy.interpolate

from .. import __version__
from ..errors import ConfigurationError, IntegrityError
from ..estimators import (LevelPlan, cost_matched_mc_samples, mc_estimate,
                          mlmc_estimate, relative_l2_error)
from ..fem import assemble_fine, solve_fine
from ..gmsfem.solver import build_space_hierarchy
from ..grid import build_grids, build_neighborhoods
from ..randfield import (CovarianceSpec, PriorSampler, energy_ratio,
                         sample_permeability, truncated_kle)
from ..samplers import (PosteriorSpec, ProposalSpec, composed_log_acceptance,
                        default_sigmas, detailed_balance_check, log_posterior,
                        metropolis_hastings, mlmcmc_estimate, mlmcmc_screen,
                        screened_log_acceptance)
from .cache import read_offline_cache, write_offline_cache
from .config import config_hash, space_compat_key

log = logging.getLogger(__name__)


def _stage_dir(config, stage):
    path = os.path.join(config.out_dir, stage)
    os.makedirs(path, exist_ok=True)
    return path


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    """Comma-separated table; floats keep full round-trip precision."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, str) or value is None:
        return value
    return str(value)


def write_manifest(config, stage, directory, started, files, summary=None):
    """Stage record: config digest, wall time, output digests, summary."""
    manifest = {
        "stage": stage,
        "package_version": __version__,
        "config_sha256": config_hash(config),
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_seconds": round(time.time() - started, 3),
        "files": {os.path.basename(p): _sha256_file(p) for p in files},
    }
    if summary is not None:
        manifest["summary"] = _jsonable(summary)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def build_hierarchy(config):
    """Offline stage straight from the configuration, no cache involved."""
    grid = build_grids(config.nx_fine, config.ny_fine,
                       config.nx_coarse, config.ny_coarse)
    neighborhoods = build_neighborhoods(grid)
    spec = CovarianceSpec(config.sigma2, config.l1, config.l2)
    model = truncated_kle(grid, spec, config.n_modes)
    return build_space_hierarchy(
        grid, neighborhoods, model, level_dims=config.level_dims,
        n_snapshot_params=config.n_snapshot_params,
        snapshots_per_param=config.snapshots_per_param,
        offline_dim=config.offline_dim, snapshot_seed=config.snapshot_seed)


def default_cache_path(config):
    return os.path.join(config.out_dir,
                        f"offline_{space_compat_key(config)[:12]}.bin")


def load_or_build_hierarchy(config, cache_path=None):
    """Reuse a cached offline stage when compatible, else build and cache it."""
    path = cache_path or default_cache_path(config)
    key = space_compat_key(config)
    if os.path.isfile(path):
        try:
            hierarchy = read_offline_cache(path, compat_key=key)
            log.info("offline cache %s loaded", path)
            return hierarchy
        except (ConfigurationError, IntegrityError) as exc:
            log.warning("offline cache %s rejected (%s); rebuilding", path, exc)
    t0 = time.time()
    hierarchy = build_hierarchy(config)
    log.info("offline stage built in %.1fs", time.time() - t0)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_offline_cache(path, hierarchy, key)
    return hierarchy


def run_kle(config):
    """Eigenvalue decay and captured energy of the truncated expansion."""
    started = time.time()
    out = _stage_dir(config, "kle")
    grid = build_grids(config.nx_fine, config.ny_fine,
                       config.nx_coarse, config.ny_coarse)
    model = truncated_kle(grid, CovarianceSpec(config.sigma2, config.l1, config.l2),
                          config.n_modes)
    # the covariance trace over the unit square integrates to sigma2
    fraction = energy_ratio(model, config.sigma2)
    cum = np.cumsum(model.eigenvalues)
    total = config.sigma2 if config.sigma2 > 0.0 else 1.0
    rows = [(k + 1, model.eigenvalues[k], cum[k] / total)
            for k in range(model.n_modes)]
    path = os.path.join(out, "kle_eigenvalues.csv")
    write_csv(path, ("mode", "eigenvalue", "cumulative_energy_fraction"), rows)
    summary = {"n_modes": model.n_modes, "energy_fraction": fraction}
    write_manifest(config, "kle", out, started, [path], summary)
    return summary


def run_offline(config, cache_path=None):
    """Build the offline spaces and persist them for later stages."""
    started = time.time()
    out = _stage_dir(config, "offline")
    path = cache_path or default_cache_path(config)
    hierarchy = load_or_build_hierarchy(config, path)
    rows = [(i, nbh.coarse_node, space.dims,
             space.eigenvalues[0], space.eigenvalues[-1])
            for i, (nbh, space) in enumerate(zip(hierarchy.neighborhoods,
                                                 hierarchy.offline))]
    table = os.path.join(out, "offline_spaces.csv")
    write_csv(table, ("neighborhood", "coarse_node", "dims",
                      "smallest_eigenvalue", "largest_eigenvalue"), rows)
    dims = [space.dims for space in hierarchy.offline]
    summary = {"cache_path": path, "n_neighborhoods": len(dims),
               "min_dims": int(min(dims)), "max_dims": int(max(dims))}
    write_manifest(config, "offline", out, started, [table, path], summary)
    return summary


def run_forward(config):
    """One prior draw pushed through every level and the fine solver."""
    started = time.time()
    out = _stage_dir(config, "forward")
    hierarchy = load_or_build_hierarchy(config)
    grid = hierarchy.grid
    eta = PriorSampler(config.n_modes, seed=config.prior_seed).draw(0)
    fields = hierarchy.forward_fields(eta, range(hierarchy.n_levels))
    kappa = sample_permeability(hierarchy.kl_model, eta)
    fine = solve_fine(assemble_fine(grid, kappa, hierarchy.source,
                                    hierarchy.boundary))
    header = (["node", "x", "y", "kappa"]
              + [f"level_{d}" for d in hierarchy.level_dims] + ["fine"])
    rows = [(n, grid.fine_coords[n, 0], grid.fine_coords[n, 1], kappa[n],
             *[f[n] for f in fields], fine[n])
            for n in range(grid.n_fine_nodes)]
    path = os.path.join(out, "fields.csv")
    write_csv(path, header, rows)
    errors = [relative_l2_error(f, fine) for f in fields]
    summary = {"eta": eta, "relative_errors": errors}
    write_manifest(config, "forward", out, started, [path], summary)
    return summary


def _replicate_sampler(config, replicate):
    # tag 0 is reserved for the reference stream
    return PriorSampler(config.n_modes, seed=config.prior_seed, tag=1 + replicate)


def _level_forward(hierarchy):
    def forward(eta, levels):
        return hierarchy.forward_fields(eta, levels)
    return forward


def _finest_forward(hierarchy):
    finest = hierarchy.n_levels - 1

    def forward(eta):
        return hierarchy.forward_fields(eta, [finest])[0]
    return forward


def run_mlmc(config):
    """One multilevel run on the configured plan (replicate 0 of the study)."""
    started = time.time()
    out = _stage_dir(config, "mlmc")
    hierarchy = load_or_build_hierarchy(config)
    grid = hierarchy.grid
    plan = LevelPlan(config.level_dims, config.level_samples)
    est = mlmc_estimate(plan, _level_forward(hierarchy),
                        _replicate_sampler(config, 0), workers=config.workers)
    rows = [(l, plan.dims[l], plan.samples[l],
             float(np.sqrt(np.mean(est.level_means[l] ** 2))),
             est.level_variances[l])
            for l in range(plan.n_levels)]
    levels_path = os.path.join(out, "levels.csv")
    write_csv(levels_path,
              ("level", "dims", "samples", "correction_rms", "variance"), rows)
    field_path = os.path.join(out, "estimate.csv")
    write_csv(field_path, ("node", "x", "y", "mean_pressure"),
              [(n, grid.fine_coords[n, 0], grid.fine_coords[n, 1], est.estimate[n])
               for n in range(grid.n_fine_nodes)])
    summary = {"dims": plan.dims, "samples": plan.samples,
               "cost_units": plan.cost_units(),
               "level_variances": est.level_variances,
               "estimate_rms": float(np.sqrt(np.mean(est.estimate ** 2)))}
    write_manifest(config, "mlmc", out, started, [levels_path, field_path], summary)
    return summary


def run_mc(config):
    """Cost-matched plain Monte Carlo at the finest level dimension."""
    started = time.time()
    out = _stage_dir(config, "mc")
    hierarchy = load_or_build_hierarchy(config)
    grid = hierarchy.grid
    plan = LevelPlan(config.level_dims, config.level_samples)
    m_hat = cost_matched_mc_samples(plan)
    est = mc_estimate(_finest_forward(hierarchy), m_hat,
                      _replicate_sampler(config, 0), workers=config.workers)
    field_path = os.path.join(out, "estimate.csv")
    write_csv(field_path, ("node", "x", "y", "mean_pressure"),
              [(n, grid.fine_coords[n, 0], grid.fine_coords[n, 1], est.mean[n])
               for n in range(grid.n_fine_nodes)])
    summary = {"n_samples": m_hat, "sample_variance": est.variance,
               "estimate_rms": float(np.sqrt(np.mean(est.mean ** 2)))}
    write_manifest(config, "mc", out, started, [field_path], summary)
    return summary


def run_table1(config):
    """Replicated error comparison of the multilevel and cost-matched plain
    estimators against a large-sample reference mean."""
    started = time.time()
    out = _stage_dir(config, "table1")
    hierarchy = load_or_build_hierarchy(config)
    plan = LevelPlan(config.level_dims, config.level_samples)
    m_hat = cost_matched_mc_samples(plan)

    if config.reference_solver == "fine":
        def ref_forward(eta):
            kappa = sample_permeability(hierarchy.kl_model, eta)
            return solve_fine(assemble_fine(hierarchy.grid, kappa,
                                            hierarchy.source, hierarchy.boundary))
    else:
        ref_forward = _finest_forward(hierarchy)
    log.info("reference mean: %d samples, %s solver",
             config.n_reference, config.reference_solver)
    ref_sampler = PriorSampler(config.n_modes, seed=config.reference_seed, tag=0)
    reference = mc_estimate(ref_forward, config.n_reference, ref_sampler,
                            workers=config.workers).mean

    rows = []
    for r in range(config.n_replicates):
        sampler = _replicate_sampler(config, r)
        ml = mlmc_estimate(plan, _level_forward(hierarchy), sampler,
                           workers=config.workers)
        mc = mc_estimate(_finest_forward(hierarchy), m_hat, sampler,
                         workers=config.workers)
        e_ml = relative_l2_error(ml.estimate, reference)
        e_mc = relative_l2_error(mc.mean, reference)
        rows.append((r, e_ml, e_mc, e_mc / e_ml, *ml.level_variances))
        log.info("replicate %d: e_ml=%.4f e_mc=%.4f ratio=%.2f",
                 r, e_ml, e_mc, e_mc / e_ml)

    var_cols = [f"variance_l{l}" for l in range(plan.n_levels)]
    rep_path = os.path.join(out, "replicates.csv")
    write_csv(rep_path, ("replicate", "e_mlmc", "e_mc", "ratio", *var_cols), rows)

    errs = np.array([row[1:4] for row in rows], dtype=float)
    variances = np.array([row[4:] for row in rows], dtype=float)
    n = config.n_replicates
    stderr = errs.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(3)
    summary = {
        "n_replicates": n, "mc_samples": m_hat,
        "e_mlmc_mean": float(errs[:, 0].mean()), "e_mlmc_stderr": float(stderr[0]),
        "e_mc_mean": float(errs[:, 1].mean()), "e_mc_stderr": float(stderr[1]),
        "ratio_mean": float(errs[:, 2].mean()), "ratio_stderr": float(stderr[2]),
        "mean_level_variances": variances.mean(axis=0),
        "n_reference": config.n_reference,
        "reference_solver": config.reference_solver,
    }
    sum_path = os.path.join(out, "summary.csv")
    write_csv(sum_path,
              ("e_mlmc_mean", "e_mlmc_stderr", "e_mc_mean", "e_mc_stderr",
               "ratio_mean", "ratio_stderr", "mc_samples",
               *[f"mean_{c}" for c in var_cols]),
              [(summary["e_mlmc_mean"], summary["e_mlmc_stderr"],
                summary["e_mc_mean"], summary["e_mc_stderr"],
                summary["ratio_mean"], summary["ratio_stderr"], m_hat,
                *summary["mean_level_variances"])])
    write_manifest(config, "table1", out, started, [rep_path, sum_path], summary)
    return summary


def run_mlmcmc(config):
    """Screened multilevel chain against synthetic pressure observations."""
    started = time.time()
    out = _stage_dir(config, "mlmcmc")
    hierarchy = load_or_build_hierarchy(config)
    n_levels = hierarchy.n_levels
    points = np.asarray(config.points, dtype=float)

    if config.reference_eta == "zero":
        eta_ref = np.zeros(config.n_modes)
    else:
        eta_ref = PriorSampler(config.n_modes, seed=config.reference_seed,
                               tag=2).draw(0)
    observed = hierarchy.forward_points(eta_ref, [n_levels - 1], points)[0]
    if config.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(config.reference_seed)
        observed = observed + config.noise_sigma * noise_rng.standard_normal(
            observed.size)

    spec = PosteriorSpec(observed, points,
                         default_sigmas(observed, n_levels,
                                        finest_scale=config.sigma_scale))
    forward = hierarchy.point_evaluator(points, cache_size=2 * n_levels)
    eta0 = np.zeros(config.n_modes)
    rng = np.random.default_rng(config.chain_seed)
    log.info("chain: %d final accepts, burn-in %d, sigmas %s",
             config.n_final_accepts, config.burn_in_accepts,
             " ".join(f"{s:.4g}" for s in spec.sigmas))
    result = mlmcmc_screen(spec, ProposalSpec(config.proposal_delta), forward,
                           eta0, rng, n_final_accepts=config.n_final_accepts,
                           burn_in_accepts=config.burn_in_accepts)

    rates = result.acceptance_rates()
    rates_path = os.path.join(out, "acceptance_rates.csv")
    write_csv(rates_path, ("level", "reached", "passed", "rate"),
              [(l, result.counts[l], result.counts[l + 1], rates[l])
               for l in range(n_levels)])

    # iteration 0 is the initial state, so a noise-free self-consistent
    # setup (reference_eta = zero) starts the trace at exactly zero
    initial_misfit = float(np.linalg.norm(
        np.asarray(forward(eta0, n_levels - 1), dtype=float) - observed))
    errors = result.final_errors(observed)
    trace_path = os.path.join(out, "error_trace.csv")
    write_csv(trace_path, ("iteration", "finest_misfit"),
              [(0, initial_misfit)] + [(t + 1, errors[t])
                                       for t in range(errors.size)])

    lp_cols = [f"log_post_l{l}" for l in range(n_levels)]
    eta_cols = [f"eta_{k}" for k in range(config.n_modes)]
    chain_path = os.path.join(out, "chain.csv")
    write_csv(chain_path,
              ("iteration", "levels_passed", "accepted", *lp_cols, *eta_cols),
              [(t + 1, result.reached[t], int(result.reached[t] == n_levels),
                *result.log_posts[t], *result.states[t, -1])
               for t in range(result.n_iterations)])

    est = mlmcmc_estimate(result)
    corr_cols = [f"correction_l{l}" for l in range(1, n_levels)]
    est_path = os.path.join(out, "estimate.csv")
    write_csv(est_path,
              ("x", "y", "observed", "posterior_mean", "initial_level_mean",
               *corr_cols, "abs_gap"),
              [(points[j, 0], points[j, 1], observed[j], est.estimate[j],
                est.initial_mean[j], *est.corrections[:, j],
                abs(est.estimate[j] - observed[j]))
               for j in range(points.shape[0])])

    summary = {
        "counts": result.counts, "acceptance_rates": rates,
        "n_iterations": result.n_iterations, "burn_end": int(result.burn_end),
        "retained": est.n_samples, "initial_misfit": initial_misfit,
        "final_misfit": float(errors[-1]),
        "estimate_gap": relative_l2_error(est.estimate, observed),
        "sigmas": spec.sigmas, "eta_ref": eta_ref,
        "noise_sigma": config.noise_sigma,
    }
    write_manifest(config, "mlmcmc", out, started,
                   [rates_path, trace_path, chain_path, est_path], summary)
    return summary


def _toy_splines(config):
    """Cubic response interpolants of a tiny two-level model, one per level.

    The chain checks need many forward evaluations; interpolating the
    center pressure of a real two-level model over a parameter grid keeps
    the target distribution honest while making repeated density
    evaluations cheap.
    """
    grid = build_grids(10, 10, 2, 2)
    neighborhoods = build_neighborhoods(grid)
    model = truncated_kle(grid, CovarianceSpec(1.0, 0.3, 0.3), 1)
    hierarchy = build_space_hierarchy(grid, neighborhoods, model,
                                      level_dims=(2, 4), n_snapshot_params=3,
                                      snapshots_per_param=4, offline_dim=8,
                                      snapshot_seed=config.snapshot_seed)
    pts = np.array([[0.5, 0.5]])
    eta_grid = np.linspace(-6.0, 6.0, 25)
    values = np.empty((2, eta_grid.size))
    for k, v in enumerate(eta_grid):
        low, high = hierarchy.forward_points(np.array([v]), [0, 1], pts)
        values[0, k] = low[0]
        values[1, k] = high[0]
    return [scipy.interpolate.CubicSpline(eta_grid, values[l]) for l in (0, 1)]


def run_toy_oracle(config):
    """Distributional checks of the samplers against quadrature ground truth.

    A one-parameter two-level model is small enough to integrate its
    posterior numerically, which gives independent references for the
    plain chain law (total variation), the multilevel posterior mean
    (batch-means confidence bound), reversibility of the screened kernel
    on an enumerated state space, and the equivalence of the two
    acceptance formulas.
    """
    started = time.time()
    out = _stage_dir(config, "toy_oracle")
    splines = _toy_splines(config)
    pts = np.array([[0.5, 0.5]])

    def forward(eta, level):
        return np.array([float(splines[level](eta[0]))])

    observed = np.array([float(splines[1](1.5))])
    sigmas = default_sigmas(observed, 2, finest_scale=0.1)
    spec = PosteriorSpec(observed, pts, sigmas)

    def level_log_density(level, eta_values):
        resid = observed[0] - splines[level](eta_values)
        return (-resid * resid / (2.0 * sigmas[level] ** 2)
                - 0.5 * eta_values * eta_values)

    # chain law against cell quadrature of the finest posterior
    rng = np.random.default_rng((config.chain_seed, 0))
    chain = metropolis_hastings(lambda e: log_posterior(1, e, spec, forward),
                                np.zeros(1), ProposalSpec(0.8), rng,
                                n_steps=100_000)
    edges = np.linspace(-8.0, 8.0, 102)
    centers = 0.5 * (edges[:-1] + edges[1:])
    lp = level_log_density(1, centers)
    cell_prob = np.exp(lp - lp.max())
    cell_prob /= cell_prob.sum()
    states = chain.states[:, 0]
    hist = np.histogram(states, bins=edges)[0] / states.size
    tv = 0.5 * float(np.abs(hist - cell_prob).sum()) + 0.5 * (1.0 - hist.sum())

    # multilevel posterior mean against dense quadrature
    rng = np.random.default_rng((config.chain_seed, 1))
    result = mlmcmc_screen(spec, ProposalSpec(0.8), forward, np.zeros(1), rng,
                           n_final_accepts=4000, burn_in_accepts=300)
    est = mlmcmc_estimate(result)
    eta_dense = np.linspace(-8.0, 8.0, 4001)
    w = np.exp(level_log_density(1, eta_dense)
               - level_log_density(1, eta_dense).max())
    oracle = float(np.sum(w * splines[1](eta_dense)) / np.sum(w))
    gap = abs(float(est.estimate[0]) - oracle)
    keep = result.qois[result.burn_end + 1:, -1, 0]
    n_batches = 20
    usable = (keep.size // n_batches) * n_batches
    batches = keep[:usable].reshape(n_batches, -1).mean(axis=1)
    se = float(batches.std(ddof=1) / np.sqrt(n_batches))

    # reversibility of the screened kernel by enumeration
    n_states = 101
    walk = np.zeros((n_states, n_states))
    idx = np.arange(n_states - 1)
    walk[idx, idx + 1] = 0.5
    walk[idx + 1, idx] = 0.5
    grid_eta = np.linspace(-6.0, 6.0, n_states)
    balance = detailed_balance_check(
        walk, [level_log_density(l, grid_eta) for l in (0, 1)])

    # the two acceptance formulas must agree exactly
    rng = np.random.default_rng((config.chain_seed, 2))
    worst = 0.0
    for scale in (1.0, 10.0, 1e6):
        quads = scale * rng.standard_normal((2500, 4))
        for q in quads:
            a = screened_log_acceptance(*q)
            b = composed_log_acceptance(*q)
            worst = max(worst, abs(a - b))

    checks = [
        ("chain_law_total_variation", tv, 0.05, tv <= 0.05),
        ("posterior_mean_gap", gap, 3.0 * se, gap <= 3.0 * se),
        ("detailed_balance_violation", balance, 1e-10, balance <= 1e-10),
        ("acceptance_formula_gap", worst, 0.0, worst == 0.0),
    ]
    path = os.path.join(out, "toy_oracle.csv")
    write_csv(path, ("check", "value", "bound", "passed"),
              [(name, value, bound, int(ok)) for name, value, bound, ok in checks])
    summary = {"tv": tv, "mean_gap": gap, "mean_se": se, "oracle_mean": oracle,
               "balance": balance, "formula_gap": worst,
               "all_passed": all(ok for *_, ok in checks)}
    write_manifest(config, "toy_oracle", out, started, [path], summary)
    return summary

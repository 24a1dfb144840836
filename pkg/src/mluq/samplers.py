"""Random-walk MCMC and multilevel screened MCMC for the Bayesian inverse problem.

The posterior at level l weighs the misfit between observed pressures and
the level-l forward response with a per-level width sigma_l.  The
multilevel sampler draws each proposal once at the initial level and
screens it upward; a rejection at any level kills the proposal for that
iteration while every level keeps its current state.  All acceptance
arithmetic happens in log space.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "PosteriorSpec", "ProposalSpec", "ChainResult", "ScreeningResult",
    "MultilevelPosteriorEstimate", "default_sigmas", "log_posterior",
    "metropolis_hastings", "mlmcmc_screen", "mlmcmc_estimate",
    "screened_log_acceptance", "composed_log_acceptance",
    "detailed_balance_check",
]


@dataclass(frozen=True)
class PosteriorSpec:
    """Observed pressures, measurement points and per-level likelihood widths.

    ``sigmas`` runs coarsest level first and must be nonincreasing: coarse
    levels do not have to match the data as faithfully as the finest one.
    """

    observations: np.ndarray
    points: np.ndarray
    sigmas: tuple

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] != obs.size:
            raise ConfigurationError(
                f"need one (x, y) measurement point per observation, got "
                f"points {pts.shape} for {obs.size} observations")
        if np.any(pts <= 0.0) or np.any(pts >= 1.0):
            raise ConfigurationError("measurement points must be strictly interior")
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigurationError(f"likelihood widths must be positive, got {self.sigmas}")
        if any(b > a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ConfigurationError(
                f"likelihood widths must be nonincreasing across levels, got {self.sigmas}")

    @property
    def n_levels(self):
        return len(self.sigmas)


@dataclass(frozen=True)
class ProposalSpec:
    """Symmetric random-walk step on the mode coefficients."""

    delta: float = 0.2

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigurationError(f"step size must be positive, got {self.delta}")

    def propose(self, eta, rng):
        return eta + self.delta * rng.standard_normal(eta.shape)


def default_sigmas(observations, n_levels, *, finest_scale=0.05):
    """Likelihood width schedule ending at the finest width.

    The finest width is ``finest_scale`` of the root-mean-square observation.
    Coarser widths follow sigma_l = sigma_f * sqrt(w_L / w_l) with
    w_l = 2 - 2^-l, so each level ascent adds half the inverse variance
    gained by the ascent below it.  Early screens therefore do the heavy
    filtering and the per-level acceptance rates come out ordered, with
    hardly any proposals wasted on the expensive levels.
    """
    obs = np.asarray(observations, dtype=float)
    sigma_f = finest_scale * float(np.linalg.norm(obs)) / math.sqrt(obs.size)
    if sigma_f <= 0:
        raise ConfigurationError("observations have zero norm; cannot scale widths")
    weights = 2.0 - 2.0 ** (-np.arange(n_levels, dtype=float))
    return tuple(sigma_f * math.sqrt(weights[-1] / w) for w in weights)


def log_posterior(level, eta, spec, forward):
    """Unnormalized log posterior density at one level.

    ``forward(eta, level)`` returns the level's predicted pressures at the
    measurement points; the prior on eta is standard normal.
    """
    lp, _ = _density_and_response(level, np.asarray(eta, dtype=float), spec, forward)
    return lp


def _density_and_response(level, eta, spec, forward):
    qoi = np.asarray(forward(eta, level), dtype=float)
    resid = spec.observations - qoi
    misfit = float(resid @ resid) / (2.0 * spec.sigmas[level] ** 2)
    return -misfit - 0.5 * float(eta @ eta), qoi


def _accept(log_ratio, u):
    if log_ratio >= 0.0:
        return True
    return u > 0.0 and math.log(u) < log_ratio


def screened_log_acceptance(lp_low_cur, lp_low_prop, lp_high_cur, lp_high_prop):
    """Log acceptance probability of the level screening step.

    Arguments are log densities of the current and proposed states under
    the previous (low) and the screening (high) level posteriors.
    """
    return min(0.0, (lp_low_cur - lp_low_prop) + (lp_high_prop - lp_high_cur))


def composed_log_acceptance(lp_low_cur, lp_low_prop, lp_high_cur, lp_high_prop):
    """Same probability derived from the composed screened proposal density.

    The screened proposal for the high level has density proportional to
    the low-level acceptance times the symmetric base density; writing the
    Metropolis ratio with both directional low-level acceptances and
    cancelling the base density yields exactly the simplified form.
    """
    t = lp_low_prop - lp_low_cur
    log_rho_fwd = min(0.0, t)
    log_rho_rev = min(0.0, -t)
    return min(0.0, (log_rho_rev - log_rho_fwd) + (lp_high_prop - lp_high_cur))


@dataclass(frozen=True)
class ChainResult:
    states: np.ndarray
    log_posts: np.ndarray
    accepted: np.ndarray
    n_accepts: int
    burn_end: int

    @property
    def n_iterations(self):
        return self.states.shape[0]

    @property
    def acceptance_rate(self):
        return self.n_accepts / max(1, self.n_iterations)

    def retained_states(self):
        """Per-iteration states after the burn-in acceptance events."""
        return self.states[self.burn_end + 1:]


def metropolis_hastings(log_target, eta0, proposal, rng, *, n_target_accepts=None,
                        n_steps=None, burn_in_accepts=0, max_iterations=2_000_000):
    """Random-walk chain with a symmetric proposal.

    Runs until ``n_target_accepts`` acceptance events or ``n_steps``
    iterations, whichever is given.  Every iteration's state is stored;
    ``burn_end`` marks the iteration of the last burn-in acceptance so
    ergodic averages can slice past it.
    """
    if (n_target_accepts is None) == (n_steps is None):
        raise ConfigurationError("give exactly one of n_target_accepts or n_steps")
    if n_target_accepts is not None and burn_in_accepts >= n_target_accepts:
        raise ConfigurationError(
            f"burn-in ({burn_in_accepts}) must be below the acceptance "
            f"target ({n_target_accepts})")

    eta = np.array(eta0, dtype=float, copy=True)
    lp = float(log_target(eta))
    states, log_posts, accepted = [], [], []
    n_accepts = 0
    burn_end = -1
    it = 0
    while True:
        if n_steps is not None and it >= n_steps:
            break
        if n_target_accepts is not None and n_accepts >= n_target_accepts:
            break
        if it >= max_iterations:
            raise ConfigurationError(
                f"no {n_target_accepts} acceptances within {max_iterations} "
                "iterations; widen the target or shrink the step")
        prop = proposal.propose(eta, rng)
        lp_prop = float(log_target(prop))
        u = rng.random()
        ok = _accept(lp_prop - lp, u)
        if ok:
            eta, lp = prop, lp_prop
            n_accepts += 1
            if n_accepts == burn_in_accepts:
                burn_end = it
        states.append(eta.copy())
        log_posts.append(lp)
        accepted.append(ok)
        it += 1
    return ChainResult(states=np.array(states), log_posts=np.array(log_posts),
                       accepted=np.array(accepted, dtype=bool),
                       n_accepts=n_accepts, burn_end=burn_end)


@dataclass(frozen=True)
class ScreeningResult:
    """Per-iteration per-level chain record of the multilevel sampler.

    ``counts[0]`` is the number of proposals drawn; ``counts[l]`` counts
    proposals that survived screening at level l-1, so the acceptance rate
    of level l is counts[l + 1] / counts[l].  ``qois`` stores each level's
    forward response at its current state for every iteration.
    """

    states: np.ndarray
    log_posts: np.ndarray
    qois: np.ndarray
    reached: np.ndarray
    counts: np.ndarray
    burn_end: int

    @property
    def n_levels(self):
        return self.log_posts.shape[1]

    @property
    def n_iterations(self):
        return self.states.shape[0]

    def acceptance_rates(self):
        return tuple(self.counts[l + 1] / max(1, self.counts[l])
                     for l in range(self.n_levels))

    def final_errors(self, observations):
        """Misfit norm of the finest-level current state per iteration."""
        resid = self.qois[:, -1, :] - np.asarray(observations, dtype=float)
        return np.linalg.norm(resid, axis=1)


def mlmcmc_screen(spec, proposal, forward, eta0, rng, *, n_final_accepts,
                  burn_in_accepts=0, max_iterations=2_000_000):
    """Multilevel screened random-walk sampler.

    Each iteration draws one proposal from the initial-level current state
    and passes it up through the level posteriors; the first rejection
    retires it.  Runs until ``n_final_accepts`` proposals have passed the
    finest level.  ``forward(eta, level)`` returns the level's predicted
    pressures; repeated calls for the same eta at increasing levels are
    expected to be cheap for the caller.
    """
    n_levels = spec.n_levels
    if n_final_accepts < 1:
        raise ConfigurationError(f"n_final_accepts must be >= 1, got {n_final_accepts}")
    if burn_in_accepts >= n_final_accepts:
        raise ConfigurationError(
            f"burn-in ({burn_in_accepts}) must be below the final-level "
            f"acceptance target ({n_final_accepts})")

    eta0 = np.array(eta0, dtype=float, copy=True)
    cur = [eta0.copy() for _ in range(n_levels)]
    cur_lp, cur_qoi = [], []
    for l in range(n_levels):
        lp, qoi = _density_and_response(l, eta0, spec, forward)
        cur_lp.append(lp)
        cur_qoi.append(qoi)
    # log density of each level's current state under the previous level
    cur_lp_prev = [None] + [cur_lp[l - 1] for l in range(1, n_levels)]

    counts = np.zeros(n_levels + 1, dtype=np.int64)
    states, log_posts, qois, reached = [], [], [], []
    burn_end = -1
    it = 0
    while counts[n_levels] < n_final_accepts:
        if it >= max_iterations:
            raise ConfigurationError(
                f"no {n_final_accepts} finest-level acceptances within "
                f"{max_iterations} iterations; widen sigmas or shrink the step")
        prop = proposal.propose(cur[0], rng)
        counts[0] += 1
        lp_prop, qoi_prop = _density_and_response(0, prop, spec, forward)
        u = rng.random()
        level_reached = 0
        if _accept(lp_prop - cur_lp[0], u):
            level_reached = 1
            counts[1] += 1
            cur[0] = prop
            cur_lp[0] = lp_prop
            cur_qoi[0] = qoi_prop
            lp_prop_prev = lp_prop
            for l in range(1, n_levels):
                lp_prop_l, qoi_prop_l = _density_and_response(l, prop, spec, forward)
                log_rho = screened_log_acceptance(cur_lp_prev[l], lp_prop_prev,
                                                  cur_lp[l], lp_prop_l)
                u = rng.random()
                if not _accept(log_rho, u):
                    break
                level_reached = l + 1
                counts[l + 1] += 1
                cur[l] = prop
                cur_lp[l] = lp_prop_l
                cur_lp_prev[l] = lp_prop_prev
                cur_qoi[l] = qoi_prop_l
                lp_prop_prev = lp_prop_l
        if level_reached == n_levels and counts[n_levels] == burn_in_accepts:
            burn_end = it
        states.append(np.array(cur))
        log_posts.append(list(cur_lp))
        qois.append(np.array(cur_qoi))
        reached.append(level_reached)
        it += 1

    return ScreeningResult(states=np.array(states), log_posts=np.array(log_posts),
                           qois=np.array(qois),
                           reached=np.array(reached, dtype=np.int64),
                           counts=counts, burn_end=burn_end)


@dataclass(frozen=True)
class MultilevelPosteriorEstimate:
    initial_mean: np.ndarray
    corrections: np.ndarray
    n_samples: int

    @property
    def estimate(self):
        total = self.initial_mean.copy()
        for q in self.corrections:
            total += q
        return total


def mlmcmc_estimate(result):
    """Telescoped posterior mean from the screening chain stores.

    The initial-level ergodic mean plus per-level correction means of
    coupled same-iteration states: the level-l term averages
    F_l(current_l) - F_{l-1}(current_{l-1}) over retained iterations.
    """
    keep = result.qois[result.burn_end + 1:]
    if keep.shape[0] == 0:
        raise ConfigurationError("no retained iterations after burn-in")
    initial = keep[:, 0, :].mean(axis=0)
    corrections = np.empty((result.n_levels - 1, keep.shape[2]))
    for l in range(1, result.n_levels):
        corrections[l - 1] = (keep[:, l, :] - keep[:, l - 1, :]).mean(axis=0)
    return MultilevelPosteriorEstimate(initial_mean=initial, corrections=corrections,
                                       n_samples=keep.shape[0])


def detailed_balance_check(proposal_matrix, level_log_densities):
    """Max detailed-balance violation of the screened chain on a finite toy.

    ``proposal_matrix[a, b]`` is the (symmetric) probability of proposing
    state b from state a; ``level_log_densities`` holds per-level
    unnormalized log densities, coarsest first.  Builds the finest-level
    transition kernel by enumeration and returns
    max |pi(a) K(a, b) - pi(b) K(b, a)|.
    """
    q = np.asarray(proposal_matrix, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ConfigurationError(f"proposal matrix must be square, got {q.shape}")
    dens = [np.asarray(d, dtype=float) for d in level_log_densities]
    if not dens or any(d.shape != (q.shape[0],) for d in dens):
        raise ConfigurationError("need one log density per state at every level")

    trans = q.copy()
    lp0 = dens[0]
    # exp may overflow to inf for strongly favored moves; the min caps it
    with np.errstate(over="ignore"):
        trans *= np.minimum(1.0, np.exp(lp0[None, :] - lp0[:, None]))
        for l in range(1, len(dens)):
            low, high = dens[l - 1], dens[l]
            log_rho = (low[:, None] - low[None, :]) + (high[None, :] - high[:, None])
            trans *= np.minimum(1.0, np.exp(log_rho))
    np.fill_diagonal(trans, 0.0)
    np.fill_diagonal(trans, np.maximum(0.0, 1.0 - trans.sum(axis=1)))

    lp = dens[-1] - dens[-1].max()
    pi = np.exp(lp)
    pi /= pi.sum()
    flow = pi[:, None] * trans
    return float(np.abs(flow - flow.T).max())

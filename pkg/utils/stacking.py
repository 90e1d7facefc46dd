"""
Stacking of non-mixing chains.

The stacking objective over simplex weights w is

    sum_i log sum_k w_k p_k(y_i | y_-i)  +  sum_k (alpha_k - 1) log w_k

where the second term is a Dirichlet(alpha) prior partially pooling the
weights towards effective-sample-size proportions. It is maximized by
exponentiated-gradient (mirror) ascent with backtracking, which keeps every
iterate strictly inside the simplex.

Baseline weightings (uniform, pseudo-BMA, mode height, importance weighting)
and the monitoring curve over the number of chains live here as well.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from utils.config import DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_TOL, parallel_map
from utils.errors import ConvergenceError, DimensionMismatch, DomainError
from utils.psis import LooMatrix

logger = logging.getLogger(__name__)

MODULE = "stacking"
SIMPLEX_TOL = 1e-8
PRIOR_FORMS = ("shifted", "literal")


@dataclass(frozen=True)
class ChainWeights:
    """
    A point on the simplex, with how it was obtained.

    Attributes:
        w: weights, nonnegative, summing to 1
        method: "stacking", "pseudo-bma", "uniform", "mode-height" or "importance"
        objective: stacking objective at w (stacking only)
        iterations: optimizer iterations (stacking only)
        gap: duality gap bound on the objective's suboptimality (stacking only)
    """

    w: np.ndarray
    method: str = "stacking"
    objective: Optional[float] = None
    iterations: int = 0
    gap: Optional[float] = None

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64, copy=True).ravel()
        if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w < 0):
            raise DomainError(f"weights must be finite and nonnegative, got {w}", module=MODULE)
        total = w.sum()
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise DomainError(f"weights must sum to 1, got {total!r}", module=MODULE)
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n_clusters(self) -> int:
        return int(self.w.size)

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "weights": self.w.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "gap": self.gap,
        }


@dataclass(frozen=True)
class StackingConfig:
    """
    Settings of the stacking optimizer.

    Attributes:
        lambda_: Dirichlet scale, > 1 (1.001 by default)
        tol: convergence tolerance on the duality gap, relative to 1 + |objective|
        max_iter: iteration cap
        ess: per-cluster effective sample sizes; None falls back to draw counts,
            then to equal values
        prior_form: "shifted" (alpha_k = 1 + (lambda - 1) K ess_k / sum ess) or
            "literal" (alpha_k = lambda ess_k / sum ess)
    """

    lambda_: float = DEFAULT_LAMBDA
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    ess: Optional[Sequence[float]] = None
    prior_form: str = "shifted"

    def __post_init__(self):
        if not self.lambda_ > 1.0:
            raise DomainError(
                f"lambda must exceed 1 (lambda = 1 is only reachable as a limit), got {self.lambda_}",
                module=MODULE,
            )
        if not self.tol > 0 or self.max_iter < 1:
            raise DomainError("tol must be positive and max_iter at least 1", module=MODULE)
        if self.prior_form not in PRIOR_FORMS:
            raise DomainError(f"prior_form must be one of {PRIOR_FORMS}", module=MODULE)
        if self.ess is not None:
            ess = np.asarray(self.ess, dtype=np.float64)
            if np.any(~(ess > 0)):
                raise DomainError("effective sample sizes must be positive", module=MODULE)
            object.__setattr__(self, "ess", tuple(float(e) for e in ess))


@dataclass(frozen=True)
class MonitorCurve:
    """Stacked leave-one-out lpd after re-optimizing on the first K' chains of `order`."""

    lpd_loo: np.ndarray
    order: Sequence[int]
    weights: List[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "order": [int(k) for k in self.order],
            "n_chains": list(range(1, len(self.lpd_loo) + 1)),
            "lpd_loo": self.lpd_loo.tolist(),
            "weights": [w.tolist() for w in self.weights],
        }


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def prior_alpha(cfg: StackingConfig, n_clusters: int, draw_counts=None) -> np.ndarray:
    """
    Dirichlet concentrations for the weight prior.

    ESS comes from cfg.ess, else the clusters' draw counts, else is equal.
    """
    if cfg.ess is not None:
        ess = np.asarray(cfg.ess, dtype=np.float64)
    elif draw_counts is not None:
        ess = np.asarray(draw_counts, dtype=np.float64)
    else:
        ess = np.ones(n_clusters)
    if ess.size != n_clusters:
        raise DimensionMismatch(f"{ess.size} ESS values for {n_clusters} clusters", module=MODULE)
    share = ess / ess.sum()
    if cfg.prior_form == "literal":
        alpha = cfg.lambda_ * share
        if np.any(alpha < 1.0):
            logger.warning(
                "Dirichlet concentrations %s fall below 1: the prior pulls weights onto the "
                "simplex boundary and the objective has no interior maximizer", np.round(alpha, 4),
            )
        return alpha
    return 1.0 + (cfg.lambda_ - 1.0) * n_clusters * share


def _row_scaled(loo: LooMatrix):
    shift = loo.log_loo.max(axis=1)
    return np.exp(loo.log_loo - shift[:, None]), shift


def _point_weights(point_weights, n_obs: int) -> np.ndarray:
    if point_weights is None:
        return np.ones(n_obs)
    c = np.asarray(point_weights, dtype=np.float64)
    if c.shape != (n_obs,) or np.any(c < 0):
        raise DimensionMismatch(f"point weights must be {n_obs} nonnegative values", module=MODULE)
    return c


def _prior_term(w: np.ndarray, alpha: np.ndarray) -> float:
    exponent = alpha - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(exponent == 0.0, 0.0, exponent * np.log(w))
    return float(np.sum(terms))


def stacked_lpd(w, loo: LooMatrix, point_weights=None) -> float:
    """sum_i log sum_k w_k p_k(y_i | y_-i): the data part of the objective."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if w.size != loo.n_chains:
        raise DimensionMismatch(f"{w.size} weights for {loo.n_chains} loo columns", module=MODULE)
    scaled, shift = _row_scaled(loo)
    c = _point_weights(point_weights, loo.n_obs)
    with np.errstate(divide="ignore"):
        return float(np.sum(c * (shift + np.log(scaled @ w))))


def objective(w, loo: LooMatrix, cfg: StackingConfig, draw_counts=None, point_weights=None) -> float:
    """
    Stacking objective with the Dirichlet prior.

    Args:
        w: ChainWeights or weight vector on the simplex
        loo: leave-one-out densities
        cfg: prior scale and ESS
        draw_counts: per-cluster draw counts (ESS fallback)
        point_weights: optional per-observation weights (default all 1)

    Returns:
        The objective; -inf when a weight hits 0 where its prior exponent is positive
    """
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    alpha = prior_alpha(cfg, loo.n_chains, draw_counts)
    return stacked_lpd(w, loo, point_weights) + _prior_term(w, alpha)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

def optimize_weights(loo: LooMatrix, cfg: StackingConfig = StackingConfig(), draw_counts=None,
                     point_weights=None) -> ChainWeights:
    """
    Maximize the stacking objective over the simplex.

    Exponentiated-gradient ascent from the uniform point with an Armijo
    backtracking step that doubles after every accepted move. Stops when the
    Frank-Wolfe duality gap max_k g_k - w.g (an upper bound on the remaining
    suboptimality of a concave objective) drops below tol * (1 + |f|), or when
    no step can improve the objective in floating point.

    Raises:
        ConvergenceError: max_iter reached; `best` holds the best ChainWeights
    """
    n_clusters = loo.n_chains
    if n_clusters == 1:
        w = np.ones(1)
        return ChainWeights(w, "stacking", objective(w, loo, cfg, draw_counts, point_weights), 0, 0.0)

    alpha = prior_alpha(cfg, n_clusters, draw_counts)
    exponent = alpha - 1.0
    scaled, shift = _row_scaled(loo)
    c = _point_weights(point_weights, loo.n_obs)
    offset = float(np.sum(c * shift))

    def value(w):
        with np.errstate(divide="ignore", invalid="ignore"):
            return offset + float(np.sum(c * np.log(scaled @ w))) + _prior_term(w, alpha)

    def gradient(w):
        return scaled.T @ (c / (scaled @ w)) + exponent / w

    log_w = np.full(n_clusters, -np.log(n_clusters))
    w = np.exp(log_w)
    f = value(w)
    g = gradient(w)
    step = 1.0 / max(np.max(np.abs(g)), 1e-12)
    gap = float(np.max(g) - g @ w)

    for iteration in range(1, cfg.max_iter + 1):
        if gap <= cfg.tol * (1.0 + abs(f)):
            logger.info("Stacking converged after %d iterations: objective %.10g, gap %.3g", iteration - 1, f, gap)
            return ChainWeights(w, "stacking", f, iteration - 1, gap)

        accepted = False
        while step > 1e-300:
            trial_log = log_w + step * g
            trial_log -= logsumexp(trial_log)
            trial = np.exp(trial_log)
            f_trial = value(trial)
            if np.isfinite(f_trial) and f_trial >= f + 1e-4 * float(g @ (trial - w)) and f_trial >= f:
                accepted = True
                break
            step *= 0.5
        if not accepted or np.array_equal(trial, w):
            # floating point cannot improve further
            if gap <= 1e-6 * (1.0 + abs(f)):
                logger.info("Stacking stopped at numerical precision after %d iterations: gap %.3g", iteration, gap)
                return ChainWeights(w, "stacking", f, iteration, gap)
            best = ChainWeights(w, "stacking", f, iteration, gap)
            raise ConvergenceError(
                f"line search stalled with duality gap {gap:.3g}", best=best, module=MODULE,
                iterations=iteration, gap=gap,
            )
        log_w, w, f = trial_log, trial, f_trial
        g = gradient(w)
        gap = float(np.max(g) - g @ w)
        step *= 2.0
        logger.debug("iteration %d: objective %.12g gap %.3g step %.3g", iteration, f, gap, step)

    best = ChainWeights(w, "stacking", f, cfg.max_iter, gap)
    raise ConvergenceError(
        f"stacking did not converge in {cfg.max_iter} iterations (gap {gap:.3g})",
        best=best, module=MODULE, iterations=cfg.max_iter, gap=gap,
    )


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------

def uniform_weights(n_clusters: int) -> ChainWeights:
    """w_k = 1/K."""
    if n_clusters < 1:
        raise DomainError("at least one cluster is required", module=MODULE)
    return ChainWeights(np.full(n_clusters, 1.0 / n_clusters), "uniform")


def pseudo_bma_weights(loo: LooMatrix) -> ChainWeights:
    """w_k proportional to exp(sum_i log p_k(y_i | y_-i))."""
    return ChainWeights(softmax(loo.log_loo.sum(axis=0)), "pseudo-bma")


def mode_height_weights(log_heights) -> ChainWeights:
    """w_k proportional to the posterior density at each cluster's mode (given on the log scale)."""
    log_heights = np.asarray(log_heights, dtype=np.float64).ravel()
    if log_heights.size == 0 or not np.all(np.isfinite(log_heights)):
        raise DomainError("log mode heights must be finite", module=MODULE)
    return ChainWeights(softmax(log_heights), "mode-height")


def importance_weights(log_post: Sequence) -> ChainWeights:
    """
    w_k proportional to the mean posterior density over cluster k's draws.

    Args:
        log_post: one vector per cluster of log p(theta_ks | y) (unnormalized is fine)
    """
    log_means = []
    for k, values in enumerate(log_post):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise DomainError(f"log posterior densities of cluster {k} must be finite", module=MODULE)
        log_means.append(logsumexp(values) - np.log(values.size))
    return ChainWeights(softmax(np.array(log_means)), "importance")


def stacked_ess(w, ess) -> float:
    """Effective sample size of the weighted draws: (sum_k w_k^2 / ess_k)^-1."""
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    ess = np.asarray(ess, dtype=np.float64)
    if w.shape != ess.shape:
        raise DimensionMismatch(f"{w.size} weights for {ess.size} ESS values", module=MODULE)
    return float(1.0 / np.sum(w ** 2 / ess))


def heldout_log_score(w, log_density) -> float:
    """
    Mean log predictive density of the stacked mixture on held-out points.

    Args:
        w: ChainWeights or weight vector
        log_density: [n_test x K] log p_k(y_test_i)
    """
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    log_density = np.asarray(log_density, dtype=np.float64)
    if log_density.ndim != 2 or log_density.shape[1] != w.size:
        raise DimensionMismatch(f"held-out densities must be n x {w.size}", module=MODULE)
    with np.errstate(divide="ignore"):
        return float(np.mean(logsumexp(log_density + np.log(w), axis=1)))


# --------------------------------------------------------------------------
# Monitoring
# --------------------------------------------------------------------------

def monitor_curve(loo: LooMatrix, cfg: StackingConfig = StackingConfig(), order=None, draw_counts=None,
                  threads: int = 1) -> MonitorCurve:
    """
    Stacked leave-one-out lpd as a function of how many chains are used.

    For every prefix length K' of `order`, the weights are re-optimized on those
    chains alone and sum_i log sum_k w_k p_k(y_i | y_-i) is recorded.
    """
    n_clusters = loo.n_chains
    order = list(range(n_clusters)) if order is None else [int(k) for k in order]
    if sorted(order) != list(range(n_clusters)):
        raise DimensionMismatch(f"order must be a permutation of 0..{n_clusters - 1}", module=MODULE)
    ess = None if cfg.ess is None else np.asarray(cfg.ess)
    counts = None if draw_counts is None else np.asarray(draw_counts)

    def prefix(size):
        index = order[:size]
        sub_cfg = replace(cfg, ess=None if ess is None else ess[index])
        sub_counts = None if counts is None else counts[index]
        sub = loo.columns(index)
        weights = optimize_weights(sub, sub_cfg, sub_counts)
        return stacked_lpd(weights, sub), weights.w

    results = parallel_map(prefix, range(1, n_clusters + 1), threads)
    return MonitorCurve(
        lpd_loo=np.array([r[0] for r in results]),
        order=order,
        weights=[r[1] for r in results],
    )

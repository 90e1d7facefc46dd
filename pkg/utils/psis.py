"""
Pareto smoothed importance sampling for per-chain leave-one-out densities.

For chain k and observation i the raw importance ratios are 1 / p(y_i | theta_ks).
Their largest values are replaced by expected order statistics of a generalized
Pareto fit and the column is right-truncated at its raw maximum. The smoothed
ratios reweight the chain's own draws:

    p_k(y_i | y_-i) ~= sum_s p(y_i | theta_ks) r_iks / sum_s r_iks

The fitted shape k-hat of every column is kept as a reliability diagnostic.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from utils.config import parallel_map
from utils.draws import ChainDraws, DrawSet
from utils.errors import DimensionMismatch, DomainError, NumericalFailure, SmoothingSkipped

logger = logging.getLogger(__name__)

MODULE = "psis"
MIN_TAIL = 5
KHAT_SENTINEL = -np.inf
BLOCK_COLUMNS = 256

# (upper edge, label); a value belongs to the first bin whose edge it does not exceed
KHAT_BINS = (
    (0.5, "good"),
    (0.7, "ok"),
    (1.0, "bad"),
    (np.inf, "very bad"),
)
KHAT_BIN_LABELS = {
    "good": "(-Inf, 0.5]",
    "ok": "(0.5, 0.7]",
    "bad": "(0.7, 1]",
    "very bad": "(1, Inf)",
}


@dataclass(frozen=True)
class GpdFit:
    """Generalized Pareto fit: shape k, scale sigma > 0, location mu (the threshold)."""

    k: float
    sigma: float
    mu: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"GPD scale must be positive, got {self.sigma}", module=MODULE)

    def quantile(self, p) -> np.ndarray:
        return self.mu + stats.genpareto.ppf(p, c=self.k, scale=self.sigma)


@dataclass(frozen=True)
class SmoothedRatios:
    """Smoothed ratios ([S x n], or a block of columns) with the k-hat of every column."""

    r: np.ndarray
    khat: np.ndarray


@dataclass(frozen=True)
class LooMatrix:
    """
    Per-chain leave-one-out predictive densities, stored on the log scale.

    Attributes:
        log_loo: [n x K] log p_k(y_i | y_-i)
        khat: [n x K] Pareto k-hat (KHAT_SENTINEL where smoothing was skipped)
        chain_ids: one identifier per column
    """

    log_loo: np.ndarray
    khat: Optional[np.ndarray] = None
    chain_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        log_loo = np.array(self.log_loo, dtype=np.float64, copy=True)
        if log_loo.ndim == 1:
            log_loo = log_loo.reshape(-1, 1)
        if log_loo.ndim != 2 or log_loo.size == 0:
            raise DimensionMismatch(f"loo matrix must be n x K, got shape {log_loo.shape}", module=MODULE)
        bad = ~np.isfinite(log_loo)
        if bad.any():
            i, k = np.argwhere(bad)[0]
            raise NumericalFailure(
                f"leave-one-out density at observation {i}, chain {k} is not positive and finite",
                module=MODULE, observation=int(i), chain=int(k),
            )
        khat = np.full(log_loo.shape, KHAT_SENTINEL) if self.khat is None else np.array(self.khat, dtype=np.float64)
        if khat.shape != log_loo.shape:
            raise DimensionMismatch("khat and loo shapes differ", module=MODULE)
        ids = tuple(self.chain_ids) or tuple(f"chain_{k}" for k in range(log_loo.shape[1]))
        if len(ids) != log_loo.shape[1]:
            raise DimensionMismatch("one chain id per loo column is required", module=MODULE)
        log_loo.setflags(write=False)
        khat.setflags(write=False)
        object.__setattr__(self, "log_loo", log_loo)
        object.__setattr__(self, "khat", khat)
        object.__setattr__(self, "chain_ids", ids)

    @classmethod
    def from_density(cls, loo, khat=None, chain_ids: Sequence[str] = ()) -> "LooMatrix":
        """Build from densities on the natural scale; entries must be > 0."""
        loo = np.asarray(loo, dtype=np.float64)
        if np.any(loo <= 0) or not np.all(np.isfinite(loo)):
            i, k = np.argwhere((loo <= 0) | ~np.isfinite(loo))[0]
            raise NumericalFailure(
                f"leave-one-out density at observation {i}, chain {k} is not positive and finite",
                module=MODULE, observation=int(i), chain=int(k),
            )
        return cls(np.log(loo), khat, tuple(chain_ids))

    @property
    def loo(self) -> np.ndarray:
        return np.exp(self.log_loo)

    @property
    def n_obs(self) -> int:
        return int(self.log_loo.shape[0])

    @property
    def n_chains(self) -> int:
        return int(self.log_loo.shape[1])

    def columns(self, index) -> "LooMatrix":
        """Sub-matrix holding only the given chain columns, in the given order."""
        index = list(index)
        return LooMatrix(self.log_loo[:, index], self.khat[:, index], tuple(self.chain_ids[k] for k in index))

    def to_dict(self) -> Dict:
        return {
            "chain_ids": list(self.chain_ids),
            "log_loo": self.log_loo.tolist(),
            "khat": self.khat.tolist(),
            "elpd_loo": self.log_loo.sum(axis=0).tolist(),
        }


def tail_length(n_draws: int) -> int:
    """Tail size M = min(ceil(0.2 S), ceil(3 sqrt(S)))."""
    return int(min(np.ceil(0.2 * n_draws), np.ceil(3.0 * np.sqrt(n_draws))))


def _gpdfit(excess: np.ndarray) -> Tuple[float, float]:
    """
    Profile posterior-mean estimate of the GPD shape and scale.

    Args:
        excess: sorted (ascending) nonnegative exceedances over the threshold

    Returns:
        (k, sigma) with a weakly informative prior pulling k towards 0.5
    """
    prior_bs = 3
    prior_k = 10
    n = excess.size
    m_est = 30 + int(n ** 0.5)
    quartile = excess[int(n / 4 + 0.5) - 1]
    if quartile <= 0:
        raise SmoothingSkipped("lower quartile of the tail sits on the threshold", module=MODULE)

    b_ary = 1 - np.sqrt(m_est / (np.arange(1, m_est + 1, dtype=float) - 0.5))
    b_ary /= prior_bs * quartile
    b_ary += 1 / excess[-1]

    k_ary = np.log1p(-b_ary[:, None] * excess).mean(axis=1)
    len_scale = n * (np.log(-(b_ary / k_ary)) - k_ary - 1)
    weights = 1 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)

    real_idxs = weights >= 10 * np.finfo(float).eps
    if not np.all(real_idxs):
        weights = weights[real_idxs]
        b_ary = b_ary[real_idxs]
    weights /= weights.sum()

    b_post = np.sum(b_ary * weights)
    k_post = np.log1p(-b_post * excess).mean()
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    sigma = -k_post / b_post
    return float(k_post), float(sigma)


def fit_gpd_tail(x, tail_count: int) -> GpdFit:
    """
    Fit a generalized Pareto distribution to the largest values of x.

    Args:
        x: values (any order)
        tail_count: number M of largest values forming the tail, M >= 5

    Returns:
        GpdFit whose location is the threshold: the largest value below the tail
        (0, the lower bound of importance ratios, when x has no value below it)

    Raises:
        SmoothingSkipped: fewer than 5 exceedances, a constant tail, or a
            degenerate fit
    """
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if tail_count < MIN_TAIL:
        raise SmoothingSkipped(f"tail of {tail_count} values is shorter than {MIN_TAIL}", module=MODULE)
    if x.size < tail_count:
        raise DomainError(f"{x.size} values cannot hold a tail of {tail_count}", module=MODULE)
    tail = x[-tail_count:]
    mu = float(x[-tail_count - 1]) if x.size > tail_count else 0.0
    excess = tail - mu
    if np.ptp(tail) == 0.0 or np.count_nonzero(excess > 0) < MIN_TAIL:
        raise SmoothingSkipped("tail is constant or has too few exceedances", module=MODULE)
    with np.errstate(all="ignore"):
        k, sigma = _gpdfit(excess)
    if not (np.isfinite(k) and np.isfinite(sigma) and sigma > 0):
        raise SmoothingSkipped("generalized Pareto fit did not converge to finite values", module=MODULE)
    return GpdFit(k=k, sigma=sigma, mu=mu)


def smooth_column(raw) -> Tuple[np.ndarray, float]:
    """
    Pareto-smooth one column of raw importance ratios.

    The M largest ratios are replaced, in ascending order at their original
    positions, by GPD quantiles at (z - 0.5)/M, z = 1..M; everything is then
    truncated at max(raw).

    Returns:
        (smoothed ratios, k-hat); skipped columns come back unchanged with
        k-hat = KHAT_SENTINEL
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or np.any(raw < 0) or not np.any(raw > 0):
        raise DomainError("raw ratios must be a nonnegative vector that is not all zero", module=MODULE)
    n_tail = tail_length(raw.size)
    try:
        fit = fit_gpd_tail(raw, n_tail)
    except SmoothingSkipped:
        return raw.copy(), KHAT_SENTINEL
    tail_idx = np.argsort(raw, kind="stable")[-n_tail:]
    plotting = (np.arange(1, n_tail + 1) - 0.5) / n_tail
    smoothed = raw.copy()
    smoothed[tail_idx] = fit.quantile(plotting)
    np.minimum(smoothed, raw.max(), out=smoothed)
    return smoothed, fit.k


def _ratios(log_lik: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    neg = -log_lik
    shift = neg.max(axis=0)
    return np.exp(neg - shift), shift


def raw_ratios(chain: ChainDraws) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw leave-one-out importance ratios of a chain.

    Returns:
        (ratios, shift): ratios[s, i] = exp(-log_lik[s, i] - shift[i]) with
        shift[i] = max_s(-log_lik[s, i]), so every column peaks at exactly 1.
        The shift is a per-column constant and cancels in the self-normalized
        leave-one-out estimate.
    """
    return _ratios(chain.log_lik)


def _smooth_block(log_lik: np.ndarray) -> SmoothedRatios:
    ratios, _ = _ratios(log_lik)
    khat = np.empty(ratios.shape[1])
    for i in range(ratios.shape[1]):
        ratios[:, i], khat[i] = smooth_column(ratios[:, i])
    return SmoothedRatios(r=ratios, khat=khat)


def smooth_chain(chain: ChainDraws) -> SmoothedRatios:
    """Smooth every column of a chain's raw ratios."""
    return _smooth_block(chain.log_lik)


def chain_log_loo(chain: ChainDraws, block_size: int = BLOCK_COLUMNS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log leave-one-out densities of one chain.

    Columns are smoothed block_size at a time, so the working set stays at
    S x block_size whatever the number of observations.

    Returns:
        (log p_k(y_i | y_-i) for every i, k-hat for every i)
    """
    log_loo = np.empty(chain.n_obs)
    khat = np.empty(chain.n_obs)
    for start in range(0, chain.n_obs, block_size):
        block = slice(start, min(start + block_size, chain.n_obs))
        log_lik = chain.log_lik[:, block]
        smoothed = _smooth_block(log_lik)
        khat[block] = smoothed.khat
        with np.errstate(divide="ignore"):
            log_r = np.log(smoothed.r, out=smoothed.r)
        log_loo[block] = logsumexp(log_lik + log_r, axis=0) - logsumexp(log_r, axis=0)
    skipped = int(np.count_nonzero(np.isneginf(khat)))
    if skipped:
        logger.debug("chain %s: %d of %d columns passed through unsmoothed", chain.chain_id, skipped, chain.n_obs)
    return log_loo, khat


def loo_matrix(ds: DrawSet, threads: int = 1) -> LooMatrix:
    """
    PSIS leave-one-out density of every observation under every chain.

    Raises:
        NumericalFailure: an entry is nonpositive or NaN, naming (i, k)
    """
    results = parallel_map(chain_log_loo, ds.chains, threads)
    log_loo = np.column_stack([r[0] for r in results])
    khat = np.column_stack([r[1] for r in results])
    loo = LooMatrix(log_loo, khat, tuple(ds.chain_ids))
    summary = khat_summary(khat)
    flagged = summary["bins"]["bad"]["count"] + summary["bins"]["very bad"]["count"]
    if flagged:
        logger.warning("%d of %d k-hat values exceed 0.7; those leave-one-out estimates are unreliable",
                       flagged, khat.size)
    return loo


def khat_summary(khat) -> Dict:
    """
    Count k-hat values in the four reliability bins.

    The skipped-smoothing sentinel counts as good.

    Returns:
        {"total": N, "bins": {label: {"range", "count", "proportion"}}}
    """
    khat = np.asarray(khat, dtype=np.float64).ravel()
    total = khat.size
    bins = {}
    lower = -np.inf
    for upper, label in KHAT_BINS:
        if lower == -np.inf:
            mask = khat <= upper
        else:
            mask = (khat > lower) & (khat <= upper)
        count = int(np.count_nonzero(mask))
        bins[label] = {
            "range": KHAT_BIN_LABELS[label],
            "count": count,
            "proportion": count / total if total else 0.0,
        }
        lower = upper
    return {"total": total, "bins": bins}

"""
Within-chain mixing, effective sample size and between-chain clustering.

The scalar series a chain is judged on is chosen by a summary spec:

    "mean_loglik"   per-draw mean log predictive density (1/n) sum_i log_lik[s, i]
    "param:<name>"  one parameter column
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from utils.config import DEFAULT_RHAT_THRESHOLD, DEFAULT_SUMMARY, parallel_map
from utils.draws import ChainDraws, DrawSet, assemble, concat_chains
from utils.errors import DimensionMismatch, TooFewDraws

logger = logging.getLogger(__name__)

MODULE = "diagnostics"


@dataclass(frozen=True)
class ClusterAssignment:
    """
    Partition of M chains into K clusters.

    Attributes:
        labels: cluster index (0..K-1) per chain, numbered by first appearance
    """

    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim != 1 or labels.size == 0:
            raise DimensionMismatch("labels must be a nonempty vector", module=MODULE)
        if labels.min() != 0 or set(np.unique(labels)) != set(range(labels.max() + 1)):
            raise DimensionMismatch("labels must cover 0..K-1 without gaps", module=MODULE)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1

    def members(self, k: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.labels == k)]


@dataclass(frozen=True)
class ChainDiagnostics:
    """Per-chain diagnostics plus the pairwise mixing matrix and clustering."""

    chain_ids: Sequence[str]
    split_rhat: np.ndarray
    ess: np.ndarray
    max_pointwise_rhat: np.ndarray
    pairwise: np.ndarray
    clusters: ClusterAssignment
    summary: str
    threshold: float

    def cluster_ess(self) -> np.ndarray:
        """Effective sample size per cluster: member chains are independent, so ESS adds."""
        return np.array([
            self.ess[self.clusters.members(k)].sum() for k in range(self.clusters.n_clusters)
        ])

    def to_dict(self) -> Dict:
        return {
            "summary": self.summary,
            "threshold": self.threshold,
            "per_chain": [
                {
                    "chain_id": chain_id,
                    "split_rhat": float(self.split_rhat[j]),
                    "ess": float(self.ess[j]),
                    "max_pointwise_rhat": float(self.max_pointwise_rhat[j]),
                    "cluster": int(self.clusters.labels[j]),
                }
                for j, chain_id in enumerate(self.chain_ids)
            ],
            "pairwise": self.pairwise.tolist(),
            "clusters": self.clusters.labels.tolist(),
            "n_clusters": self.clusters.n_clusters,
        }


# --------------------------------------------------------------------------
# split-R-hat
# --------------------------------------------------------------------------

def _grouped_rhat(groups: Sequence[np.ndarray]) -> float:
    """
    R-hat over an arbitrary number of half-chains.

    With N draws in m groups, B = (2N/m) sum_g (mean_g - mean)^2 and
    W = sum_g sum_s (x - mean_g)^2 / (N - m); R-hat = sqrt((N-m)/N + 2B/(NW)).
    For m = 2 this is exactly split-R-hat, and duplicating every group leaves it
    unchanged.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    m = len(groups)
    n_total = sum(g.size for g in groups)
    grand_mean = np.concatenate(groups).mean()
    means = np.array([g.mean() for g in groups])
    between = (2.0 * n_total / m) * np.sum((means - grand_mean) ** 2)
    within = sum(np.sum((g - g.mean()) ** 2) for g in groups) / (n_total - m)
    base = (n_total - m) / n_total
    if within == 0.0:
        # exact ties inside every half: only disagreement between halves can show
        return float("inf") if between > 0.0 else float(np.sqrt(base))
    return float(np.sqrt(base + 2.0 * between / (n_total * within)))


def _halves(series: np.ndarray):
    half = series.size // 2
    return series[:half], series[half:]


def split_rhat(series) -> float:
    """
    Split-R-hat of a single chain's scalar series.

    Args:
        series: draws of one scalar, S >= 4

    Returns:
        sqrt((S-2)/S + 2B/(SW)); +inf when W = 0 < B, sqrt((S-2)/S) when W = B = 0
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    if series.size < 4:
        raise TooFewDraws(f"split-R-hat needs at least 4 draws, got {series.size}", module=MODULE)
    if not np.all(np.isfinite(series)):
        raise DimensionMismatch("split-R-hat series must be finite", module=MODULE)
    return _grouped_rhat(_halves(series))


def pointwise_rhat(chain: ChainDraws) -> np.ndarray:
    """Split-R-hat of every log-likelihood column of a chain."""
    if chain.n_draws < 4:
        raise TooFewDraws(f"split-R-hat needs at least 4 draws, got {chain.n_draws}", module=MODULE)
    first, second = _halves(chain.log_lik)
    n_total = chain.n_draws
    grand = chain.log_lik.mean(axis=0)
    between = n_total * ((first.mean(axis=0) - grand) ** 2 + (second.mean(axis=0) - grand) ** 2)
    within = (((first - first.mean(axis=0)) ** 2).sum(axis=0)
              + ((second - second.mean(axis=0)) ** 2).sum(axis=0)) / (n_total - 2)
    base = (n_total - 2) / n_total
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(base + 2.0 * between / (n_total * within))
    rhat = np.where(within == 0.0, np.where(between > 0.0, np.inf, np.sqrt(base)), rhat)
    return rhat


# --------------------------------------------------------------------------
# Effective sample size
# --------------------------------------------------------------------------

def _autocorrelation(series: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation at lags 0..S-1 via zero-padded FFT."""
    n = series.size
    centered = series - series.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n] / n
    return acov / acov[0]


def chain_ess(series) -> float:
    """
    Effective sample size by Geyer's initial positive sequence, capped at S.

    Args:
        series: draws of one scalar, S >= 8

    Returns:
        S / tau with tau = -1 + 2 * sum of the leading positive pair sums
        rho_2m + rho_2m+1; a constant series reports S
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    n = series.size
    if n < 8:
        raise TooFewDraws(f"ESS needs at least 8 draws, got {n}", module=MODULE)
    if np.ptp(series) == 0.0:
        return float(n)
    rho = _autocorrelation(series)
    n_pairs = n // 2
    pair_sums = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    negative = np.flatnonzero(pair_sums <= 0.0)
    stop = negative[0] if negative.size else n_pairs
    tau = -1.0 + 2.0 * pair_sums[:stop].sum()
    if tau <= 0.0:
        return float(n)
    return float(min(n / tau, n))


# --------------------------------------------------------------------------
# Between-chain mixing and clustering
# --------------------------------------------------------------------------

def summary_series(chain: ChainDraws, summary: str = DEFAULT_SUMMARY) -> np.ndarray:
    """
    The scalar series a chain is diagnosed on.

    Args:
        chain: the chain
        summary: "mean_loglik" or "param:<name>"
    """
    if summary == "mean_loglik":
        return chain.log_lik.mean(axis=1)
    if summary.startswith("param:"):
        return np.asarray(chain.param(summary.split(":", 1)[1]), dtype=np.float64)
    raise DimensionMismatch(f"unknown summary {summary!r}", module=MODULE, summary=summary)


def pairwise_mixing(ds: DrawSet, summary: str = DEFAULT_SUMMARY, threads: int = 1) -> np.ndarray:
    """
    Symmetric M x M matrix of two-chain split-R-hat values.

    Entry (j, k) pools the four halves of chains j and k; the diagonal is each
    chain's own split-R-hat.
    """
    series = [summary_series(chain, summary) for chain in ds.chains]
    for j, s in enumerate(series):
        if s.size < 4:
            raise TooFewDraws(f"chain {j} has {s.size} draws; split-R-hat needs 4", module=MODULE, chain_index=j)
    halves = [_halves(s) for s in series]
    m = len(series)

    def row(j):
        return [_grouped_rhat(halves[j] + halves[k]) if k != j else _grouped_rhat(halves[j])
                for k in range(j, m)]

    rows = parallel_map(row, range(m), threads)
    mix = np.zeros((m, m))
    for j, values in enumerate(rows):
        mix[j, j:] = values
        mix[j:, j] = values
    return mix


def cluster_chains(mix, threshold: float = DEFAULT_RHAT_THRESHOLD) -> ClusterAssignment:
    """
    Single-linkage clustering of chains on a pairwise mixing matrix.

    Chains j, k are linked when mix[j, k] <= threshold (so a threshold at or
    above every entry yields one cluster and one below every off-diagonal entry
    yields M). Labels are numbered in order of first appearance.
    """
    mix = np.asarray(mix, dtype=np.float64)
    if mix.ndim != 2 or mix.shape[0] != mix.shape[1]:
        raise DimensionMismatch(f"mixing matrix must be square, got {mix.shape}", module=MODULE)
    m = mix.shape[0]
    parent = list(range(m))

    def find(j):
        while parent[j] != j:
            parent[j] = parent[parent[j]]
            j = parent[j]
        return j

    for j in range(m):
        for k in range(j + 1, m):
            if mix[j, k] <= threshold:
                rj, rk = find(j), find(k)
                if rj != rk:
                    parent[max(rj, rk)] = min(rj, rk)

    labels, seen = [], {}
    for j in range(m):
        root = find(j)
        if root not in seen:
            seen[root] = len(seen)
        labels.append(seen[root])
    assignment = ClusterAssignment(np.array(labels))
    logger.info("Clustered %d chains into %d clusters (threshold %.4g)", m, assignment.n_clusters, threshold)
    return assignment


def merge_clusters(ds: DrawSet, ca: ClusterAssignment) -> DrawSet:
    """
    Row-concatenate the member chains of every cluster.

    Returns:
        DrawSet with one chain per cluster; total draw count preserved
    """
    if ca.labels.size != ds.n_chains:
        raise DimensionMismatch(
            f"{ca.labels.size} labels for {ds.n_chains} chains", module=MODULE,
        )
    chains, sources = [], []
    for k in range(ca.n_clusters):
        members = ca.members(k)
        member_chains = [ds.chains[j] for j in members]
        chain_id = member_chains[0].chain_id if len(members) == 1 else f"cluster_{k}"
        chains.append(concat_chains(member_chains, chain_id))
        sources.append(";".join(ds.sources[j] for j in members))
    return assemble(chains, sources=sources, provenance=ds.provenance)


def diagnose(ds: DrawSet, summary: str = DEFAULT_SUMMARY, threshold: float = DEFAULT_RHAT_THRESHOLD,
             cluster: bool = True, threads: int = 1) -> ChainDiagnostics:
    """
    Run every diagnostic of the clustering step on a draw set.

    Args:
        ds: the chains
        summary: scalar series to diagnose ("mean_loglik" or "param:<name>")
        threshold: single-linkage threshold on the pairwise split-R-hat
        cluster: when False every chain is its own cluster
        threads: worker threads for the pairwise matrix

    Returns:
        ChainDiagnostics
    """
    series = [summary_series(chain, summary) for chain in ds.chains]
    rhat = np.array(parallel_map(split_rhat, series, threads))
    ess = np.array(parallel_map(chain_ess, series, threads))
    pointwise = np.array([np.max(pointwise_rhat(chain)) for chain in ds.chains])
    mix = pairwise_mixing(ds, summary, threads)
    assignment = cluster_chains(mix, threshold) if cluster else ClusterAssignment(np.arange(ds.n_chains))
    poor = np.flatnonzero(rhat > threshold)
    if poor.size:
        logger.warning("%d chain(s) have split-R-hat above %.3g: %s",
                       poor.size, threshold, [ds.chains[j].chain_id for j in poor])
    return ChainDiagnostics(
        chain_ids=tuple(ds.chain_ids), split_rhat=rhat, ess=ess, max_pointwise_rhat=pointwise,
        pairwise=mix, clusters=assignment, summary=summary, threshold=threshold,
    )

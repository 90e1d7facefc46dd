"""
Turning cluster weights into estimates and into an unweighted draw set.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from utils.config import parallel_map
from utils.draws import ChainDraws, DrawSet, EstimandSeries, concat_chains
from utils.errors import BoundViolation, DimensionMismatch, DomainError
from utils.stacking import ChainWeights

logger = logging.getLogger(__name__)

MODULE = "combine"
SNAP = 1e-9


@dataclass(frozen=True)
class WeightedDrawSet:
    """Clustered draws with one simplex weight per cluster; draw s of cluster k weighs w_k / S_k."""

    ds: DrawSet
    w: ChainWeights

    def __post_init__(self):
        if self.w.n_clusters != self.ds.n_chains:
            raise DimensionMismatch(
                f"{self.w.n_clusters} weights for {self.ds.n_chains} clusters", module=MODULE,
            )

    @property
    def draw_weights(self) -> Tuple[np.ndarray, ...]:
        return tuple(
            np.full(chain.n_draws, w_k / chain.n_draws) for w_k, chain in zip(self.w.w, self.ds.chains)
        )


@dataclass(frozen=True)
class ResamplePlan:
    """
    Which rows of which cluster make up the thinned draw set.

    Attributes:
        counts: draws taken per cluster (sums to s_thin)
        indices: per-cluster selected row indices, distinct and ascending
        fixed: the deterministic floor(s_thin * w_k) part of counts
        seed: seed the plan was drawn with
    """

    counts: np.ndarray
    indices: Tuple[np.ndarray, ...]
    fixed: np.ndarray
    seed: int

    @property
    def s_thin(self) -> int:
        return int(np.sum(self.counts))

    def to_dict(self) -> Dict:
        return {
            "s_thin": self.s_thin,
            "seed": self.seed,
            "counts": self.counts.tolist(),
            "fixed": self.fixed.tolist(),
            "indices": [idx.tolist() for idx in self.indices],
        }


def weighted_expectation(wds: WeightedDrawSet, h: EstimandSeries) -> float:
    """sum_k sum_s (w_k / S_k) h(theta_ks)."""
    h.check_against(wds.ds)
    return float(sum(np.sum(weights * values) for weights, values in zip(wds.draw_weights, h.values)))


def _check_bound(wds: WeightedDrawSet, s_thin: int) -> None:
    counts = wds.ds.draw_counts
    for k, (w_k, size) in enumerate(zip(wds.w.w, counts)):
        # zero-weight clusters do not constrain s_thin
        if w_k > 0 and s_thin * w_k > size * (1.0 + 1e-12):
            bound = int(np.floor(min(c / w for c, w in zip(counts, wds.w.w) if w > 0) + SNAP))
            raise BoundViolation(
                f"s_thin = {s_thin} needs {s_thin * w_k:.6g} draws from cluster {k} "
                f"({wds.ds.chains[k].chain_id!r}), which has {size}; the largest admissible s_thin is {bound}",
                module=MODULE, cluster=k, chain_id=wds.ds.chains[k].chain_id, s_thin=s_thin, bound=bound,
            )


def allocate(w, s_thin: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split s_thin draws across clusters.

    Each cluster first gets floor(s_thin * w_k). The remaining draws go to
    clusters with probability proportional to the leftover fractions, using one
    systematic pass with a single uniform offset, so no cluster gains more than
    one extra draw.

    Returns:
        (counts, fixed)
    """
    target = s_thin * np.asarray(w, dtype=np.float64)
    nearest = np.rint(target)
    target = np.where(np.abs(target - nearest) < SNAP, nearest, target)
    fixed = np.floor(target).astype(np.int64)
    counts = fixed.copy()
    remaining = int(s_thin - fixed.sum())
    if remaining > 0:
        residual = target - fixed
        cumulative = np.cumsum(residual)
        cumulative *= remaining / cumulative[-1]
        cumulative[-1] = remaining
        positions = rng.random() + np.arange(remaining)
        chosen = np.searchsorted(cumulative, positions, side="right")
        np.add.at(counts, chosen, 1)
    return counts, fixed


def thin_resample(wds: WeightedDrawSet, s_thin: int, rng_seed: int = 0, threads: int = 1) -> ResamplePlan:
    """
    Draw a thinning plan of s_thin rows.

    The RNG is a Philox stream keyed by rng_seed: one child stream picks the
    residual offset and one per cluster selects rows without replacement, so
    the plan is reproducible and independent of the thread count.

    Raises:
        BoundViolation: s_thin * w_k exceeds S_k for some cluster with w_k > 0
    """
    if int(s_thin) != s_thin or s_thin < 1:
        raise DomainError(f"s_thin must be a positive integer, got {s_thin}", module=MODULE)
    s_thin = int(s_thin)
    _check_bound(wds, s_thin)

    streams = np.random.SeedSequence(int(rng_seed)).spawn(wds.ds.n_chains + 1)
    counts, fixed = allocate(wds.w.w, s_thin, np.random.Generator(np.random.Philox(streams[0])))

    def select(k):
        rng = np.random.Generator(np.random.Philox(streams[k + 1]))
        size = wds.ds.chains[k].n_draws
        return np.sort(rng.choice(size, size=int(counts[k]), replace=False))

    indices = tuple(parallel_map(select, range(wds.ds.n_chains), threads))
    logger.info("Thinning plan for %d draws: counts %s (fixed part %s)", s_thin, counts.tolist(), fixed.tolist())
    return ResamplePlan(counts=counts, indices=indices, fixed=fixed, seed=int(rng_seed))


def materialize(wds: WeightedDrawSet, plan: ResamplePlan, chain_id: str = "stacked") -> ChainDraws:
    """Concatenate the selected rows, cluster by cluster, into one unweighted chain."""
    if len(plan.indices) != wds.ds.n_chains:
        raise DimensionMismatch(
            f"plan covers {len(plan.indices)} clusters, draw set has {wds.ds.n_chains}", module=MODULE,
        )
    parts = []
    for chain, rows in zip(wds.ds.chains, plan.indices):
        if rows.size == 0:
            continue
        if np.unique(rows).size != rows.size or rows.max() >= chain.n_draws or rows.min() < 0:
            raise DimensionMismatch(f"plan rows for {chain.chain_id!r} are invalid", module=MODULE)
        parts.append(chain.take(rows))
    return concat_chains(parts, chain_id)

"""
End-to-end chain stacking workflow.

This module runs the whole analysis on one draw set:
- Diagnostics and clustering of the chains
- Leave-one-out predictive densities per cluster
- Cluster weights (stacking or a baseline)
- Convergence monitoring over the number of chains
- Weighted estimates and thinning into an unweighted draw set
"""

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence

import numpy as np

from utils.combine import ResamplePlan, WeightedDrawSet, materialize, thin_resample, weighted_expectation
from utils.config import DEFAULT_RHAT_THRESHOLD, DEFAULT_SUMMARY
from utils.diagnostics import ChainDiagnostics, diagnose, merge_clusters
from utils.draws import ChainDraws, DrawSet, estimand_from_params
from utils.errors import DimensionMismatch, DomainError
from utils.psis import LooMatrix, khat_summary, loo_matrix
from utils.stacking import (
    ChainWeights,
    MonitorCurve,
    StackingConfig,
    importance_weights,
    mode_height_weights,
    monitor_curve,
    objective,
    optimize_weights,
    pseudo_bma_weights,
    stacked_ess,
    uniform_weights,
)

logger = logging.getLogger(__name__)

MODULE = "cli"
METHODS = ("stacking", "pseudo-bma", "uniform", "mode-height", "importance")
DEFAULT_LOG_POST_COLUMN = "lp__"

_ESTIMAND = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(?:(>=|<=|>|<)\s*([-+0-9.eE]+))?\s*$")
_COMPARE = {
    ">": np.greater,
    ">=": np.greater_equal,
    "<": np.less,
    "<=": np.less_equal,
}


@dataclass(frozen=True)
class Estimand:
    """A parameter column, optionally turned into an indicator by a comparison (e.g. mu>0)."""

    column: str
    op: Optional[str] = None
    value: float = 0.0

    def __str__(self):
        return self.column if self.op is None else f"{self.column}{self.op}{self.value:g}"

    def transform(self, column):
        if self.op is None:
            return column
        return _COMPARE[self.op](column, self.value).astype(np.float64)


def parse_estimand(text: str) -> Estimand:
    """Parse "mu" or "mu>0" style estimands."""
    match = _ESTIMAND.match(text or "")
    if match is None:
        raise DomainError(f"cannot parse estimand {text!r}; use <column> or <column><op><number>", module=MODULE)
    column, op, value = match.groups()
    try:
        return Estimand(column, op, float(value) if value is not None else 0.0)
    except ValueError:
        raise DomainError(f"cannot parse threshold in estimand {text!r}", module=MODULE) from None


class ChainStackAnalyzer:
    """
    Runs the stacking workflow on one draw set, keeping every stage's result.
    """

    def __init__(self, draws: DrawSet, stacking: StackingConfig = StackingConfig(),
                 threshold: float = DEFAULT_RHAT_THRESHOLD, summary: str = DEFAULT_SUMMARY,
                 cluster: bool = True, threads: int = 1):
        """
        Args:
            draws: chains to combine
            stacking: optimizer settings; ESS is filled in from the diagnostics
            threshold: pairwise R-hat threshold for clustering
            summary: scalar series used by the diagnostics
            cluster: merge chains that mix with each other before stacking
            threads: worker threads
        """
        self.draws = draws
        self.stacking = stacking
        self.threshold = threshold
        self.summary = summary
        self.cluster = cluster
        self.threads = threads

        self.diagnostics: Optional[ChainDiagnostics] = None
        self.clustered: Optional[DrawSet] = None
        self.loo: Optional[LooMatrix] = None
        self.weights: Optional[ChainWeights] = None
        self.curve: Optional[MonitorCurve] = None

    def run_diagnostics(self) -> ChainDiagnostics:
        if self.diagnostics is None:
            self.diagnostics = diagnose(self.draws, self.summary, self.threshold, self.cluster, self.threads)
            self.clustered = merge_clusters(self.draws, self.diagnostics.clusters)
            logger.info("%d chains form %d cluster(s)", self.draws.n_chains, self.clustered.n_chains)
        return self.diagnostics

    def compute_loo(self) -> LooMatrix:
        if self.loo is None:
            self.run_diagnostics()
            self.loo = loo_matrix(self.clustered, self.threads)
        return self.loo

    def _stacking_config(self) -> StackingConfig:
        if self.stacking.ess is not None:
            return self.stacking
        return replace(self.stacking, ess=tuple(self.diagnostics.cluster_ess()))

    def compute_weights(self, method: str = "stacking", log_heights: Optional[Sequence[float]] = None,
                        log_post_column: str = DEFAULT_LOG_POST_COLUMN) -> ChainWeights:
        """
        Weight the clusters.

        Args:
            method: one of METHODS
            log_heights: log posterior density at each cluster's mode (mode-height)
            log_post_column: parameter column with log p(theta | y) (importance)
        """
        if method not in METHODS:
            raise DomainError(f"unknown method {method!r}; choose from {METHODS}", module=MODULE)
        self.run_diagnostics()
        n_clusters = self.clustered.n_chains
        if method == "uniform":
            weights = uniform_weights(n_clusters)
        elif method == "mode-height":
            if log_heights is None or len(log_heights) != n_clusters:
                raise DimensionMismatch(
                    f"mode-height needs one log height per cluster ({n_clusters})", module=MODULE,
                )
            weights = mode_height_weights(log_heights)
        elif method == "importance":
            weights = importance_weights([chain.param(log_post_column) for chain in self.clustered.chains])
        elif method == "pseudo-bma":
            weights = pseudo_bma_weights(self.compute_loo())
        else:
            weights = optimize_weights(self.compute_loo(), self._stacking_config(), self.clustered.draw_counts)
        self.weights = weights
        logger.info("%s weights: %s", method, np.round(weights.w, 6).tolist())
        return weights

    def monitor(self, order: Optional[Sequence[int]] = None) -> MonitorCurve:
        """Stacked LOO lpd as clusters are added one at a time."""
        loo = self.compute_loo()
        self.curve = monitor_curve(loo, self._stacking_config(), order, self.clustered.draw_counts, self.threads)
        return self.curve

    def weights_summary(self, curve: Optional[MonitorCurve] = None) -> Dict:
        """
        The weights record; every method fills the same keys.

        The objective is evaluated at the returned weights whatever produced
        them, so baselines can be compared with stacking on one scale.
        """
        if self.weights is None:
            self.compute_weights()
        loo = self.compute_loo()
        weights = self.weights
        value = weights.objective
        if value is None:
            value = objective(weights, loo, self._stacking_config(), self.clustered.draw_counts)
        return {
            "method": weights.method,
            "weights": weights.w,
            "objective": value,
            "iterations": weights.iterations,
            "gap": weights.gap,
            "stacked_ess": stacked_ess(weights, self.diagnostics.cluster_ess()),
            "monitor_curve": curve,
            "khat_summary": khat_summary(loo.khat),
        }

    def weighted(self) -> WeightedDrawSet:
        if self.weights is None:
            self.compute_weights()
        return WeightedDrawSet(self.clustered, self.weights)

    def estimate(self, estimand: Estimand) -> float:
        h = estimand_from_params(self.clustered, estimand.column, estimand.transform)
        return weighted_expectation(self.weighted(), h)

    def resample(self, s_thin: int, seed: int = 0):
        """Return the thinning plan and the materialized draws."""
        wds = self.weighted()
        plan = thin_resample(wds, s_thin, seed, self.threads)
        return plan, materialize(wds, plan)

    def generate_report(self, method: str = "stacking", monitor: bool = True,
                        estimand: Optional[Estimand] = None, s_thin: Optional[int] = None, seed: int = 0,
                        log_heights: Optional[Sequence[float]] = None,
                        log_post_column: str = DEFAULT_LOG_POST_COLUMN) -> Dict:
        """
        Run every stage and collect the results.

        Returns:
            Dictionary with draws, diagnostics, clusters, loo, weights, monitor,
            estimate and resample sections (absent stages are None)
        """
        # Step 1: diagnose and cluster
        diagnostics = self.run_diagnostics()

        # Step 2: weights
        weights = self.compute_weights(method, log_heights, log_post_column)
        loo = self.loo if method in ("stacking", "pseudo-bma") else self.compute_loo()

        # Step 3: monitoring
        curve = self.monitor() if monitor and method == "stacking" else None

        # Step 4: estimates and thinning
        estimate = None
        if estimand is not None:
            estimate = {"estimand": str(estimand), "value": self.estimate(estimand)}
        plan: Optional[ResamplePlan] = None
        thinned: Optional[ChainDraws] = None
        if s_thin is not None:
            plan, thinned = self.resample(s_thin, seed)

        cluster_ess = diagnostics.cluster_ess()
        clusters = [
            {
                "cluster": k,
                "chain_id": chain.chain_id,
                "members": [diagnostics.chain_ids[j] for j in diagnostics.clusters.members(k)],
                "n_draws": chain.n_draws,
                "ess": float(cluster_ess[k]),
                "elpd_loo": float(loo.log_loo[:, k].sum()),
                "weight": float(weights.w[k]),
            }
            for k, chain in enumerate(self.clustered.chains)
        ]
        return {
            "draws": self.draws.manifest(),
            "diagnostics": diagnostics,
            "clusters": clusters,
            "khat_summary": khat_summary(loo.khat),
            "loo": loo,
            "weights": weights,
            "stacked_ess": stacked_ess(weights, cluster_ess),
            "monitor": curve,
            "estimate": estimate,
            "resample": plan,
            "thinned": thinned,
        }


def format_report_for_display(report: Dict) -> str:
    """
    Format the analysis report as markdown.

    Args:
        report: The dictionary returned by ChainStackAnalyzer.generate_report

    Returns:
        Formatted markdown string
    """
    markdown = []

    # Header section
    markdown.append("# Chain Stacking Report")
    draws = report["draws"]
    markdown.append("## Input")
    markdown.append(f"**Chains:** {len(draws['chains'])}")
    markdown.append(f"**Observations:** {draws['n_obs']}")

    # Diagnostics
    diagnostics = report["diagnostics"]
    markdown.append("\n## Chain Diagnostics")
    markdown.append(f"Summary statistic: `{diagnostics.summary}`, clustering threshold {diagnostics.threshold:g}")
    markdown.append("")
    markdown.append("| Chain | Split R-hat | ESS | Max pointwise R-hat | Cluster |")
    markdown.append("|---|---|---|---|---|")
    for j, chain_id in enumerate(diagnostics.chain_ids):
        markdown.append(
            f"| {chain_id} | {diagnostics.split_rhat[j]:.3f} | {diagnostics.ess[j]:.0f} "
            f"| {diagnostics.max_pointwise_rhat[j]:.3f} | {diagnostics.clusters.labels[j]} |"
        )

    # Clusters and weights
    weights = report["weights"]
    markdown.append(f"\n## Weights ({weights.method})")
    markdown.append("| Cluster | Members | Draws | ESS | elpd_loo | Weight |")
    markdown.append("|---|---|---|---|---|---|")
    for c in report["clusters"]:
        markdown.append(
            f"| {c['chain_id']} | {', '.join(c['members'])} | {c['n_draws']} | {c['ess']:.0f} "
            f"| {c['elpd_loo']:.2f} | {c['weight']:.4f} |"
        )
    markdown.append(f"\n**Effective sample size of the combined draws:** {report['stacked_ess']:.0f}")
    if weights.objective is not None:
        markdown.append(f"**Stacking objective:** {weights.objective:.6f} after {weights.iterations} iterations")

    # PSIS reliability
    markdown.append("\n## Pareto k-hat")
    khat = report["khat_summary"]
    for label, info in khat["bins"].items():
        markdown.append(f"- **{label}** ({info['range']}): {info['count']} ({100 * info['proportion']:.1f}%)")

    # Monitoring
    curve = report.get("monitor")
    if curve is not None:
        markdown.append("\n## Monitoring")
        for size, value in enumerate(curve.lpd_loo, start=1):
            markdown.append(f"- {size} cluster(s): stacked LOO lpd {value:.3f}")

    estimate = report.get("estimate")
    if estimate is not None:
        markdown.append("\n## Estimate")
        markdown.append(f"**E[{estimate['estimand']}]:** {estimate['value']:.6f}")

    plan = report.get("resample")
    if plan is not None:
        markdown.append("\n## Thinning")
        markdown.append(f"**Draws:** {plan.s_thin} (seed {plan.seed})")
        markdown.append(f"**Per cluster:** {', '.join(str(c) for c in plan.counts.tolist())}")

    return "\n".join(markdown) + "\n"

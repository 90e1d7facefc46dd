import numpy as np
import pytest

from utils.errors import DimensionMismatch, DomainError
from utils.pipeline import ChainStackAnalyzer, Estimand, format_report_for_display, parse_estimand


class TestEstimand:
    def test_plain_column(self):
        estimand = parse_estimand("mu")
        assert estimand == Estimand("mu")
        np.testing.assert_array_equal(estimand.transform(np.array([1.0, -2.0])), [1.0, -2.0])

    def test_indicator(self):
        estimand = parse_estimand("mu > 0")
        assert str(estimand) == "mu>0"
        np.testing.assert_array_equal(estimand.transform(np.array([1.0, -2.0, 0.0])), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("text", ["", "mu >", "1mu", "mu == 0"])
    def test_rejected(self, text):
        with pytest.raises(DomainError):
            parse_estimand(text)


class TestAnalyzer:
    def test_clusters_and_weights(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1)
        weights = analyzer.compute_weights()
        assert analyzer.clustered.n_chains == 2
        assert weights.n_clusters == 2
        assert 0.2 < weights.w[0] < 0.8

    def test_unknown_method(self, cauchy_sim):
        with pytest.raises(DomainError):
            ChainStackAnalyzer(cauchy_sim.draws).compute_weights("median")

    def test_mode_height_needs_one_height_per_cluster(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1)
        with pytest.raises(DimensionMismatch):
            analyzer.compute_weights("mode-height", log_heights=[0.0])
        np.testing.assert_allclose(analyzer.compute_weights("mode-height", log_heights=[0.0, 0.0]).w, [0.5, 0.5])

    def test_importance_weights_use_the_log_posterior(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1)
        weights = analyzer.compute_weights("importance")
        assert weights.method == "importance"
        assert weights.w.sum() == pytest.approx(1.0)

    def test_estimate_of_an_indicator(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1)
        weights = analyzer.compute_weights()
        right = [k for k, chain in enumerate(analyzer.clustered.chains) if chain.param("mu").mean() > 0]
        assert analyzer.estimate(parse_estimand("mu>0")) == pytest.approx(weights.w[right].sum())

    def test_full_report(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1, threads=2)
        report = analyzer.generate_report(estimand=parse_estimand("mu"), s_thin=200, seed=3)
        assert set(report) == {"draws", "diagnostics", "clusters", "khat_summary", "loo", "weights",
                               "stacked_ess", "monitor", "estimate", "resample", "thinned"}
        assert report["thinned"].n_draws == 200
        assert len(report["monitor"].lpd_loo) == 2
        assert sum(c["weight"] for c in report["clusters"]) == pytest.approx(1.0)
        markdown = format_report_for_display(report)
        assert markdown.startswith("# Chain Stacking Report")
        assert "## Monitoring" in markdown
        assert "## Thinning" in markdown

    def test_baseline_report_has_no_monitor(self, cauchy_sim):
        analyzer = ChainStackAnalyzer(cauchy_sim.draws, summary="param:mu", threshold=1.1)
        report = analyzer.generate_report(method="uniform")
        assert report["monitor"] is None
        assert report["resample"] is None
        np.testing.assert_allclose(report["weights"].w, [0.5, 0.5])

import json

import numpy as np

from utils.diagnostics import diagnose
from utils.psis import khat_summary
from utils.stacking import ChainWeights, MonitorCurve
from utils.visualization import (
    create_khat_chart,
    create_monitor_curve_chart,
    create_pairwise_rhat_heatmap,
    create_weights_chart,
    create_xi_chart,
    write_figures,
)


def test_missing_curve_gives_a_placeholder():
    fig = create_monitor_curve_chart(None)
    assert fig.layout.annotations[0].text == "Monitoring curve not available"


def test_monitor_curve_points():
    fig = create_monitor_curve_chart(MonitorCurve(np.array([-30.0, -25.0, -24.9]), [0, 1, 2]))
    np.testing.assert_array_equal(fig.data[0].y, [-30.0, -25.0, -24.9])


def test_weights_and_khat_charts(two_mode_draws, tmp_path):
    figures = {
        "weights": create_weights_chart(ChainWeights([0.25, 0.75]), ["a", "b"]),
        "khat": create_khat_chart(khat_summary([0.1, 0.6, 0.9])),
        "pairwise_rhat": create_pairwise_rhat_heatmap(diagnose(two_mode_draws, summary="param:mu")),
        "xi": create_xi_chart([2.5, 5.0, 10.0], [0.6, 0.7, 0.8], p0=0.5, a=10.0),
    }
    paths = write_figures(figures, tmp_path)
    assert sorted(p.name for p in paths) == ["khat.json", "pairwise_rhat.json", "weights.json", "xi.json"]
    for path in paths:
        assert "data" in json.loads(path.read_text())

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

KHAT_COLORS = {
    'good': '#4CAF50',       # Green
    'ok': '#2196F3',         # Blue
    'bad': '#FF9800',        # Orange
    'very bad': '#F44336',   # Red
}


def _placeholder(text):
    fig = go.Figure()
    fig.add_annotation(
        text=text,
        xref="paper", yref="paper",
        x=0.5, y=0.5, showarrow=False
    )
    return fig


def create_monitor_curve_chart(curve):
    """
    Create a line chart of the stacked leave-one-out lpd against the number of chains

    Args:
        curve: MonitorCurve

    Returns:
        Plotly figure object
    """
    if curve is None or len(curve.lpd_loo) == 0:
        return _placeholder("Monitoring curve not available")

    frame = pd.DataFrame({
        'Chains': np.arange(1, len(curve.lpd_loo) + 1),
        'Stacked LOO lpd': curve.lpd_loo,
    })
    fig = px.line(
        frame,
        x='Chains',
        y='Stacked LOO lpd',
        title='Stacked LOO lpd by Number of Chains',
        markers=True,
    )
    fig.update_layout(
        xaxis=dict(showgrid=True, dtick=1),
        yaxis=dict(showgrid=True),
        margin=dict(t=50, b=50, l=10, r=10)
    )
    return fig


def create_khat_chart(summary):
    """
    Create a bar chart of Pareto k-hat counts per reliability bin

    Args:
        summary: output of psis.khat_summary
    """
    if not summary or summary.get('total', 0) == 0:
        return _placeholder("k-hat values not available")

    rows = [
        {'Bin': label, 'Range': info['range'], 'Count': info['count'], 'Proportion': info['proportion']}
        for label, info in summary['bins'].items()
    ]
    fig = px.bar(
        pd.DataFrame(rows),
        x='Bin',
        y='Count',
        title='Pareto k-hat Diagnostic',
        color='Bin',
        color_discrete_map=KHAT_COLORS,
        hover_data=['Range', 'Proportion'],
    )
    fig.update_layout(showlegend=False, margin=dict(t=50, b=50, l=10, r=10))
    return fig


def create_weights_chart(weights, labels: Optional[Sequence[str]] = None):
    """
    Create a bar chart of cluster weights

    Args:
        weights: ChainWeights
        labels: one name per cluster
    """
    w = np.asarray(weights.w)
    labels = list(labels) if labels is not None else [f"cluster {k}" for k in range(w.size)]
    fig = px.bar(
        pd.DataFrame({'Cluster': labels, 'Weight': w}),
        x='Cluster',
        y='Weight',
        title=f'Chain Weights ({weights.method})',
    )
    fig.update_layout(yaxis=dict(range=[0, 1], showgrid=True), margin=dict(t=50, b=50, l=10, r=10))
    return fig


def create_pairwise_rhat_heatmap(diagnostics):
    """
    Create a heatmap of between-chain R-hat

    Args:
        diagnostics: ChainDiagnostics
    """
    if diagnostics is None or diagnostics.pairwise is None:
        return _placeholder("Pairwise R-hat not available")

    values = np.where(np.isfinite(diagnostics.pairwise), diagnostics.pairwise, np.nan)
    fig = px.imshow(
        values,
        x=list(diagnostics.chain_ids),
        y=list(diagnostics.chain_ids),
        color_continuous_scale='Viridis',
        title='Pairwise R-hat',
        labels=dict(color='R-hat'),
    )
    fig.update_layout(margin=dict(t=50, b=50, l=10, r=10))
    return fig


def create_xi_chart(a_values, xi_values, p0: Optional[float] = None, a: Optional[float] = None):
    """
    Create the bimodality boundary curve xi(a), optionally marking one scenario

    Args:
        a_values: grid of separations (> 2)
        xi_values: xi at each grid point
        p0, a: scenario to mark
    """
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=list(a_values), y=list(xi_values), mode='lines', name='xi(a)'))
    if p0 is not None and a is not None:
        fig.add_trace(go.Scatter(x=[a], y=[p0], mode='markers', name='scenario', marker=dict(size=10)))
    fig.update_layout(
        title='Bimodal Below the Curve',
        xaxis=dict(title='a', type='log', showgrid=True),
        yaxis=dict(title='p0', range=[0.5, 1.0], showgrid=True),
        margin=dict(t=50, b=50, l=10, r=10)
    )
    return fig


def write_figures(figures: Dict[str, go.Figure], out_dir) -> List[Path]:
    """Write each figure's plotly JSON spec as <name>.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, fig in figures.items():
        path = out_dir / f"{name}.json"
        path.write_text(fig.to_json() + "\n", encoding="utf-8")
        written.append(path)
    logger.info("Wrote %d figure specs to %s", len(written), out_dir)
    return written

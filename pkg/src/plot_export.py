#!/usr/bin/env python3
"""
Plot Data Export
Writes CSV series for external plotting (trajectory overlays, loss and
omega curves, density slices, damage tables) and optional plotly figures
"""

import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from .pdem import PDFGrid

logger = logging.getLogger(__name__)

KINDS = ('trajectory', 'losses', 'omega', 'pdf', 'damage')


def _write_html(fig: go.Figure, csv_path: str):
    html_path = os.path.splitext(csv_path)[0] + '.html'
    fig.write_html(html_path, include_plotlyjs='cdn')
    logger.info(f"Wrote figure {html_path}")


def export_trajectory_overlay(t: np.ndarray, truth: np.ndarray, pred: np.ndarray, dofs: Sequence[int],
                              path: str, html: bool = False) -> str:
    """
    Truth vs prediction per requested DOF

    Args:
        t: Time grid (n_t)
        truth: (n_t, n_dof) ground truth
        pred: (n_t, n_dof) prediction
        dofs: DOF indices to export
        path: Output CSV
        html: Also write a plotly figure

    Returns:
        Path of the CSV with columns t, truth_dof_j, pred_dof_j
    """
    if truth.shape != pred.shape:
        raise ValueError(f"Truth {truth.shape} and prediction {pred.shape} differ")
    df = pd.DataFrame({'t': t})
    for j in dofs:
        df[f"truth_dof_{j}"] = truth[:, j]
        df[f"pred_dof_{j}"] = pred[:, j]
    df.to_csv(path, index=False, float_format='%.10g')

    if html:
        fig = go.Figure()
        for j in dofs:
            fig.add_trace(go.Scatter(x=t, y=truth[:, j], mode='lines', name=f"truth dof {j}"))
            fig.add_trace(go.Scatter(x=t, y=pred[:, j], mode='lines', name=f"pred dof {j}",
                                     line=dict(dash='dash')))
        fig.update_layout(xaxis_title='t (s)', yaxis_title='response')
        _write_html(fig, path)
    return path


def export_report_columns(report: pd.DataFrame, prefix: str, path: str, html: bool = False) -> str:
    """Epoch plus every report column starting with prefix (loss_ or omega_)"""
    columns = ['epoch'] + [c for c in report.columns if c.startswith(prefix)]
    if len(columns) == 1:
        raise ValueError(f"Training report has no '{prefix}' columns")
    report[columns].to_csv(path, index=False, float_format='%.10g')

    if html:
        fig = go.Figure()
        for c in columns[1:]:
            fig.add_trace(go.Scatter(x=report['epoch'], y=report[c], mode='lines', name=c))
        if prefix == 'loss_':
            fig.update_yaxes(type='log')
        fig.update_layout(xaxis_title='epoch')
        _write_html(fig, path)
    return path


def export_pdf_slices(grids: Dict[str, PDFGrid], times: Sequence[float], directory: str,
                      html: bool = False) -> List[str]:
    """
    One CSV per requested time with columns x and p_<name> per density

    Args:
        grids: Named densities on a common grid
        times: Slice times (nearest grid time is used)
        directory: Output directory
        html: Also write plotly figures

    Returns:
        Paths of the written files
    """
    if not grids:
        raise ValueError("No densities to export")
    os.makedirs(directory, exist_ok=True)
    first = next(iter(grids.values()))
    paths = []
    for t in times:
        k = first.time_index(t)
        df = pd.DataFrame({'x': first.x_grid})
        for name, grid in grids.items():
            if not first.same_grid(grid):
                raise ValueError(f"Density '{name}' lives on a different grid")
            df[f"p_{name}"] = grid.p[k]
        path = os.path.join(directory, f"pdf_t{first.t_grid[k]:.3f}.csv")
        df.to_csv(path, index=False, float_format='%.10g')
        paths.append(path)
        if html:
            fig = go.Figure()
            for name in grids:
                fig.add_trace(go.Scatter(x=df['x'], y=df[f"p_{name}"], mode='lines', name=name))
            fig.update_layout(title=f"t = {first.t_grid[k]:.3f} s", xaxis_title='x', yaxis_title='p(x)')
            _write_html(fig, path)
    logger.info(f"Exported {len(paths)} density slices to {directory}")
    return paths


def export_damage(table: pd.DataFrame, path: str, html: bool = False) -> str:
    """Damage probability bar table (channel or time rows)"""
    table.to_csv(path, index=False, float_format='%.10g')
    if html:
        key = 'channel' if 'channel' in table.columns else table.columns[0]
        fig = go.Figure()
        for c in [c for c in table.columns if c.startswith('dp')]:
            fig.add_trace(go.Bar(x=table[key].astype(str), y=table[c], name=c))
        fig.update_layout(barmode='group', yaxis_title='probability')
        _write_html(fig, path)
    return path


def export_plotdata(run_dir: str, kind: str, out_dir: Optional[str] = None, options: Optional[Dict] = None,
                    predictions: Optional[Dict] = None) -> List[str]:
    """
    Export plot series from the artifacts of a run directory

    Args:
        run_dir: Run directory
        kind: One of trajectory, losses, omega, pdf, damage
        out_dir: Output directory (run_dir/plots when omitted)
        options: 'pair', 'dofs', 'times', 'html' entries of the export section
        predictions: For 'trajectory': dict with t, truth and pred arrays of one pair

    Returns:
        Paths of the written files
    """
    if kind not in KINDS:
        raise ValueError(f"Unknown export kind '{kind}' (choose from {KINDS})")
    options = options or {}
    out_dir = out_dir or os.path.join(run_dir, 'plots')
    html = bool(options.get('html', False))
    reports = os.path.join(run_dir, 'reports')
    os.makedirs(out_dir, exist_ok=True)

    if kind == 'trajectory':
        if predictions is None:
            raise FileNotFoundError("Trajectory export needs a trained model and dataset")
        dofs = options.get('dofs') or list(range(predictions['truth'].shape[1]))
        path = os.path.join(out_dir, f"trajectory_pair{options.get('pair', 0)}.csv")
        return [export_trajectory_overlay(predictions['t'], predictions['truth'], predictions['pred'],
                                          dofs, path, html)]

    if kind in ('losses', 'omega'):
        source = os.path.join(reports, 'train_report.csv')
        if not os.path.exists(source):
            raise FileNotFoundError(f"Missing training report {source}")
        report = pd.read_csv(source)
        prefix = 'loss_' if kind == 'losses' else 'omega_'
        return [export_report_columns(report, prefix, os.path.join(out_dir, f"{kind}.csv"), html)]

    if kind == 'pdf':
        grids = {}
        for name in ('pdem', 'mc'):
            if os.path.exists(os.path.join(reports, f"{name}.json")):
                grids[name] = PDFGrid.load(reports, name)
        if not grids:
            raise FileNotFoundError(f"No density artifacts under {reports}")
        return export_pdf_slices(grids, options.get('times', []), out_dir, html)

    source = os.path.join(reports, 'damage.csv')
    if not os.path.exists(source):
        raise FileNotFoundError(f"Missing damage table {source}")
    return [export_damage(pd.read_csv(source), os.path.join(out_dir, 'damage.csv'), html)]

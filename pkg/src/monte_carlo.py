#!/usr/bin/env python3
"""
Monte Carlo Propagation
Response providers (integrator or trained surrogate), monitored-quantity
selection, ensemble densities and damage probabilities
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats as sps

from .modal import ModeShapeTable, euler_beam_modes, lumped_chain_matrices, recover_field, solve_eigen
from .oracle import NormStats, integrate_newmark_batch
from .pdem import PDFGrid
from .system_core import ParameterSpace, SystemConfigError, SystemTemplate, sample_parameters
from .trainer import predict

logger = logging.getLogger(__name__)

ORACLE_CHUNK = 256


@dataclass
class ResponseEnsemble:
    """Monitored quantities of N samples: values (N, n_t, n_q)"""
    t_grid: np.ndarray
    values: np.ndarray
    names: List[str]
    seeds: List[int]
    velocity: Optional[np.ndarray] = None
    acceleration: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class DamageField:
    """Exceedance probability per monitored channel"""
    names: List[str]
    threshold: np.ndarray
    dp: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'channel': self.names, 'threshold': self.threshold, 'dp': self.dp})


class OracleProvider:
    """Responses from the Newmark integrator"""

    def __init__(self, template: SystemTemplate, space: ParameterSpace, jobs: int = 1):
        template.check_space(space)
        self.template = template
        self.space = space
        self.jobs = max(1, int(jobs))

    def _chunk(self, args):
        p_rows, f_rows = args
        systems = [self.template.instantiate(self.space.names, p) for p in p_rows]
        return integrate_newmark_batch(systems, f_rows, self.space.dt, self.space.T)

    def responses(self, p_rows: np.ndarray, f_rows: np.ndarray) -> Dict[str, np.ndarray]:
        """Integrate every (p, f) pair; returns u, du, ddu of shape (N, n_t, n_dof)"""
        p_rows, f_rows = np.asarray(p_rows), np.asarray(f_rows)
        chunks = [(p_rows[i:i + ORACLE_CHUNK], f_rows[i:i + ORACLE_CHUNK])
                  for i in range(0, p_rows.shape[0], ORACLE_CHUNK)]
        if self.jobs > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(self._chunk, chunks))
        else:
            results = [self._chunk(chunk) for chunk in chunks]
        return {key: np.concatenate([r[k] for r in results]) for k, key in enumerate(('u', 'du', 'ddu'))}


class SurrogateProvider:
    """Responses from a trained operator model"""

    def __init__(self, model, stats: NormStats, dt: float, batch_size: int = 500):
        self.model = model
        self.stats = stats
        self.dt = dt
        self.batch_size = batch_size

    def responses(self, p_rows: np.ndarray, f_rows: np.ndarray) -> Dict[str, np.ndarray]:
        return predict(self.model, p_rows, f_rows, self.stats, self.dt, self.batch_size)


class QuantitySelector:
    """Linear map from DOF responses to monitored quantities"""

    def __init__(self, template: SystemTemplate, quantities: List[Dict]):
        """
        Initialize selector

        Args:
            template: System template (DOF layout and body geometry)
            quantities: Entries {'dof': label} or {'body': name, 'x': coordinate}
        """
        if not quantities:
            raise ValueError("At least one monitored quantity is required")
        self.template = template
        self.names: List[str] = []
        self._parts = []
        for q in quantities:
            if q.get('dof') is not None:
                self._parts.append(('dof', template.dof_index(q['dof']), None))
                self.names.append(q['dof'])
            elif q.get('body') is not None and q.get('x') is not None:
                body = template.body_config(q['body'])
                table = self._shape_table(body, float(q['x']))
                self._parts.append(('field', template.body_slices[q['body']], table))
                self.names.append(f"{q['body']}@{q['x']}")
            else:
                raise SystemConfigError(f"Quantity {q} needs a 'dof' or a 'body' with 'x'")

    @classmethod
    def from_config(cls, template: SystemTemplate, cfg: Dict) -> "QuantitySelector":
        return cls(template, [cfg])

    @staticmethod
    def _shape_table(body: Dict, x: float) -> ModeShapeTable:
        n_modes = int(body['n_modes'])
        if body.get('kind', 'euler_beam') == 'euler_beam':
            return euler_beam_modes(float(body['m_r']), float(body['length']), n_modes, [x])
        M, K = lumped_chain_matrices(int(body['n_nodes']), float(body['total_mass']),
                                     float(body['stiffness']), body.get('ends', 'fixed'))
        node = int(x)
        basis = solve_eigen(M, K, n_modes)
        return ModeShapeTable(points=np.array([[float(node)]]), values=basis.U[node:node + 1],
                              provenance="discrete")

    def apply(self, u: np.ndarray) -> np.ndarray:
        """(..., n_t, n_dof) responses -> (..., n_t, n_q) quantities"""
        u = np.asarray(u, dtype=float)
        lead = u.shape[:-1]
        out = []
        for kind, where, table in self._parts:
            if kind == 'dof':
                out.append(u[..., where])
            else:
                q = u[..., where].reshape(-1, table.n_modes)
                out.append(recover_field(table, q)[:, 0].reshape(lead))
        return np.stack(out, axis=-1)


def mc_propagate(provider, space: ParameterSpace, n: int, seed: int, selector: QuantitySelector,
                 batch_size: int = 500, derivatives: bool = False) -> ResponseEnsemble:
    """
    Monte Carlo propagation through a response provider

    Args:
        provider: OracleProvider or SurrogateProvider
        space: Parameter space
        n: Number of samples
        seed: Master seed
        selector: Monitored quantities
        batch_size: Samples per provider call
        derivatives: Also keep velocity and acceleration of the quantities

    Returns:
        ResponseEnsemble (deterministic under seed)
    """
    if n < 1:
        raise ValueError("Monte Carlo needs at least one sample")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
    values, vel, acc = [], [], []
    for start in range(0, n, batch_size):
        batch = [sample_parameters(space, s) for s in seeds[start:start + batch_size]]
        out = provider.responses(np.stack([b.p for b in batch]), np.stack([b.f for b in batch]))
        values.append(selector.apply(out['u']))
        if derivatives:
            vel.append(selector.apply(out['du']))
            acc.append(selector.apply(out['ddu']))
        logger.info(f"Monte Carlo: {min(start + batch_size, n)}/{n} samples")
    return ResponseEnsemble(
        t_grid=space.time_grid(),
        values=np.concatenate(values),
        names=list(selector.names),
        seeds=seeds,
        velocity=np.concatenate(vel) if derivatives else None,
        acceleration=np.concatenate(acc) if derivatives else None,
    )


def _bin_edges(x_grid: np.ndarray) -> np.ndarray:
    dx = x_grid[1] - x_grid[0]
    return np.concatenate([x_grid - 0.5 * dx, [x_grid[-1] + 0.5 * dx]])


def pdf_estimate(ensemble: ResponseEnsemble, x_grid: np.ndarray, channel: int = 0,
                 kde: bool = False) -> PDFGrid:
    """
    Per-slice density of one monitored quantity

    Args:
        ensemble: Response ensemble
        x_grid: Uniform grid (cell centers)
        channel: Quantity index
        kde: Gaussian kernel smoothing with Silverman bandwidth instead of a histogram

    Returns:
        PDFGrid with unit mass per slice
    """
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.size < 2 or not np.allclose(np.diff(x_grid), x_grid[1] - x_grid[0]) or x_grid[1] <= x_grid[0]:
        raise ValueError("Density grid must be uniform and increasing with at least two points")
    if ensemble.n == 0:
        raise ValueError("Ensemble is empty")
    dx = x_grid[1] - x_grid[0]
    edges = _bin_edges(x_grid)
    data = ensemble.values[:, :, channel]
    p = np.zeros((data.shape[1], x_grid.size))
    outside = 0
    for k in range(data.shape[1]):
        samples = data[:, k]
        if kde and samples.std() > 0:
            dens = sps.gaussian_kde(samples, bw_method='silverman')(x_grid)
        else:
            dens, _ = np.histogram(samples, bins=edges)
            dens = dens.astype(float)
            outside += samples.size - int(dens.sum())
        mass = dens.sum() * dx
        if mass > 0:
            p[k] = dens / mass
    if outside:
        logger.warning(f"{outside} ensemble values fell outside the density grid")
    return PDFGrid(x_grid=x_grid, t_grid=ensemble.t_grid, p=p)


def damage_probability(ensemble: ResponseEnsemble, threshold) -> DamageField:
    """
    Fraction of samples whose maximum over time exceeds the threshold

    Args:
        ensemble: Response ensemble
        threshold: Scalar or one value per monitored quantity

    Returns:
        DamageField with dp per quantity
    """
    if ensemble.n == 0:
        raise ValueError("Ensemble is empty")
    thr = np.broadcast_to(np.asarray(threshold, dtype=float), (ensemble.values.shape[2],)).copy()
    if not np.isfinite(thr).all():
        raise ValueError("Threshold must be finite")
    peaks = ensemble.values.max(axis=1)
    dp = (peaks > thr).mean(axis=0)
    return DamageField(names=list(ensemble.names), threshold=thr, dp=dp)


def damage_probability_at(ensemble: ResponseEnsemble, threshold: float, channel: int = 0) -> np.ndarray:
    """Time-sliced exceedance probability dp*(t) of one quantity"""
    if ensemble.n == 0:
        raise ValueError("Ensemble is empty")
    return (ensemble.values[:, :, channel] > threshold).mean(axis=0)

#!/usr/bin/env python3
"""
Probability Density Evolution
Representative points from a rank-1 lattice, per-case flux-limited
convection of the response density and superposition over cases
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import qmc

from .oracle import read_blob, write_blob
from .system_core import ParameterSpace, excitation_from_unit, generate_excitation

logger = logging.getLogger(__name__)

MAX_CFL = 0.9
MASS_TOL = 1e-3
LIMITERS = ('minmod', 'van_leer', 'superbee')


class CFLViolationError(ValueError):
    """Raised when the convection step violates the CFL bound"""


class GridRangeError(ValueError):
    """Raised when the response leaves the density grid"""


@dataclass
class RepresentativePointSet:
    """Full parameter vectors of the representative cases with equal weights

    unit holds every lattice coordinate; its trailing columns (also kept in
    excitation_unit) drive a random-function excitation.
    """
    points: np.ndarray
    unit: np.ndarray
    weights: np.ndarray
    generator: np.ndarray
    names: List[str]
    excitation_unit: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_sel(self) -> int:
        return self.points.shape[0]


@dataclass
class PDFGrid:
    """Density p[t, x] on a uniform x grid"""
    x_grid: np.ndarray
    t_grid: np.ndarray
    p: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    def mass(self) -> np.ndarray:
        return self.p.sum(axis=1) * self.dx

    def time_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.t_grid - t)))

    def exceedance(self, threshold: float) -> np.ndarray:
        """P(X(t) > threshold) for every time slice"""
        return self.p[:, self.x_grid > threshold].sum(axis=1) * self.dx

    def same_grid(self, other: "PDFGrid") -> bool:
        return (self.p.shape == other.p.shape
                and np.allclose(self.x_grid, other.x_grid)
                and np.allclose(self.t_grid, other.t_grid))

    def to_frame(self) -> pd.DataFrame:
        """Long format (t, x, p)"""
        tt, xx = np.meshgrid(self.t_grid, self.x_grid, indexing='ij')
        return pd.DataFrame({'t': tt.ravel(), 'x': xx.ravel(), 'p': self.p.ravel()})

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.12g')

    def save(self, directory: str, name: str = 'pdf') -> str:
        """Write <name>.bin (row-major [t][x]) and <name>.json"""
        os.makedirs(directory, exist_ok=True)
        manifest = {
            'x_grid': {'lo': float(self.x_grid[0]), 'hi': float(self.x_grid[-1]), 'n': int(self.x_grid.size)},
            't_grid': self.t_grid.tolist(),
            'shape': list(self.p.shape),
            'file': f"{name}.bin",
            'sha256': write_blob(self.p, os.path.join(directory, f"{name}.bin")),
        }
        path = os.path.join(directory, f"{name}.json")
        with open(path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, directory: str, name: str = 'pdf') -> "PDFGrid":
        with open(os.path.join(directory, f"{name}.json"), 'r') as f:
            manifest = json.load(f)
        xg = manifest['x_grid']
        p = read_blob(os.path.join(directory, manifest['file']), manifest['shape'], manifest['sha256'])
        return cls(np.linspace(xg['lo'], xg['hi'], xg['n']), np.asarray(manifest['t_grid']), p)


def make_x_grid(lo: float, hi: float, n: int) -> np.ndarray:
    if n < 3 or not hi > lo:
        raise ValueError(f"Degenerate density grid [{lo}, {hi}] with {n} points")
    return np.linspace(lo, hi, int(n))


def korobov_generator(a: int, d: int, n: int) -> np.ndarray:
    """Generating vector (1, a, a^2, ...) mod n"""
    z = np.ones(d, dtype=np.int64)
    for j in range(1, d):
        z[j] = (z[j - 1] * a) % n
    return z


def lattice_points(n: int, z: np.ndarray) -> np.ndarray:
    """Centered rank-1 lattice frac((q z + 0.5) / n), q = 0..n-1"""
    q = np.arange(n, dtype=np.int64)[:, None]
    return np.mod((q * z[None, :] % n + 0.5) / n, 1.0)


def select_representative_points(space: ParameterSpace, n_sel: int,
                                 search_limit: int = 200) -> RepresentativePointSet:
    """
    Korobov lattice with the generator minimizing the L2-star discrepancy

    Args:
        space: Parameter space (random parameters and the random-function
            excitation variables span lattice dimensions)
        n_sel: Number of representative points
        search_limit: Largest candidate multiplier a

    Returns:
        RepresentativePointSet with weights 1/n_sel
    """
    if n_sel < 1:
        raise ValueError("n_sel must be at least 1")
    random_idx = [i for i, p in enumerate(space.parameters) if p.is_random]
    n_exc = space.excitation.n_random
    d = len(random_idx) + n_exc

    if d == 0:
        unit = np.zeros((n_sel, 0))
        z = np.zeros(0, dtype=np.int64)
    else:
        best_a, best_disc = 1, math.inf
        if n_sel > 2 and d > 1:
            for a in range(1, min(search_limit, n_sel - 1) + 1):
                if math.gcd(a, n_sel) != 1:
                    continue
                disc = qmc.discrepancy(lattice_points(n_sel, korobov_generator(a, d, n_sel)), method='L2-star')
                if disc < best_disc:
                    best_a, best_disc = a, disc
            logger.info(f"Lattice generator a={best_a} for n_sel={n_sel}, d={d} (L2-star {best_disc:.3e})")
        z = korobov_generator(best_a, d, n_sel)
        unit = lattice_points(n_sel, z)

    points = np.empty((n_sel, space.n_p))
    for i, spec in enumerate(space.parameters):
        if spec.is_random:
            points[:, i] = spec.ppf(unit[:, random_idx.index(i)])
        else:
            points[:, i] = spec.value
    return RepresentativePointSet(points=points, unit=unit, weights=np.full(n_sel, 1.0 / n_sel),
                                  generator=z, names=space.names,
                                  excitation_unit=unit[:, len(random_idx):].copy())


def _limiter(theta: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'minmod':
        return np.maximum(0.0, np.minimum(1.0, theta))
    if kind == 'van_leer':
        return (theta + np.abs(theta)) / (1.0 + np.abs(theta))
    if kind == 'superbee':
        return np.maximum.reduce([np.zeros_like(theta), np.minimum(2.0 * theta, 1.0), np.minimum(theta, 2.0)])
    raise ValueError(f"Unknown limiter '{kind}' (choose from {LIMITERS})")


def convection_step(p: np.ndarray, a: float, h: float, dx: float, limiter: str = 'minmod') -> np.ndarray:
    """
    One flux-limited Lax-Wendroff step of p_t + a p_x = 0 with zero inflow

    Args:
        p: Cell densities
        a: Velocity (constant over the step)
        h: Step length
        dx: Cell width
        limiter: Flux limiter name

    Returns:
        Updated densities
    """
    if a == 0.0:
        return p.copy()
    nu = a * h / dx
    g = np.concatenate([[0.0, 0.0], p, [0.0, 0.0]])
    # interfaces between g[k] and g[k+1] for k = 1 .. n+1
    left, right = g[1:-2], g[2:-1]
    jump = right - left
    if a > 0:
        upwind_jump = g[1:-2] - g[:-3]
        upwind = left
    else:
        upwind_jump = g[3:] - g[2:-1]
        upwind = right
    theta = np.divide(upwind_jump, jump, out=np.zeros_like(jump), where=jump != 0)
    flux = a * upwind + 0.5 * abs(a) * (1.0 - abs(nu)) * _limiter(theta, limiter) * jump
    return p - (h / dx) * (flux[1:] - flux[:-1])


def initial_hat(x_grid: np.ndarray, x0: float) -> np.ndarray:
    """Three-point hat of unit mass whose first moment is x0"""
    dx = x_grid[1] - x_grid[0]
    pos = (x0 - x_grid[0]) / dx
    i = int(np.floor(pos + 0.5))
    if i < 1 or i > x_grid.size - 2:
        raise GridRangeError(f"Initial state {x0} lies outside the density grid")
    s = pos - i
    p = np.zeros_like(x_grid)
    p[i - 1] = (0.5 - s) / 2.0
    p[i] = 0.5
    p[i + 1] = (0.5 + s) / 2.0
    return p / dx


def evolve_pdf(velocity: np.ndarray, x_grid: np.ndarray, dt_traj: float, dt_pde: float,
               x0: float = 0.0, limiter: str = 'minmod', p0: Optional[np.ndarray] = None,
               displacement: Optional[np.ndarray] = None) -> PDFGrid:
    """
    Evolve one case's density along its velocity history

    Args:
        velocity: dX/dt on the trajectory grid (n_t)
        x_grid: Uniform density grid
        dt_traj: Trajectory time step
        dt_pde: Largest convection step
        x0: Initial response value (location of the initial hat)
        limiter: 'minmod', 'van_leer' or 'superbee'
        p0: Optional initial density replacing the hat
        displacement: X(t) on the trajectory grid, checked against the grid

    Returns:
        PDFGrid sampled on the trajectory times
    """
    velocity = np.asarray(velocity, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.size < 3:
        raise ValueError("Density grid needs at least three points")
    dx = x_grid[1] - x_grid[0]
    if dt_pde <= 0 or dt_traj <= 0:
        raise ValueError("Time steps must be positive")
    cfl = np.abs(velocity).max() * dt_pde / dx if velocity.size else 0.0
    if cfl > MAX_CFL:
        logger.error(f"CFL number {cfl:.3f} exceeds {MAX_CFL}")
        raise CFLViolationError(f"CFL number {cfl:.3f} exceeds {MAX_CFL}; reduce dt_pde or coarsen the grid")
    if displacement is not None:
        lo, hi = x_grid[0] + 2 * dx, x_grid[-1] - 2 * dx
        if np.min(displacement) < lo or np.max(displacement) > hi:
            raise GridRangeError(
                f"Response range [{np.min(displacement):.4g}, {np.max(displacement):.4g}] "
                f"leaves the density grid [{x_grid[0]:.4g}, {x_grid[-1]:.4g}]"
            )

    n_t = velocity.size
    n_sub = max(1, int(math.ceil(dt_traj / dt_pde - 1e-12)))
    h = dt_traj / n_sub
    t_grid = np.arange(n_t) * dt_traj

    p = np.asarray(p0, dtype=float).copy() if p0 is not None else initial_hat(x_grid, x0)
    out = np.empty((n_t, x_grid.size))
    out[0] = p
    for j in range(n_t - 1):
        for m in range(n_sub):
            frac = (m + 0.5) / n_sub
            a = (1.0 - frac) * velocity[j] + frac * velocity[j + 1]
            p = convection_step(p, a, h, dx, limiter)
        out[j + 1] = p
    return PDFGrid(x_grid=x_grid, t_grid=t_grid, p=out)


def superpose(grids: Sequence[PDFGrid], weights: Sequence[float]) -> PDFGrid:
    """Weighted sum of case densities in a fixed order"""
    if not grids:
        raise ValueError("Nothing to superpose")
    first = grids[0]
    total = np.zeros_like(first.p)
    for grid, w in zip(grids, weights):
        if not first.same_grid(grid):
            raise ValueError("Case densities live on different grids")
        total += w * grid.p
    return PDFGrid(first.x_grid, first.t_grid, total)


def _renormalize(grid: PDFGrid) -> PDFGrid:
    mass = grid.mass()
    drift = np.abs(mass - 1.0)
    bad = (drift > MASS_TOL) & (mass > 0)
    if bad.any():
        logger.warning(f"Renormalizing {int(bad.sum())} density slices (max drift {drift.max():.3e})")
        grid.p[bad] /= mass[bad, None]
    return grid


class PDEMSolver:
    """Run the density evolution over representative cases"""

    def __init__(self, provider, selector, dt_pde: float = 0.001, limiter: str = 'minmod',
                 on_range: str = 'error', jobs: int = 1, excitation_seed: int = 0):
        """
        Initialize solver

        Args:
            provider: Object with responses(p_rows, f_rows) -> {'u', 'du', ...}
            selector: QuantitySelector mapping DOF responses to the monitored quantity
            dt_pde: Largest convection step
            limiter: Flux limiter name
            on_range: 'error' or 'widen' when the response leaves the grid
            jobs: Worker threads for per-case evolution
            excitation_seed: Seed of the shared realization when the excitation
                uses independent random phases
        """
        if on_range not in ('error', 'widen'):
            raise ValueError("on_range must be 'error' or 'widen'")
        _limiter(np.zeros(1), limiter)
        self.provider = provider
        self.selector = selector
        self.dt_pde = dt_pde
        self.limiter = limiter
        self.on_range = on_range
        self.jobs = max(1, int(jobs))
        self.excitation_seed = excitation_seed

    def case_excitations(self, space: ParameterSpace, points: RepresentativePointSet) -> np.ndarray:
        """Excitation history of every case (n_sel x n_t x channels)"""
        spec = space.excitation
        if spec.n_random:
            if points.excitation_unit.shape != (points.n_sel, spec.n_random):
                raise ValueError(
                    f"Representative points carry {points.excitation_unit.shape[-1]} excitation "
                    f"coordinates, the excitation needs {spec.n_random}"
                )
            return np.stack([excitation_from_unit(spec, space.dt, space.T, u)
                             for u in points.excitation_unit])
        if spec.is_stochastic:
            logger.warning("Excitation uses independent random phases; every case sees the single "
                           f"realization of seed {self.excitation_seed} and the density is conditional on it")
        f = generate_excitation(spec, space.dt, space.T, self.excitation_seed)
        return np.broadcast_to(f, (points.n_sel,) + f.shape)

    def case_responses(self, space: ParameterSpace, points: RepresentativePointSet):
        """Monitored quantity and its velocity for every case"""
        f_rows = self.case_excitations(space, points)
        out = self.provider.responses(points.points, f_rows)
        x = self.selector.apply(out['u'])[..., 0]
        v = self.selector.apply(out['du'])[..., 0]
        return x, v

    def _fit_grid(self, x: np.ndarray, x_grid: np.ndarray) -> np.ndarray:
        dx = x_grid[1] - x_grid[0]
        lo, hi = x_grid[0] + 2 * dx, x_grid[-1] - 2 * dx
        if x.min() >= lo and x.max() <= hi:
            return x_grid
        if self.on_range == 'error':
            raise GridRangeError(
                f"Responses span [{x.min():.4g}, {x.max():.4g}], grid covers [{x_grid[0]:.4g}, {x_grid[-1]:.4g}]"
            )
        n_lo = int(math.ceil(max(0.0, lo - x.min()) / dx))
        n_hi = int(math.ceil(max(0.0, x.max() - hi) / dx))
        widened = x_grid[0] - n_lo * dx + np.arange(x_grid.size + n_lo + n_hi) * dx
        logger.warning(f"Widening density grid to [{widened[0]:.4g}, {widened[-1]:.4g}] ({widened.size} points)")
        return widened

    def run(self, space: ParameterSpace, n_sel: int, x_grid: np.ndarray,
            points: Optional[RepresentativePointSet] = None, search_limit: int = 200) -> PDFGrid:
        """
        Superposed density of the monitored quantity

        Args:
            space: Parameter space
            n_sel: Number of representative points
            x_grid: Density grid
            points: Precomputed points (selected from the space when omitted)
            search_limit: Lattice generator search bound

        Returns:
            PDFGrid of the monitored quantity
        """
        points = points if points is not None else select_representative_points(space, n_sel, search_limit)
        x, v = self.case_responses(space, points)
        x_grid = self._fit_grid(x, np.asarray(x_grid, dtype=float))

        def evolve(q: int) -> PDFGrid:
            return evolve_pdf(v[q], x_grid, space.dt, self.dt_pde, x0=float(x[q, 0]), limiter=self.limiter)

        logger.info(f"Evolving {points.n_sel} representative cases on {x_grid.size} grid points")
        if self.jobs > 1 and points.n_sel > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                grids = list(pool.map(evolve, range(points.n_sel)))
        else:
            grids = [evolve(q) for q in range(points.n_sel)]
        return _renormalize(superpose(grids, points.weights))


def run_pdem(provider, space: ParameterSpace, n_sel: int, selector, x_grid: np.ndarray,
             dt_pde: float = 0.001, limiter: str = 'minmod', on_range: str = 'error',
             jobs: int = 1, search_limit: int = 200, excitation_seed: int = 0) -> PDFGrid:
    """Module-level wrapper around PDEMSolver.run"""
    solver = PDEMSolver(provider, selector, dt_pde, limiter, on_range, jobs, excitation_seed)
    return solver.run(space, n_sel, x_grid, search_limit=search_limit)


def compare_pdf(a: PDFGrid, b: PDFGrid, times: Sequence[float] = (),
                threshold: Optional[float] = None) -> Dict:
    """
    Distances between two densities on the same grid

    Args:
        a, b: Densities to compare
        times: Times at which per-slice rows are reported
        threshold: Exceedance threshold for dp* (omitted: no dp columns)

    Returns:
        Dictionary with per_slice_l1 (array), max_l1, mean_l1 and a table
        DataFrame of the requested times
    """
    if not a.same_grid(b):
        raise ValueError("Densities are defined on different grids")
    l1 = np.abs(a.p - b.p).sum(axis=1) * a.dx
    rows = []
    for t in times:
        k = a.time_index(t)
        row = {'t': float(a.t_grid[k]), 'l1': float(l1[k])}
        if threshold is not None:
            dp_a = float(a.exceedance(threshold)[k])
            dp_b = float(b.exceedance(threshold)[k])
            row.update({'dp_a': dp_a, 'dp_b': dp_b, 'dp_diff': dp_a - dp_b})
        rows.append(row)
    return {
        'per_slice_l1': l1,
        'max_l1': float(l1.max()),
        'mean_l1': float(l1.mean()),
        'table': pd.DataFrame(rows),
    }

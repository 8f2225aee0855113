#!/usr/bin/env python3
"""
Ground-Truth Oracle
Newmark average-acceleration integration, finite-difference derivatives,
dataset construction, normalization and on-disk persistence
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg

from .system_core import (
    ParameterSample, ParameterSpace, SecondOrderSystem, ShapeMismatchError, SystemTemplate,
    sample_parameters
)

logger = logging.getLogger(__name__)

NEWMARK_BETA = 0.25
NEWMARK_GAMMA = 0.5
STD_FLOOR = 1e-12
FORMAT_VERSION = 1
ARRAY_NAMES = ('p', 'f', 'u', 'du', 'ddu')


class IntegrationError(RuntimeError):
    """Raised when the time integration cannot proceed"""


@dataclass
class Trajectory:
    """Solution and its first/second time derivatives (n_t x n_dof each)"""
    dt: float
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray

    @property
    def n_t(self) -> int:
        return self.u.shape[0]

    @property
    def n_dof(self) -> int:
        return self.u.shape[1]


@dataclass
class NormStats:
    """Per-channel mean/std computed over the training split"""
    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]

    def apply(self, name: str, x):
        return (x - self.mean[name]) / self.std[name]

    def invert(self, name: str, x):
        return x * self.std[name] + self.mean[name]

    def to_dict(self) -> Dict:
        return {
            name: {'mean': self.mean[name].tolist(), 'std': self.std[name].tolist()}
            for name in sorted(self.mean)
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "NormStats":
        return cls(
            mean={k: np.asarray(v['mean'], dtype=float) for k, v in payload.items()},
            std={k: np.asarray(v['std'], dtype=float) for k, v in payload.items()},
        )


@dataclass
class Dataset:
    """
    Parameter samples and trajectories ordered train, test, virtual

    Virtual pairs carry samples only; u/du/ddu hold the labeled pairs.
    """
    p: np.ndarray
    f: np.ndarray
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray
    dt: float
    T: float
    n_train: int
    n_test: int
    n_virtual: int
    seeds: List[int]
    master_seed: int
    param_names: List[str]
    dof_labels: List[str]
    norm: Optional[NormStats] = None

    @property
    def n_pairs(self) -> int:
        return self.p.shape[0]

    @property
    def n_labeled(self) -> int:
        return self.n_train + self.n_test

    @property
    def n_t(self) -> int:
        return self.f.shape[1]

    @property
    def n_dof(self) -> int:
        return len(self.dof_labels)

    @property
    def n_channels(self) -> int:
        return self.f.shape[2]

    @property
    def train_idx(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def test_idx(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_labeled)

    @property
    def virtual_idx(self) -> np.ndarray:
        return np.arange(self.n_labeled, self.n_pairs)

    def sample(self, i: int) -> ParameterSample:
        return ParameterSample(p=self.p[i], f=self.f[i], dt=self.dt, seed=self.seeds[i])

    def trajectory(self, i: int) -> Optional[Trajectory]:
        if i >= self.n_labeled:
            return None
        return Trajectory(self.dt, self.u[i], self.du[i], self.ddu[i])

    @property
    def pairs(self) -> List[Tuple[ParameterSample, Optional[Trajectory]]]:
        return [(self.sample(i), self.trajectory(i)) for i in range(self.n_pairs)]


@dataclass
class NormalizedView:
    """Standardized copies of the dataset arrays"""
    p: np.ndarray
    f: np.ndarray
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray
    stats: NormStats
    source: Dataset = field(repr=False, default=None)


def integrate_newmark(system: SecondOrderSystem, f: np.ndarray, dt: float, T: float,
                      u0: Optional[np.ndarray] = None, v0: Optional[np.ndarray] = None) -> Trajectory:
    """
    Newmark average-acceleration time integration

    Args:
        system: Assembled second-order system
        f: Excitation (n_t x channels), mapped to DOF loads by the force map
        dt: Time step (s)
        T: Record length (s)
        u0: Initial displacement (zeros when omitted)
        v0: Initial velocity (zeros when omitted)

    Returns:
        Trajectory with (u, du, ddu) from the scheme itself
    """
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    n_t = int(round(T / dt)) + 1
    n = system.n_dof
    f = np.asarray(f, dtype=float)
    if f.shape != (n_t, system.n_channels):
        raise ShapeMismatchError(f"Excitation has shape {f.shape}, expected {(n_t, system.n_channels)}")

    M, C, K = system.M, system.C, system.K
    load = f @ system.force_map.T

    u = np.zeros((n_t, n))
    du = np.zeros((n_t, n))
    ddu = np.zeros((n_t, n))
    if u0 is not None:
        u[0] = u0
    if v0 is not None:
        du[0] = v0
    ddu[0] = linalg.solve(M, load[0] - C @ du[0] - K @ u[0], assume_a='pos')

    beta, gamma = NEWMARK_BETA, NEWMARK_GAMMA
    a0 = 1.0 / (beta * dt * dt)
    a1 = gamma / (beta * dt)
    a2 = 1.0 / (beta * dt)
    a3 = 1.0 / (2.0 * beta) - 1.0
    a4 = gamma / beta - 1.0
    a5 = dt / 2.0 * (gamma / beta - 2.0)
    a6 = dt * (1.0 - gamma)
    a7 = dt * gamma

    k_eff = K + a0 * M + a1 * C
    lu, piv = linalg.lu_factor(k_eff, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= 1e-14 * max(pivots.max(), 1.0):
        logger.error("Effective stiffness is singular")
        raise IntegrationError("Singular effective stiffness; check that K is not indefinite")

    for j in range(1, n_t):
        rhs = (load[j]
               + M @ (a0 * u[j - 1] + a2 * du[j - 1] + a3 * ddu[j - 1])
               + C @ (a1 * u[j - 1] + a4 * du[j - 1] + a5 * ddu[j - 1]))
        u[j] = linalg.lu_solve((lu, piv), rhs, check_finite=False)
        ddu[j] = a0 * (u[j] - u[j - 1]) - a2 * du[j - 1] - a3 * ddu[j - 1]
        du[j] = du[j - 1] + a6 * ddu[j - 1] + a7 * ddu[j]

    if not (np.isfinite(u).all() and np.isfinite(ddu).all()):
        logger.error("Integration produced non-finite values")
        raise IntegrationError("Non-finite trajectory")
    return Trajectory(dt=dt, u=u, du=du, ddu=ddu)


def _batched_matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(B, n, m) @ (B, m) accumulated column by column so each row only sees its own data"""
    out = A[:, :, 0] * x[:, 0, None]
    for j in range(1, A.shape[2]):
        out = out + A[:, :, j] * x[:, j, None]
    return out


def integrate_newmark_batch(systems: List[SecondOrderSystem], f: np.ndarray, dt: float,
                            T: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Newmark average-acceleration integration of B equally sized systems in lockstep

    Args:
        systems: Assembled systems sharing n_dof and n_channels
        f: Excitations (B x n_t x channels)
        dt: Time step (s)
        T: Record length (s)

    Returns:
        Tuple (u, du, ddu), each B x n_t x n_dof, starting from rest
    """
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    if not systems:
        raise ValueError("No systems to integrate")
    n_t = int(round(T / dt)) + 1
    n = systems[0].n_dof
    if any(s.n_dof != n or s.n_channels != systems[0].n_channels for s in systems):
        raise ShapeMismatchError("Batched systems must share their DOF and channel counts")
    f = np.asarray(f, dtype=float)
    expected = (len(systems), n_t, systems[0].n_channels)
    if f.shape != expected:
        raise ShapeMismatchError(f"Excitation has shape {f.shape}, expected {expected}")

    M = np.stack([s.M for s in systems])
    C = np.stack([s.C for s in systems])
    K = np.stack([s.K for s in systems])
    force_map = np.stack([s.force_map for s in systems])

    beta, gamma = NEWMARK_BETA, NEWMARK_GAMMA
    a0 = 1.0 / (beta * dt * dt)
    a1 = gamma / (beta * dt)
    a2 = 1.0 / (beta * dt)
    a3 = 1.0 / (2.0 * beta) - 1.0
    a4 = gamma / beta - 1.0
    a5 = dt / 2.0 * (gamma / beta - 2.0)
    a6 = dt * (1.0 - gamma)
    a7 = dt * gamma

    k_eff = K + a0 * M + a1 * C
    if np.any(np.linalg.cond(k_eff) > 1e14):
        logger.error("Effective stiffness is singular")
        raise IntegrationError("Singular effective stiffness; check that K is not indefinite")
    k_inv = np.linalg.inv(k_eff)
    m_inv = np.linalg.inv(M)

    B = len(systems)
    u = np.zeros((B, n_t, n))
    du = np.zeros((B, n_t, n))
    ddu = np.zeros((B, n_t, n))
    ddu[:, 0] = _batched_matvec(m_inv, _batched_matvec(force_map, f[:, 0]))

    for j in range(1, n_t):
        rhs = (_batched_matvec(force_map, f[:, j])
               + _batched_matvec(M, a0 * u[:, j - 1] + a2 * du[:, j - 1] + a3 * ddu[:, j - 1])
               + _batched_matvec(C, a1 * u[:, j - 1] + a4 * du[:, j - 1] + a5 * ddu[:, j - 1]))
        u[:, j] = _batched_matvec(k_inv, rhs)
        ddu[:, j] = a0 * (u[:, j] - u[:, j - 1]) - a2 * du[:, j - 1] - a3 * ddu[:, j - 1]
        du[:, j] = du[:, j - 1] + a6 * ddu[:, j - 1] + a7 * ddu[:, j]

    if not (np.isfinite(u).all() and np.isfinite(ddu).all()):
        logger.error("Batched integration produced non-finite values")
        raise IntegrationError("Non-finite trajectory")
    return u, du, ddu


def finite_difference(u: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    First and second time derivatives along axis 0

    Central differences inside, second-order one-sided stencils at the ends.

    Args:
        u: n_t x ... samples on a uniform grid
        dt: Grid spacing

    Returns:
        Tuple of (du, ddu) with the shape of u
    """
    u = np.asarray(u, dtype=float)
    n_t = u.shape[0]
    if n_t < 3:
        raise ShapeMismatchError(f"Finite differences need at least 3 samples, got {n_t}")

    du = np.empty_like(u)
    ddu = np.empty_like(u)
    du[1:-1] = (u[2:] - u[:-2]) / (2.0 * dt)
    du[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dt)
    du[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) / (2.0 * dt)

    ddu[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dt ** 2
    if n_t >= 4:
        ddu[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / dt ** 2
        ddu[-1] = (2.0 * u[-1] - 5.0 * u[-2] + 4.0 * u[-3] - u[-4]) / dt ** 2
    else:
        ddu[0] = ddu[1]
        ddu[-1] = ddu[1]
    return du, ddu


class DatasetBuilder:
    """Sample parameter configurations and integrate their trajectories"""

    def __init__(self, template: SystemTemplate, space: ParameterSpace, jobs: int = 1):
        """
        Initialize builder

        Args:
            template: System template instantiated per sample
            space: Parameter space with excitation and time grid
            jobs: Worker threads for per-sample integration
        """
        template.check_space(space)
        self.template = template
        self.space = space
        self.jobs = max(1, int(jobs))

    def _solve(self, sample: ParameterSample) -> Trajectory:
        system = self.template.instantiate(self.space.names, sample.p)
        return integrate_newmark(system, sample.f, self.space.dt, self.space.T)

    def build_dataset(self, n_train: int, n_test: int, n_virtual: int, master_seed: int) -> Dataset:
        """
        Build a dataset deterministically from a master seed

        Args:
            n_train: Labeled training pairs
            n_test: Labeled test pairs
            n_virtual: Samples without trajectories
            master_seed: Seed from which every per-sample seed derives

        Returns:
            Dataset ordered train, test, virtual
        """
        if min(n_train, n_test, n_virtual) < 0:
            raise ValueError("Dataset counts must be nonnegative")
        total = n_train + n_test + n_virtual
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(total)]
        samples = [sample_parameters(self.space, s) for s in seeds]
        labeled = samples[:n_train + n_test]

        logger.info(f"Integrating {len(labeled)} trajectories ({self.jobs} workers)")
        if self.jobs > 1 and len(labeled) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                trajectories = list(pool.map(self._solve, labeled))
        else:
            trajectories = [self._solve(s) for s in labeled]

        n_t, n_dof = self.space.n_t, self.template.n_dof
        stack = lambda key: (np.stack([getattr(tr, key) for tr in trajectories])
                             if trajectories else np.zeros((0, n_t, n_dof)))
        p = np.stack([s.p for s in samples]) if samples else np.zeros((0, self.space.n_p))
        f = (np.stack([s.f for s in samples]) if samples
             else np.zeros((0, n_t, self.space.excitation.channels)))

        dataset = Dataset(
            p=p, f=f, u=stack('u'), du=stack('du'), ddu=stack('ddu'),
            dt=self.space.dt, T=self.space.T,
            n_train=n_train, n_test=n_test, n_virtual=n_virtual,
            seeds=seeds, master_seed=int(master_seed),
            param_names=self.space.names, dof_labels=list(self.template.labels),
        )
        if n_train > 0:
            dataset.norm = compute_norm_stats(dataset)
        logger.info(f"Dataset built: {n_train} train, {n_test} test, {n_virtual} virtual")
        return dataset


def build_dataset(template: SystemTemplate, space: ParameterSpace, n_train: int, n_test: int,
                  n_virtual: int, master_seed: int, jobs: int = 1) -> Dataset:
    """Module-level wrapper around DatasetBuilder.build_dataset"""
    return DatasetBuilder(template, space, jobs).build_dataset(n_train, n_test, n_virtual, master_seed)


def _guarded_std(x: np.ndarray, axes) -> np.ndarray:
    std = x.std(axis=axes)
    return np.where(std < STD_FLOOR, 1.0, std)


def compute_norm_stats(dataset: Dataset) -> NormStats:
    """Per-channel statistics over the training split"""
    if dataset.n_train == 0:
        raise ValueError("Normalization needs a non-empty training split")
    tr = dataset.train_idx
    mean, std = {}, {}
    mean['p'] = dataset.p[tr].mean(axis=0)
    std['p'] = _guarded_std(dataset.p[tr], 0)
    for name in ('f', 'u', 'du', 'ddu'):
        arr = getattr(dataset, name)[tr]
        mean[name] = arr.mean(axis=(0, 1))
        std[name] = _guarded_std(arr, (0, 1))
    return NormStats(mean=mean, std=std)


def normalize(dataset: Dataset) -> Tuple[NormalizedView, NormStats]:
    """
    Standardize every array with training-split statistics

    Args:
        dataset: Dataset with at least one training pair

    Returns:
        Tuple of (NormalizedView, NormStats)
    """
    stats = dataset.norm if dataset.norm is not None else compute_norm_stats(dataset)
    dataset.norm = stats
    view = NormalizedView(
        p=stats.apply('p', dataset.p),
        f=stats.apply('f', dataset.f),
        u=stats.apply('u', dataset.u),
        du=stats.apply('du', dataset.du),
        ddu=stats.apply('ddu', dataset.ddu),
        stats=stats,
        source=dataset,
    )
    return view, stats


def denormalize(stats: NormStats, name: str, x):
    """Map standardized values of array `name` back to physical units"""
    return stats.invert(name, x)


def _blob_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype='<f8').tobytes()).hexdigest()


def write_blob(arr: np.ndarray, path: str) -> str:
    """Write a little-endian float64 row-major blob; returns its sha256"""
    data = np.ascontiguousarray(arr, dtype='<f8').tobytes()
    with open(path, 'wb') as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def read_blob(path: str, shape, sha256: Optional[str] = None) -> np.ndarray:
    """Read a blob written by write_blob, verifying its checksum when given"""
    with open(path, 'rb') as f:
        data = f.read()
    if sha256 is not None and hashlib.sha256(data).hexdigest() != sha256:
        raise ValueError(f"Checksum mismatch for {path}")
    arr = np.frombuffer(data, dtype='<f8')
    if arr.size != int(np.prod(shape)):
        raise ShapeMismatchError(f"{path} holds {arr.size} values, manifest says {tuple(shape)}")
    return arr.reshape(shape).astype(float)


def dataset_hash(dataset: Dataset) -> str:
    """Content hash over dimensions, grid, seeds and array bytes"""
    payload = {
        'dt': dataset.dt, 'T': dataset.T,
        'counts': [dataset.n_train, dataset.n_test, dataset.n_virtual],
        'master_seed': dataset.master_seed,
        'param_names': dataset.param_names, 'dof_labels': dataset.dof_labels,
        'arrays': {name: _blob_sha256(getattr(dataset, name)) for name in ARRAY_NAMES},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_dataset(dataset: Dataset, directory: str) -> str:
    """
    Persist a dataset as manifest.json plus one blob per array

    Args:
        dataset: Dataset to write
        directory: Target directory (created if needed)

    Returns:
        Path of the manifest
    """
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    for name in ARRAY_NAMES:
        arr = getattr(dataset, name)
        arrays[name] = {
            'file': f"{name}.bin",
            'shape': list(arr.shape),
            'sha256': write_blob(arr, os.path.join(directory, f"{name}.bin")),
        }
    manifest = {
        'format_version': FORMAT_VERSION,
        'dt': dataset.dt,
        'T': dataset.T,
        'n_t': dataset.n_t,
        'n_dof': dataset.n_dof,
        'n_channels': dataset.n_channels,
        'counts': {'train': dataset.n_train, 'test': dataset.n_test, 'virtual': dataset.n_virtual},
        'master_seed': dataset.master_seed,
        'seeds': dataset.seeds,
        'param_names': dataset.param_names,
        'dof_labels': dataset.dof_labels,
        'norm': dataset.norm.to_dict() if dataset.norm is not None else None,
        'arrays': arrays,
        'hash': dataset_hash(dataset),
    }
    path = os.path.join(directory, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved dataset to {directory}")
    return path


def load_dataset(directory: str) -> Dataset:
    """Load a dataset written by save_dataset"""
    path = os.path.join(directory, 'manifest.json')
    if not os.path.exists(path):
        raise FileNotFoundError(f"No dataset manifest in {directory}")
    with open(path, 'r') as f:
        manifest = json.load(f)
    if manifest.get('format_version') != FORMAT_VERSION:
        raise ValueError(f"Unsupported dataset format {manifest.get('format_version')}")

    arrays = {
        name: read_blob(os.path.join(directory, meta['file']), meta['shape'], meta['sha256'])
        for name, meta in manifest['arrays'].items()
    }
    counts = manifest['counts']
    dataset = Dataset(
        **arrays,
        dt=manifest['dt'], T=manifest['T'],
        n_train=counts['train'], n_test=counts['test'], n_virtual=counts['virtual'],
        seeds=manifest['seeds'], master_seed=manifest['master_seed'],
        param_names=manifest['param_names'], dof_labels=manifest['dof_labels'],
        norm=NormStats.from_dict(manifest['norm']) if manifest['norm'] else None,
    )
    return dataset

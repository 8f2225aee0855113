#!/usr/bin/env python3
"""
Equation Normalization
Per-pair, per-equation residual weights from a perturbation simulation of
the ground-truth trajectories
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .oracle import Dataset, Trajectory, dataset_hash, read_blob, write_blob
from .system_core import (
    ParameterSample, ResidualField, SecondOrderSystem, ShapeMismatchError, SystemTemplate, residual
)

logger = logging.getLogger(__name__)

DEFAULT_R = 0.02
DEFAULT_CAP = 1.0e6


@dataclass
class ENWeights:
    """Positive weights lambda (n_labeled x n_dof) and the settings that produced them"""
    lam: np.ndarray
    r: float = DEFAULT_R
    cap: float = DEFAULT_CAP
    seed: int = 0
    draws: int = 1
    dataset_hash: Optional[str] = None

    @property
    def shape(self):
        return self.lam.shape

    def rows(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and idx.max() >= self.lam.shape[0]:
            raise ShapeMismatchError(f"No EN weights for pair {int(idx.max())}")
        return self.lam[idx]


def perturbation_rng(seed: int, pair: int, draw: int = 0) -> np.random.Generator:
    """Generator for one pair's perturbation draw"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(pair), int(draw)]))


def perturbed_residual_peaks(system: SecondOrderSystem, sample: ParameterSample, trajectory: Trajectory,
                             r: float, rng: np.random.Generator) -> np.ndarray:
    """
    Peak residual per equation for one perturbed copy of the trajectory

    Args:
        system: System instantiated for the pair
        sample: The pair's parameter sample
        trajectory: Ground truth with stored derivatives
        r: Acceptable relative error level
        rng: Source of the perturbation draw

    Returns:
        L with L[j] = max over time of |residual_j| (length n_dof)
    """
    if r <= 0:
        raise ValueError("Acceptable error level r must be positive")
    shape = trajectory.u.shape
    states = []
    for arr in (trajectory.u, trajectory.du, trajectory.ddu):
        bound = r * arr.std(axis=0)
        states.append(arr + rng.uniform(-bound, bound, size=shape))
    res = residual(system, sample, *states)
    return res.max_abs()


class EquationNormalizer:
    """Compute equation-normalization weights over a labeled dataset"""

    def __init__(self, template: SystemTemplate, r: float = DEFAULT_R, cap: float = DEFAULT_CAP,
                 draws: int = 1, jobs: int = 1):
        """
        Initialize normalizer

        Args:
            template: System template instantiated per pair
            r: Acceptable error level (fraction)
            cap: Upper bound for any weight
            draws: Perturbation draws averaged per pair
            jobs: Worker threads
        """
        if r <= 0:
            raise ValueError("Acceptable error level r must be positive")
        if cap <= 0 or draws < 1:
            raise ValueError("cap must be positive and draws at least 1")
        self.template = template
        self.r = float(r)
        self.cap = float(cap)
        self.draws = int(draws)
        self.jobs = max(1, int(jobs))

    def _pair_weights(self, dataset: Dataset, seed: int, i: int) -> np.ndarray:
        system = self.template.instantiate(dataset.param_names, dataset.p[i])
        sample = dataset.sample(i)
        trajectory = dataset.trajectory(i)
        peaks = np.mean([
            perturbed_residual_peaks(system, sample, trajectory, self.r, perturbation_rng(seed, i, k))
            for k in range(self.draws)
        ], axis=0)
        capped = peaks < self.r / self.cap
        lam = np.where(capped, self.cap, self.r / np.where(capped, 1.0, peaks))
        if capped.any():
            logger.warning(f"Pair {i}: {int(capped.sum())} weights capped at {self.cap:g}")
        return lam

    def compute(self, dataset: Dataset, seed: int) -> ENWeights:
        """
        Weights for every labeled pair of the dataset

        Args:
            dataset: Dataset with stored derivatives
            seed: Perturbation seed

        Returns:
            ENWeights aligned with the labeled pairs
        """
        if dataset.n_labeled == 0:
            raise ValueError("Equation normalization needs labeled pairs")
        if dataset.ddu.shape[0] != dataset.n_labeled:
            raise ValueError("Dataset is missing stored derivatives")

        pairs = range(dataset.n_labeled)
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                rows = list(pool.map(lambda i: self._pair_weights(dataset, seed, i), pairs))
        else:
            rows = [self._pair_weights(dataset, seed, i) for i in pairs]

        lam = np.stack(rows)
        spread = np.log10(lam.max(axis=0) / lam.min(axis=0)) if lam.size else np.zeros(0)
        logger.info(
            f"EN weights for {lam.shape[0]} pairs; median lambda spans "
            f"{np.median(lam, axis=0).min():.3e} to {np.median(lam, axis=0).max():.3e}"
        )
        logger.debug(f"Per-equation decades of spread: {spread}")
        return ENWeights(lam=lam, r=self.r, cap=self.cap, seed=int(seed), draws=self.draws,
                         dataset_hash=dataset_hash(dataset))


def compute_en_weights(dataset: Dataset, template: SystemTemplate, r: float = DEFAULT_R, seed: int = 0,
                       cap: float = DEFAULT_CAP, draws: int = 1, jobs: int = 1) -> ENWeights:
    """Module-level wrapper around EquationNormalizer.compute"""
    return EquationNormalizer(template, r, cap, draws, jobs).compute(dataset, seed)


def weighted_residual_norm(residuals: ResidualField, lam_row: np.ndarray) -> float:
    """
    Mean over time of the squared lambda-weighted residual norm

    Args:
        residuals: ResidualField (n_t x n_dof)
        lam_row: Weights for one pair (n_dof)

    Returns:
        mean_t sum_j (lam_j * residual[t, j])^2
    """
    values = residuals.values
    lam_row = np.asarray(lam_row, dtype=float)
    if lam_row.shape != (values.shape[1],):
        raise ShapeMismatchError(f"Weight row has shape {lam_row.shape}, residual has {values.shape[1]} equations")
    return float(np.mean(np.sum((values * lam_row) ** 2, axis=1)))


def median_lambda(weights: ENWeights, rows: Optional[Sequence[int]] = None) -> np.ndarray:
    """Per-equation median weight (over the given pairs), used for virtual pairs"""
    lam = weights.lam if rows is None else weights.rows(rows)
    if lam.shape[0] == 0:
        raise ValueError("No weights to take the median of")
    return np.median(lam, axis=0)


def save_en_weights(weights: ENWeights, directory: str) -> str:
    """Write lambda.bin plus a manifest keyed by the dataset hash"""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        'dataset_hash': weights.dataset_hash,
        'r': weights.r,
        'cap': weights.cap,
        'seed': weights.seed,
        'draws': weights.draws,
        'shape': list(weights.lam.shape),
        'file': 'lambda.bin',
        'sha256': write_blob(weights.lam, os.path.join(directory, 'lambda.bin')),
    }
    path = os.path.join(directory, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved EN weights to {directory}")
    return path


def load_en_weights(directory: str, expected_hash: Optional[str] = None) -> ENWeights:
    """Load weights, refusing ones computed for a different dataset"""
    path = os.path.join(directory, 'manifest.json')
    if not os.path.exists(path):
        raise FileNotFoundError(f"No EN weights in {directory}")
    with open(path, 'r') as f:
        manifest = json.load(f)
    if expected_hash is not None and manifest['dataset_hash'] != expected_hash:
        raise ValueError("EN weights were computed for a different dataset")
    lam = read_blob(os.path.join(directory, manifest['file']), manifest['shape'], manifest['sha256'])
    return ENWeights(lam=lam, r=manifest['r'], cap=manifest['cap'], seed=manifest['seed'],
                     draws=manifest['draws'], dataset_hash=manifest['dataset_hash'])

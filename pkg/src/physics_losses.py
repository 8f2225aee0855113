#!/usr/bin/env python3
"""
Physics Losses
Data, equation-residual, direct-derivative and virtual-equation loss terms,
GradNorm loss balancing and relative L2 error metrics
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .oracle import NormStats
from .system_core import SystemTemplate

logger = logging.getLogger(__name__)

LOSS_NAMES = ('data', 'eq', 'dde', 'veq')
MIN_OMEGA = 1e-6


@dataclass
class LossWeights:
    """omega for (data, eq, dde, veq) with per-term activation"""
    omega: np.ndarray = field(default_factory=lambda: np.ones(4))
    active: List[bool] = field(default_factory=lambda: [True, True, False, False])
    alpha: float = 1.5

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).copy()
        if self.omega.shape != (4,) or len(self.active) != 4:
            raise ValueError("Loss weights need four entries")
        if (self.omega[self.active_idx] <= 0).any():
            raise ValueError("Active loss weights must be positive")

    @property
    def active_idx(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def n_active(self) -> int:
        return int(np.sum(self.active))

    def normalized(self) -> "LossWeights":
        """Copy with the active omegas rescaled to sum to the active count"""
        out = copy.deepcopy(self)
        idx = out.active_idx
        if idx.size:
            out.omega[idx] *= idx.size / out.omega[idx].sum()
        out.omega[~np.asarray(self.active)] = 0.0
        return out


class SystemBank:
    """Stacked M, C, K and force maps for a set of pairs, as tensors"""

    def __init__(self, template: SystemTemplate, names: Sequence[str], p_rows: np.ndarray,
                 dtype: torch.dtype = torch.float32):
        """
        Initialize bank

        Args:
            template: System template
            names: Parameter names of the dataset
            p_rows: Physical parameter rows (N x n_p)
            dtype: Tensor dtype
        """
        systems = [template.instantiate(list(names), p) for p in np.atleast_2d(p_rows)] if len(p_rows) else []
        n = template.n_dof
        n_ch = template.n_channels

        def stack(attr, shape):
            if not systems:
                return torch.zeros((0,) + shape, dtype=dtype)
            return torch.as_tensor(np.stack([getattr(s, attr) for s in systems]), dtype=dtype)

        self.M = stack('M', (n, n))
        self.C = stack('C', (n, n))
        self.K = stack('K', (n, n))
        self.B = stack('force_map', (n, n_ch))

    def __len__(self) -> int:
        return self.M.shape[0]

    def take(self, idx) -> "SystemBank":
        sub = copy.copy(self)
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        sub.M, sub.C, sub.K, sub.B = self.M[idx], self.C[idx], self.K[idx], self.B[idx]
        return sub


def finite_difference_torch(u: torch.Tensor, dt: float):
    """Differentiable counterpart of oracle.finite_difference along dim -2 (time)"""
    n_t = u.shape[-2]
    if n_t < 4:
        raise ValueError(f"Finite differences need at least 4 samples here, got {n_t}")
    first = (-3.0 * u[..., 0:1, :] + 4.0 * u[..., 1:2, :] - u[..., 2:3, :]) / (2.0 * dt)
    inner = (u[..., 2:, :] - u[..., :-2, :]) / (2.0 * dt)
    last = (3.0 * u[..., -1:, :] - 4.0 * u[..., -2:-1, :] + u[..., -3:-2, :]) / (2.0 * dt)
    du = torch.cat([first, inner, last], dim=-2)

    first2 = (2.0 * u[..., 0:1, :] - 5.0 * u[..., 1:2, :] + 4.0 * u[..., 2:3, :] - u[..., 3:4, :]) / dt ** 2
    inner2 = (u[..., 2:, :] - 2.0 * u[..., 1:-1, :] + u[..., :-2, :]) / dt ** 2
    last2 = (2.0 * u[..., -1:, :] - 5.0 * u[..., -2:-1, :] + 4.0 * u[..., -3:-2, :] - u[..., -4:-3, :]) / dt ** 2
    ddu = torch.cat([first2, inner2, last2], dim=-2)
    return du, ddu


def _stat(stats: NormStats, name: str, kind: str, like: torch.Tensor) -> torch.Tensor:
    values = stats.mean[name] if kind == 'mean' else stats.std[name]
    return torch.as_tensor(values, dtype=like.dtype)


def denormalize_torch(stats: NormStats, name: str, x: torch.Tensor) -> torch.Tensor:
    return x * _stat(stats, name, 'std', x) + _stat(stats, name, 'mean', x)


def normalize_torch(stats: NormStats, name: str, x: torch.Tensor) -> torch.Tensor:
    return (x - _stat(stats, name, 'mean', x)) / _stat(stats, name, 'std', x)


def derivatives_from_prediction(pred: torch.Tensor, stats: NormStats, dt: float):
    """Physical (u, du, ddu) from a normalized network output"""
    u = denormalize_torch(stats, 'u', pred)
    du, ddu = finite_difference_torch(u, dt)
    return u, du, ddu


def batch_residual(bank: SystemBank, u: torch.Tensor, du: torch.Tensor, ddu: torch.Tensor,
                   f: torch.Tensor) -> torch.Tensor:
    """M ddu + C du + K u - B f for a batch (B, n_t, n_dof)"""
    return (torch.einsum('bij,btj->bti', bank.M, ddu)
            + torch.einsum('bij,btj->bti', bank.C, du)
            + torch.einsum('bij,btj->bti', bank.K, u)
            - torch.einsum('bic,btc->bti', bank.B, f))


def loss_data(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pairs, time steps and channels"""
    if pred.shape != truth.shape:
        raise ValueError(f"Prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    return torch.mean((pred - truth) ** 2)


def loss_eq(pred: torch.Tensor, f: torch.Tensor, bank: SystemBank, stats: NormStats, dt: float,
            lam: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Weighted equation residual of a normalized prediction

    Args:
        pred: (B, n_t, n_dof) normalized solution
        f: (B, n_t, n_ch) physical excitation
        bank: Systems of the batch pairs
        stats: Normalization statistics
        dt: Time step
        lam: (B, n_dof) equation weights (ones when omitted)

    Returns:
        Mean over the batch of mean_t sum_j (lam_j r_tj)^2
    """
    if len(bank) != pred.shape[0]:
        raise ValueError("System bank and prediction batch differ in size")
    u, du, ddu = derivatives_from_prediction(pred, stats, dt)
    res = batch_residual(bank, u, du, ddu, f)
    if lam is not None:
        if lam.shape != (pred.shape[0], pred.shape[2]):
            raise ValueError(f"Equation weights have shape {tuple(lam.shape)}, expected one row per pair")
        res = res * lam[:, None, :]
    return torch.mean(torch.sum(res ** 2, dim=2))


def window_mask(n_t: int, dt: float, window: Optional[float]) -> torch.Tensor:
    """Boolean mask of [0, window] and [T - window, T]; all true when window is None"""
    T = (n_t - 1) * dt
    if window is None:
        return torch.ones(n_t, dtype=torch.bool)
    if window < 0 or window > T / 2 + 1e-12:
        raise ValueError(f"Derivative window {window} s must lie in [0, T/2]")
    t = torch.arange(n_t, dtype=torch.float64) * dt
    eps = 1e-9 * dt
    return (t <= window + eps) | (t >= T - window - eps)


def loss_dde(pred: torch.Tensor, du_true: torch.Tensor, ddu_true: torch.Tensor, stats: NormStats,
             dt: float, window: Optional[float] = None) -> torch.Tensor:
    """
    Direct derivative loss on the normalized scale

    Args:
        pred: (B, n_t, n_dof) normalized solution
        du_true, ddu_true: Normalized stored derivatives
        stats: Normalization statistics
        dt: Time step
        window: Edge window in seconds (None: full domain)

    Returns:
        MSE(du) + MSE(ddu) over the masked steps
    """
    _, du, ddu = derivatives_from_prediction(pred, stats, dt)
    mask = window_mask(pred.shape[1], dt, window)
    err_1 = normalize_torch(stats, 'du', du) - du_true
    err_2 = normalize_torch(stats, 'ddu', ddu) - ddu_true
    return torch.mean(err_1[:, mask] ** 2) + torch.mean(err_2[:, mask] ** 2)


def loss_veq(pred: torch.Tensor, f: torch.Tensor, bank: SystemBank, stats: NormStats, dt: float,
             median_lam: Optional[np.ndarray] = None) -> torch.Tensor:
    """Equation loss on virtual pairs with the dataset-median weights"""
    if pred.shape[0] == 0:
        raise ValueError("Virtual split is empty")
    lam = None
    if median_lam is not None:
        lam = torch.as_tensor(np.asarray(median_lam), dtype=pred.dtype).expand(pred.shape[0], -1)
    return loss_eq(pred, f, bank, stats, dt, lam)


def gradnorm_update(weights: LossWeights, grad_norms: np.ndarray, losses: np.ndarray,
                    initial_losses: np.ndarray, lr: float) -> LossWeights:
    """
    One GradNorm step on the active loss weights

    Each weighted gradient norm is pulled toward mean(G) * r_i^alpha, where
    r_i is the loss ratio to its initial value relative to the mean ratio.
    alpha = 0 ignores training rates and equalizes the weighted norms.
    Equal norms at equal rates leave the weights unchanged.

    Args:
        weights: Current weights
        grad_norms: ||grad(omega_i L_i)|| at the shared layer, per term
        losses: Current loss values
        initial_losses: Loss values at the first step
        lr: Step size

    Returns:
        Updated, renormalized LossWeights
    """
    idx = weights.active_idx
    if idx.size < 2:
        raise ValueError("GradNorm needs at least two active loss terms")
    G = np.asarray(grad_norms, dtype=float)[idx]
    if not np.any(G > 0):
        raise ValueError("All gradient norms are zero")

    ratio = np.asarray(losses, dtype=float)[idx] / np.asarray(initial_losses, dtype=float)[idx]
    inverse_rate = ratio / ratio.mean()
    target = G.mean() * inverse_rate ** weights.alpha

    omega = weights.omega[idx]
    raw = G / omega
    step = lr * np.sign(G - target) * raw / G.mean()
    omega = np.maximum(omega - step, MIN_OMEGA)

    out = copy.deepcopy(weights)
    out.omega[idx] = omega * idx.size / omega.sum()
    return out


def rlse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Relative L2 error in percent, pooled over every entry"""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"Prediction {pred.shape} and truth {truth.shape} differ")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("Truth has zero norm")
    return float(100.0 * np.linalg.norm(pred - truth) / norm)


def rlse_per_dof_mean(pred: np.ndarray, truth: np.ndarray) -> float:
    """Relative L2 error per DOF (last axis), averaged over DOFs"""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"Prediction {pred.shape} and truth {truth.shape} differ")
    axes = tuple(range(truth.ndim - 1))
    norms = np.sqrt(np.sum(truth ** 2, axis=axes))
    keep = norms > 0
    if not keep.any():
        raise ValueError("Truth has zero norm")
    errs = np.sqrt(np.sum((pred - truth) ** 2, axis=axes))
    return float(100.0 * np.mean(errs[keep] / norms[keep]))

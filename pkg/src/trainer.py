#!/usr/bin/env python3
"""
Operator Trainer
Trains the operator model on the composed data/equation/derivative/virtual
objective with Adam, step decay and optional GradNorm balancing
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from .equation_normalizer import ENWeights, median_lambda
from .operator_model import OperatorModel, encode_inputs
from .oracle import Dataset, NormStats, finite_difference, normalize
from .physics_losses import (
    LOSS_NAMES, LossWeights, SystemBank, gradnorm_update, loss_data, loss_dde, loss_eq, loss_veq,
    rlse, rlse_per_dof_mean
)
from .system_core import SystemTemplate

logger = logging.getLogger(__name__)

# Loss compositions: data loss on unless stated, 'en' toggles equation normalization
ROW_PRESETS: Dict[str, Dict] = {
    'T1': {'losses': {'data': True, 'eq': True, 'dde': False, 'veq': False}, 'en': True},
    'T2': {'losses': {'data': True, 'eq': True, 'dde': True, 'veq': False}, 'en': True},
    'T3': {'losses': {'data': True, 'eq': True, 'dde': False, 'veq': True}, 'en': True},
    'T4': {'losses': {'data': True, 'eq': True, 'dde': True, 'veq': True}, 'en': True},
    'T5': {'losses': {'data': True, 'eq': True, 'dde': False, 'veq': False}, 'en': False},
    'T6': {'losses': {'data': True, 'eq': True, 'dde': False, 'veq': True}, 'en': False},
    'T7': {'losses': {'data': True, 'eq': False, 'dde': False, 'veq': False}, 'en': False},
    'A1': {'losses': {'data': False, 'eq': True, 'dde': True, 'veq': True}, 'en': True,
           'dde_window': 0.025},
}


class TrainingDivergedError(RuntimeError):
    """Raised when a loss becomes non-finite"""


@dataclass
class TrainConfig:
    """Optimizer, schedule and loss composition"""
    epochs: int = 300
    batch_size: int = 100
    learning_rate: float = 1e-3
    decay_steps: int = 75
    decay_ratio: float = 0.5
    seed: int = 0
    dde_window: Optional[float] = 0.025
    losses: Dict[str, bool] = field(default_factory=lambda: {'data': True, 'eq': True, 'dde': True, 'veq': False})
    en: bool = True
    gradnorm: bool = True
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    omega: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    row: Optional[str] = None

    @classmethod
    def from_config(cls, cfg: Dict, presets: Optional[Dict] = None) -> "TrainConfig":
        """Build from the 'training' section; a named row overrides losses/en/window"""
        keys = {k: copy.deepcopy(v) for k, v in cfg.items() if k in cls.__dataclass_fields__}
        config = cls(**keys)
        if config.row is not None:
            config.apply_row(config.row, presets)
        config.validate()
        return config

    def apply_row(self, row: str, presets: Optional[Dict] = None):
        table = dict(ROW_PRESETS)
        table.update(presets or {})
        if row not in table:
            raise ValueError(f"Unknown loss row '{row}' (known: {sorted(table)})")
        preset = table[row]
        self.losses = dict(preset['losses'])
        self.en = bool(preset.get('en', self.en))
        if 'dde_window' in preset:
            self.dde_window = preset['dde_window']
        self.row = row

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.decay_ratio <= 0:
            raise ValueError("learning_rate must be >= 0 and decay_ratio > 0")
        if set(self.losses) != set(LOSS_NAMES):
            raise ValueError(f"losses must name exactly {LOSS_NAMES}")
        if not any(self.losses.values()):
            raise ValueError("At least one loss term must be active")

    @property
    def active(self) -> List[bool]:
        return [bool(self.losses[name]) for name in LOSS_NAMES]


@dataclass
class TrainReport:
    """Per-epoch loss components, omega values and test rLSE"""
    rows: List[Dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.10g')

    @property
    def final(self) -> Dict:
        return self.rows[-1] if self.rows else {}


def predict(model: OperatorModel, p: np.ndarray, f: np.ndarray, stats: NormStats, dt: float,
            batch_size: int = 256) -> Dict[str, np.ndarray]:
    """
    Batched inference in physical units

    Args:
        model: Trained model
        p: (N, n_p) physical parameters
        f: (N, n_t, n_ch) physical excitations
        stats: Normalization statistics of the training data
        dt: Time step
        batch_size: Samples per forward pass

    Returns:
        Dictionary with u, du, ddu arrays (N, n_t, n_dof)
    """
    p_n = stats.apply('p', np.asarray(p, dtype=float))
    f_n = stats.apply('f', np.asarray(f, dtype=float))
    outs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, p_n.shape[0], batch_size):
            x = encode_inputs(p_n[start:start + batch_size], f_n[start:start + batch_size],
                              model.arch.torch_dtype)
            outs.append(model(x).cpu().numpy().astype(float))
    if outs:
        u = stats.invert('u', np.concatenate(outs))
    else:
        u = np.zeros((0, np.shape(f)[1], model.arch.n_out))
    if u.shape[0] == 0:
        return {'u': u, 'du': u.copy(), 'ddu': u.copy()}
    du, ddu = finite_difference(np.moveaxis(u, 1, 0), dt)
    return {'u': u, 'du': np.moveaxis(du, 0, 1), 'ddu': np.moveaxis(ddu, 0, 1)}


def evaluate(model: OperatorModel, dataset: Dataset, idx: Optional[np.ndarray] = None,
             batch_size: int = 256) -> Dict[str, float]:
    """
    Relative L2 errors (percent) on standardized data

    Args:
        model: Trained model
        dataset: Dataset with normalization statistics
        idx: Labeled pairs to score (test split when omitted)
        batch_size: Samples per forward pass

    Returns:
        Pooled rLSE for solutions, 1st and 2nd derivatives, their average,
        and the per-DOF-mean variants
    """
    _, stats = normalize(dataset)
    idx = dataset.test_idx if idx is None else np.asarray(idx)
    if idx.size == 0:
        raise ValueError("No labeled pairs to evaluate")
    out = predict(model, dataset.p[idx], dataset.f[idx], stats, dataset.dt, batch_size)
    metrics = {}
    for key, name in (('u', 'solutions'), ('du', 'first_derivatives'), ('ddu', 'second_derivatives')):
        pred = stats.apply(key, out[key])
        truth = stats.apply(key, getattr(dataset, key)[idx])
        metrics[name] = rlse(pred, truth)
        metrics[f"{name}_per_dof"] = rlse_per_dof_mean(pred, truth)
    metrics['average'] = float(np.mean(
        [metrics['solutions'], metrics['first_derivatives'], metrics['second_derivatives']]
    ))
    return metrics


class OperatorTrainer:
    """Mini-batch training of an OperatorModel on a Dataset"""

    def __init__(self, model: OperatorModel, dataset: Dataset, template: SystemTemplate,
                 config: TrainConfig, en_weights: Optional[ENWeights] = None):
        """
        Initialize trainer

        Args:
            model: Model to train (updated in place)
            dataset: Dataset with train/test/virtual splits
            template: System template for the equation losses
            config: Training configuration
            en_weights: Equation weights (required when EN and an equation loss are active)
        """
        config.validate()
        if dataset.n_train == 0:
            raise ValueError("Training needs a non-empty training split")
        self.model = model
        self.dataset = dataset
        self.config = config
        self.dtype = model.arch.torch_dtype
        self.dt = dataset.dt

        losses = config.losses
        self.physics = losses['eq'] or losses['veq']
        if losses['veq'] and dataset.n_virtual == 0:
            raise ValueError("Virtual equation loss needs virtual pairs")
        if config.en and self.physics:
            if en_weights is None:
                raise ValueError("Equation normalization is enabled but no weights were given")
            if en_weights.lam.shape[0] < dataset.n_train:
                raise ValueError("EN weights do not cover the training pairs")
        self.en_weights = en_weights if config.en else None

        view, self.stats = normalize(dataset)
        self.X = encode_inputs(view.p, view.f, self.dtype)
        self.u_n = torch.as_tensor(view.u, dtype=self.dtype)
        self.du_n = torch.as_tensor(view.du, dtype=self.dtype)
        self.ddu_n = torch.as_tensor(view.ddu, dtype=self.dtype)
        self.f_phys = torch.as_tensor(dataset.f, dtype=self.dtype)
        self.bank = SystemBank(template, dataset.param_names, dataset.p, self.dtype) if self.physics else None

        self.lam = None
        self.median_lam = None
        if self.en_weights is not None:
            self.lam = torch.as_tensor(self.en_weights.lam, dtype=self.dtype)
            self.median_lam = median_lambda(self.en_weights, dataset.train_idx)

        self.weights = LossWeights(np.asarray(config.omega, dtype=float), config.active,
                                   config.gradnorm_alpha).normalized()
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.scheduler = None
        if config.decay_steps and config.decay_steps > 0:
            self.scheduler = torch.optim.lr_scheduler.StepLR(
                self.optimizer, step_size=int(config.decay_steps), gamma=config.decay_ratio
            )
        self.initial_losses: Optional[np.ndarray] = None

    def compute_losses(self, idx: np.ndarray, vidx: Optional[np.ndarray] = None) -> Dict[str, torch.Tensor]:
        """Active loss terms for one labeled batch (and one virtual batch)"""
        losses = self.config.losses
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        out: Dict[str, torch.Tensor] = {}
        pred = self.model(self.X[idx_t])
        if losses['data']:
            out['data'] = loss_data(pred, self.u_n[idx_t])
        if losses['eq']:
            lam = self.lam[idx_t] if self.lam is not None else None
            out['eq'] = loss_eq(pred, self.f_phys[idx_t], self.bank.take(idx), self.stats, self.dt, lam)
        if losses['dde']:
            out['dde'] = loss_dde(pred, self.du_n[idx_t], self.ddu_n[idx_t], self.stats, self.dt,
                                  self.config.dde_window)
        if losses['veq']:
            vidx_t = torch.as_tensor(vidx, dtype=torch.long)
            vpred = self.model(self.X[vidx_t])
            out['veq'] = loss_veq(vpred, self.f_phys[vidx_t], self.bank.take(vidx), self.stats, self.dt,
                                  self.median_lam)
        return out

    def total(self, losses: Dict[str, torch.Tensor]) -> torch.Tensor:
        """omega-weighted sum of the active terms"""
        terms = [float(self.weights.omega[i]) * losses[name]
                 for i, name in enumerate(LOSS_NAMES) if name in losses]
        return torch.stack(terms).sum()

    def backward(self, idx: np.ndarray, vidx: Optional[np.ndarray] = None,
                 upstream: float = 1.0) -> Dict[str, torch.Tensor]:
        """
        Reverse-mode gradients of the composed loss for one batch

        Args:
            idx: Labeled pair indices
            vidx: Virtual pair indices (when the virtual loss is active)
            upstream: Scale applied to the loss before differentiation

        Returns:
            Parameter name -> gradient tensor
        """
        self.model.zero_grad(set_to_none=False)
        losses = self.compute_losses(idx, vidx)
        loss = self.total(losses)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"Non-finite loss {loss.item()}")
        (loss * upstream).backward()
        return {name: p.grad.detach().clone() for name, p in self.model.named_parameters()}

    def _balance(self, losses: Dict[str, torch.Tensor]):
        shared = self.model.shared_parameters()
        norms = np.zeros(len(LOSS_NAMES))
        values = np.zeros(len(LOSS_NAMES))
        for i, name in enumerate(LOSS_NAMES):
            if name not in losses:
                continue
            grads = torch.autograd.grad(losses[name], shared, retain_graph=True, allow_unused=True)
            sq = sum(float((g ** 2).sum()) for g in grads if g is not None)
            norms[i] = self.weights.omega[i] * np.sqrt(sq)
            values[i] = float(losses[name].detach())
        if self.initial_losses is None:
            self.initial_losses = np.where(values > 0, values, 1.0)
            return
        if np.any(norms[self.weights.active_idx] > 0):
            self.weights = gradnorm_update(self.weights, norms, values, self.initial_losses,
                                           self.config.gradnorm_lr)

    def _test_metrics(self) -> Dict[str, float]:
        if self.dataset.n_test == 0:
            return {}
        metrics = evaluate(self.model, self.dataset)
        self.model.train()
        return {
            'rlse_u': metrics['solutions'],
            'rlse_du': metrics['first_derivatives'],
            'rlse_ddu': metrics['second_derivatives'],
        }

    def train(self) -> TrainReport:
        """
        Run the configured number of epochs

        Returns:
            TrainReport with one row per epoch
        """
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        report = TrainReport()
        balance = cfg.gradnorm and self.weights.n_active >= 2
        virtual = self.dataset.virtual_idx
        v_order = rng.permutation(virtual) if cfg.losses['veq'] else None
        v_pos = 0

        logger.info(
            f"Training {cfg.epochs} epochs, row={cfg.row or 'custom'}, active="
            f"{[n for n in LOSS_NAMES if cfg.losses[n]]}, EN={'on' if self.lam is not None else 'off'}"
        )
        self.model.train()
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(self.dataset.n_train)
            sums = {name: 0.0 for name in LOSS_NAMES}
            total_sum, n_batches = 0.0, 0
            for start in range(0, order.size, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                vidx = None
                if v_order is not None:
                    take = np.arange(v_pos, v_pos + min(cfg.batch_size, virtual.size)) % virtual.size
                    vidx = v_order[take]
                    v_pos = (v_pos + take.size) % virtual.size

                losses = self.compute_losses(idx, vidx)
                for name, value in losses.items():
                    if not torch.isfinite(value):
                        logger.error(f"Loss '{name}' became non-finite at epoch {epoch}")
                        raise TrainingDivergedError(f"Non-finite {name} loss at epoch {epoch}")
                if balance:
                    self._balance(losses)
                loss = self.total(losses)

                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()

                for name, value in losses.items():
                    sums[name] += float(value.detach())
                total_sum += float(loss.detach())
                n_batches += 1

            lr = self.optimizer.param_groups[0]['lr']
            if self.scheduler is not None:
                self.scheduler.step()

            row = {'epoch': epoch, 'lr': lr, 'loss_total': total_sum / max(n_batches, 1)}
            for i, name in enumerate(LOSS_NAMES):
                row[f"loss_{name}"] = sums[name] / max(n_batches, 1) if cfg.losses[name] else np.nan
                row[f"omega_{name}"] = float(self.weights.omega[i])
            row.update(self._test_metrics())
            report.rows.append(row)
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: loss={row['loss_total']:.4e}"
                + (f", test rLSE u={row['rlse_u']:.2f}%" if 'rlse_u' in row else "")
            )
        return report


def train(model: OperatorModel, dataset: Dataset, template: SystemTemplate, config: TrainConfig,
          en_weights: Optional[ENWeights] = None):
    """Module-level wrapper: returns (trained model, TrainReport)"""
    report = OperatorTrainer(model, dataset, template, config, en_weights).train()
    return model, report

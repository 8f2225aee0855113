#!/usr/bin/env python3
"""
System Core
Assembles coupled second-order systems from a configuration template,
samples parameter configurations, synthesizes stochastic excitations and
evaluates the equation residual M u'' + C u' + K u - B f
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from .modal import (
    ReducedFlexibleBody, effective_mass, euler_beam_frequencies, euler_beam_modes,
    lumped_chain_matrices, reduce, solve_eigen
)

logger = logging.getLogger(__name__)

GROUND = 'ground'
SYMMETRY_TOL = 1e-10


class SystemConfigError(ValueError):
    """Raised when a system or parameter-space configuration is invalid"""


class ShapeMismatchError(ValueError):
    """Raised when array shapes do not agree with the system or time grid"""


@dataclass
class SecondOrderSystem:
    """Mass, damping, stiffness matrices and the excitation-to-DOF load map"""
    M: np.ndarray
    C: np.ndarray
    K: np.ndarray
    force_map: np.ndarray
    labels: List[str]

    @property
    def n_dof(self) -> int:
        return self.M.shape[0]

    @property
    def n_channels(self) -> int:
        return self.force_map.shape[1]

    def validate(self):
        """Check symmetry, definiteness and sizes"""
        n = self.n_dof
        for name, mat in (('M', self.M), ('C', self.C), ('K', self.K)):
            if mat.shape != (n, n):
                raise SystemConfigError(f"{name} has shape {mat.shape}, expected {(n, n)}")
            scale = max(np.abs(mat).max(), 1.0)
            if np.abs(mat - mat.T).max() > SYMMETRY_TOL * scale:
                raise SystemConfigError(f"{name} is not symmetric")
        if self.force_map.shape[0] != n:
            raise SystemConfigError("Force map rows do not match the DOF count")
        if len(self.labels) != n:
            raise SystemConfigError("One label per DOF is required")
        try:
            linalg.cholesky(self.M, lower=True)
        except linalg.LinAlgError as e:
            raise SystemConfigError(f"Mass matrix is not positive definite: {e}") from e
        k_min = np.linalg.eigvalsh(self.K).min()
        if k_min < -1e-9 * max(np.abs(self.K).max(), 1.0):
            raise SystemConfigError(f"Stiffness matrix is indefinite (min eigenvalue {k_min:.3e})")


@dataclass
class ExcitationSpec:
    """Stochastic (or harmonic) excitation description"""
    kind: str = 'band_limited_noise'
    channels: int = 1
    band: Tuple[float, float] = (0.5, 10.0)
    psd: Dict = field(default_factory=lambda: {'S0': 1.0, 'omega_g': 15.0, 'zeta_g': 0.6})
    harmonic: Dict = field(default_factory=lambda: {'amplitude': 1.0, 'frequency': 1.0, 'phase': 0.0})
    envelope: Dict = field(default_factory=lambda: {'kind': 'none'})
    representation: str = 'random_phase'
    mapping_seed: int = 0

    KINDS = ('band_limited_noise', 'kanai_tajimi', 'harmonic')
    REPRESENTATIONS = ('random_phase', 'random_function')

    @classmethod
    def from_config(cls, cfg: Dict) -> "ExcitationSpec":
        return cls(
            kind=cfg.get('kind', 'band_limited_noise'),
            channels=int(cfg.get('channels', 1)),
            band=tuple(cfg.get('band', (0.5, 10.0))),
            psd=dict(cfg.get('psd', {})),
            harmonic=dict(cfg.get('harmonic', {})),
            envelope=dict(cfg.get('envelope', {'kind': 'none'})),
            representation=cfg.get('representation', 'random_phase'),
            mapping_seed=int(cfg.get('mapping_seed', 0)),
        )

    @property
    def is_stochastic(self) -> bool:
        return self.kind != 'harmonic'

    @property
    def n_random(self) -> int:
        """
        Number of elementary random variables driving the excitation

        The random-function representation ties all phases of a channel to
        one variable theta, so each channel adds one dimension. Independent
        per-bin phases are not reducible and report zero.
        """
        if self.is_stochastic and self.representation == 'random_function':
            return self.channels
        return 0

    def validate(self, dt: float):
        """Check the spectrum against the sampling interval"""
        if self.kind not in self.KINDS:
            raise SystemConfigError(f"Unknown excitation kind '{self.kind}'")
        if self.representation not in self.REPRESENTATIONS:
            raise SystemConfigError(f"Unknown excitation representation '{self.representation}'")
        if self.channels < 1:
            raise SystemConfigError("Excitation needs at least one channel")
        nyquist = 1.0 / (2.0 * dt)
        if self.kind == 'harmonic':
            if self.harmonic.get('frequency', 0.0) >= nyquist:
                raise SystemConfigError("Harmonic frequency exceeds the Nyquist frequency")
            return
        f_lo, f_hi = self.band
        if not 0 <= f_lo < f_hi:
            raise SystemConfigError(f"Invalid band [{f_lo}, {f_hi}]")
        if f_hi >= nyquist:
            raise SystemConfigError(f"Band upper edge {f_hi} Hz exceeds Nyquist {nyquist} Hz")
        if self.psd.get('S0', 0.0) < 0:
            raise SystemConfigError("PSD intensity must be nonnegative")

    def one_sided_psd(self, freqs: np.ndarray) -> np.ndarray:
        """Target one-sided PSD (units^2/Hz) at frequencies in Hz"""
        S0 = float(self.psd.get('S0', 1.0))
        f_lo, f_hi = self.band
        in_band = (freqs >= f_lo) & (freqs <= f_hi)
        if self.kind == 'band_limited_noise':
            S = np.full_like(freqs, S0, dtype=float)
        else:
            w = 2.0 * np.pi * freqs
            wg = float(self.psd.get('omega_g', 15.0))
            zg = float(self.psd.get('zeta_g', 0.6))
            num = wg ** 4 + (2.0 * zg * wg * w) ** 2
            den = (wg ** 2 - w ** 2) ** 2 + (2.0 * zg * wg * w) ** 2
            S = S0 * num / den
        return np.where(in_band, S, 0.0)

    def envelope_values(self, t: np.ndarray) -> np.ndarray:
        """Time-modulating envelope (ones when disabled)"""
        if self.envelope.get('kind', 'none') == 'none':
            return np.ones_like(t)
        rise = float(self.envelope.get('rise', 1.0))
        hold = float(self.envelope.get('hold', 2.0))
        decay = float(self.envelope.get('decay', 1.0))
        e = np.zeros_like(t)
        up = t < rise
        e[up] = t[up] / rise if rise > 0 else 1.0
        flat = (t >= rise) & (t < rise + hold)
        e[flat] = 1.0
        down = (t >= rise + hold) & (t < rise + hold + decay)
        e[down] = 1.0 - (t[down] - rise - hold) / decay
        return e


@dataclass
class ParameterSpec:
    """One physical parameter: uniform(lo, hi) or fixed value"""
    name: str
    dist: str = 'fixed'
    lo: float = 0.0
    hi: float = 0.0
    value: float = 0.0

    @classmethod
    def from_config(cls, cfg: Dict) -> "ParameterSpec":
        dist = cfg.get('dist', 'fixed')
        if dist == 'uniform':
            spec = cls(cfg['name'], 'uniform', float(cfg['lo']), float(cfg['hi']))
            if not spec.lo < spec.hi:
                raise SystemConfigError(f"Parameter '{spec.name}' needs lo < hi")
            return spec
        if dist == 'fixed':
            return cls(cfg['name'], 'fixed', value=float(cfg['value']))
        raise SystemConfigError(f"Unknown distribution '{dist}' for '{cfg.get('name')}'")

    @property
    def is_random(self) -> bool:
        return self.dist == 'uniform'

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF"""
        if self.is_random:
            return self.lo + np.asarray(u) * (self.hi - self.lo)
        return np.full(np.shape(u), self.value)


@dataclass
class ParameterSpace:
    """Physical parameter distributions, excitation description and time grid"""
    parameters: List[ParameterSpec]
    excitation: ExcitationSpec
    dt: float
    T: float

    @classmethod
    def from_config(cls, space_cfg: Dict, dataset_cfg: Dict) -> "ParameterSpace":
        params = [ParameterSpec.from_config(p) for p in space_cfg.get('parameters', [])]
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise SystemConfigError("Parameter names must be unique")
        space = cls(params, ExcitationSpec.from_config(space_cfg.get('excitation', {})),
                     float(dataset_cfg['dt']), float(dataset_cfg['T']))
        space.excitation.validate(space.dt)
        return space

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.parameters]

    @property
    def random_parameters(self) -> List[ParameterSpec]:
        return [p for p in self.parameters if p.is_random]

    @property
    def n_p(self) -> int:
        return len(self.parameters)

    @property
    def n_t(self) -> int:
        return int(round(self.T / self.dt)) + 1

    @property
    def dims(self) -> int:
        """Input dimension n_p + n_f per time step"""
        return self.n_p + self.excitation.channels

    def time_grid(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt


@dataclass
class ParameterSample:
    """Physical parameters p and excitation f (n_t x channels)"""
    p: np.ndarray
    f: np.ndarray
    dt: float
    seed: Optional[int] = None

    @property
    def n_t(self) -> int:
        return self.f.shape[0]


@dataclass
class ResidualField:
    """Per-step equation residuals (n_t x n_dof)"""
    values: np.ndarray

    def max_abs(self) -> np.ndarray:
        return np.abs(self.values).max(axis=0)


class SystemTemplate:
    """System configuration whose named elements can be overridden per sample"""

    BODY_FIELDS = ('m_r', 'length', 'EI', 'alpha', 'beta', 'total_mass', 'stiffness')

    def __init__(self, config: Dict, n_channels: Optional[int] = None):
        """
        Initialize template

        Args:
            config: The 'system' configuration section
            n_channels: Excitation channel count (inferred from loads when omitted)
        """
        self.config = copy.deepcopy(config)
        self.masses = self.config.get('masses', [])
        self.connections = self.config.get('connections', [])
        self.bodies = self.config.get('flexible_bodies', [])
        self.loads = self.config.get('loads', [])

        channels_used = [int(l.get('channel', 0)) for l in self.loads]
        self.n_channels = n_channels if n_channels is not None else (max(channels_used) + 1 if channels_used else 1)
        if any(c >= self.n_channels or c < 0 for c in channels_used):
            raise SystemConfigError(
                f"Loads reference channels {sorted(set(channels_used))} but only {self.n_channels} exist"
            )
        for c in range(self.n_channels):
            if c not in channels_used:
                logger.warning(f"Excitation channel {c} drives no DOF")

        self._layout()
        self.element_names = self._element_names()
        self.nominal = build_system(self.config, n_channels=self.n_channels)

    def _layout(self):
        labels: List[str] = []
        self.rigid_index: Dict[Tuple[str, str], int] = {}
        for mass in self.masses:
            for d in mass.get('directions', ['x']):
                self.rigid_index[(mass['name'], d)] = len(labels)
                labels.append(f"{mass['name']}.{d}")
        self.body_slices: Dict[str, slice] = {}
        for body in self.bodies:
            start = len(labels)
            for k in range(int(body['n_modes'])):
                labels.append(f"{body['name']}.q{k + 1}")
            self.body_slices[body['name']] = slice(start, len(labels))
        self.labels = labels

    def _element_names(self) -> List[str]:
        names = [m['name'] for m in self.masses]
        names += [c['name'] for c in self.connections if 'name' in c]
        for body in self.bodies:
            names += [f"{body['name']}.{k}" for k in self.BODY_FIELDS if k in body]
        return names

    @property
    def n_dof(self) -> int:
        return len(self.labels)

    def check_space(self, space: ParameterSpace):
        """Every parameter must name an overridable element"""
        unknown = [n for n in space.names if n not in self.element_names]
        if unknown:
            raise SystemConfigError(f"Parameters {unknown} do not name any system element")
        if space.excitation.channels != self.n_channels:
            raise SystemConfigError(
                f"Excitation has {space.excitation.channels} channels, loads expect {self.n_channels}"
            )

    def instantiate(self, names: List[str], p: np.ndarray) -> SecondOrderSystem:
        """
        Re-assemble the system for one parameter vector

        Args:
            names: Parameter names (element names of the template)
            p: Parameter values in the same order

        Returns:
            SecondOrderSystem for this configuration
        """
        overrides = dict(zip(names, np.asarray(p, dtype=float).tolist()))
        if not overrides:
            return self.nominal
        return build_system(self.config, overrides, n_channels=self.n_channels)

    def dof_index(self, label: str) -> int:
        if label not in self.labels:
            raise SystemConfigError(f"Unknown DOF label '{label}'")
        return self.labels.index(label)

    def body_config(self, name: str) -> Dict:
        for body in self.bodies:
            if body['name'] == name:
                return body
        raise SystemConfigError(f"Unknown flexible body '{name}'")


class SystemAssembler:
    """Assemble M, C, K and the load map from point masses, connections and reduced bodies"""

    def __init__(self, config: Dict, overrides: Optional[Dict[str, float]] = None,
                 n_channels: Optional[int] = None):
        self.config = config
        self.overrides = overrides or {}
        self.n_channels = n_channels

    def _value(self, element: Dict, key: str = 'value') -> float:
        name = element.get('name')
        if key == 'value' and name in self.overrides:
            return self.overrides[name]
        if name is not None and f"{name}.{key}" in self.overrides:
            return self.overrides[f"{name}.{key}"]
        return float(element[key])

    def assemble(self) -> SecondOrderSystem:
        masses = self.config.get('masses', [])
        bodies = self.config.get('flexible_bodies', [])
        connections = self.config.get('connections', [])
        loads = self.config.get('loads', [])

        labels: List[str] = []
        rigid: Dict[Tuple[str, str], int] = {}
        mass_values: List[float] = []
        for mass in masses:
            value = self._value(mass)
            if value <= 0:
                raise SystemConfigError(f"Mass '{mass['name']}' must be positive, got {value}")
            for d in mass.get('directions', ['x']):
                rigid[(mass['name'], d)] = len(labels)
                labels.append(f"{mass['name']}.{d}")
                mass_values.append(value)

        reduced: Dict[str, Tuple[slice, ReducedFlexibleBody, Dict]] = {}
        start = len(labels)
        for body in bodies:
            rb = self._reduce_body(body)
            reduced[body['name']] = (slice(start, start + rb.n_modes), rb, body)
            labels += [f"{body['name']}.q{k + 1}" for k in range(rb.n_modes)]
            start += rb.n_modes

        n = len(labels)
        if n == 0:
            raise SystemConfigError("System has no degrees of freedom")
        M = np.zeros((n, n))
        C = np.zeros((n, n))
        K = np.zeros((n, n))
        for i, m in enumerate(mass_values):
            M[i, i] = m
        for sl, rb, _ in reduced.values():
            bm, bc, bk = rb.modal_matrices()
            M[sl, sl] += bm
            C[sl, sl] += bc
            K[sl, sl] += bk

        def endpoint(ref: str, direction: str) -> np.ndarray:
            b = np.zeros(n)
            if ref == GROUND:
                return b
            if '@' in ref:
                body_name, where = ref.split('@', 1)
                if body_name not in reduced:
                    raise SystemConfigError(f"Connection references unknown body '{body_name}'")
                sl, rb, body = reduced[body_name]
                if body.get('direction', 'z') != direction:
                    raise SystemConfigError(f"Body '{body_name}' does not move in direction '{direction}'")
                b[sl] = self._shape_row(body, float(where))
                return b
            if (ref, direction) not in rigid:
                raise SystemConfigError(f"Connection references unknown DOF '{ref}.{direction}'")
            b[rigid[(ref, direction)]] = 1.0
            return b

        def directions_of(ref: str) -> Optional[set]:
            if ref == GROUND:
                return None
            if '@' in ref:
                body_name = ref.split('@', 1)[0]
                if body_name not in reduced:
                    raise SystemConfigError(f"Connection references unknown body '{body_name}'")
                return {reduced[body_name][2].get('direction', 'z')}
            dirs = {d for (name, d) in rigid if name == ref}
            if not dirs:
                raise SystemConfigError(f"Connection references unknown DOF '{ref}'")
            return dirs

        for conn in connections:
            kind = conn.get('type', 'spring')
            if kind not in ('spring', 'dashpot'):
                raise SystemConfigError(f"Unknown connection type '{kind}'")
            a, b_ref = conn['a'], conn.get('b', GROUND)
            value = self._value(conn)
            if value < 0:
                raise SystemConfigError(f"Connection '{conn.get('name', a)}' has negative value")
            if 'direction' in conn:
                dirs = [conn['direction']]
            else:
                da, db = directions_of(a), directions_of(b_ref)
                shared = da if db is None else (db if da is None else da & db)
                dirs = sorted(shared or [])
            if not dirs:
                raise SystemConfigError(f"Connection between '{a}' and '{b_ref}' shares no direction")
            target = K if kind == 'spring' else C
            for d in dirs:
                v = endpoint(a, d) - endpoint(b_ref, d)
                target += value * np.outer(v, v)

        channels = self.n_channels
        if channels is None:
            channels = max([int(l.get('channel', 0)) for l in loads], default=0) + 1
        B = np.zeros((n, channels))
        for load in loads:
            ch = int(load.get('channel', 0))
            if ch >= channels:
                raise SystemConfigError(f"Load channel {ch} exceeds the {channels} excitation channels")
            ref = load['at']
            dirs = [load['direction']] if 'direction' in load else sorted(directions_of(ref) or [])
            for d in dirs:
                B[:, ch] += float(load.get('scale', 1.0)) * endpoint(ref, d)

        system = SecondOrderSystem(M=M, C=C, K=K, force_map=B, labels=labels)
        system.validate()
        return system

    def _reduce_body(self, body: Dict) -> ReducedFlexibleBody:
        kind = body.get('kind', 'euler_beam')
        n_modes = int(body['n_modes'])
        alpha = self._value(body, 'alpha') if 'alpha' in body else 0.0
        beta = self._value(body, 'beta') if 'beta' in body else 0.0
        if alpha < 0 or beta < 0:
            raise SystemConfigError(f"Body '{body['name']}' needs nonnegative Rayleigh constants")

        if kind == 'euler_beam':
            Omega = euler_beam_frequencies(
                self._value(body, 'EI'), self._value(body, 'm_r'), self._value(body, 'length'), n_modes
            ) ** 2
            mu = np.ones(n_modes)
            return ReducedFlexibleBody(n_modes, mu, Omega, alpha * mu + beta * Omega, alpha, beta)

        if kind == 'lumped_chain':
            Mb, Kb = lumped_chain_matrices(
                int(body['n_nodes']), self._value(body, 'total_mass'),
                self._value(body, 'stiffness'), body.get('ends', 'fixed')
            )
            basis = solve_eigen(Mb, Kb, n_modes)
            effective_mass(basis, Mb, np.ones(Mb.shape[0]))
            return reduce(Mb, Kb, basis, alpha, beta)

        raise SystemConfigError(f"Unknown flexible body kind '{kind}'")

    def _shape_row(self, body: Dict, where: float) -> np.ndarray:
        """Mode-shape values of a body at one coupling point"""
        n_modes = int(body['n_modes'])
        if body.get('kind', 'euler_beam') == 'euler_beam':
            table = euler_beam_modes(self._value(body, 'm_r'), self._value(body, 'length'), n_modes, [where])
            return table.values[0]
        Mb, Kb = lumped_chain_matrices(
            int(body['n_nodes']), self._value(body, 'total_mass'),
            self._value(body, 'stiffness'), body.get('ends', 'fixed')
        )
        node = int(where)
        if not 0 <= node < Mb.shape[0]:
            raise SystemConfigError(f"Body '{body['name']}' has no node {node}")
        return solve_eigen(Mb, Kb, n_modes).U[node]


def build_system(config: Dict, overrides: Optional[Dict[str, float]] = None,
                 n_channels: Optional[int] = None) -> SecondOrderSystem:
    """
    Assemble a SecondOrderSystem from the 'system' configuration section

    Args:
        config: Masses, connections, flexible bodies and loads
        overrides: Element name -> value replacements (sampled parameters)
        n_channels: Excitation channel count

    Returns:
        Assembled, validated system
    """
    return SystemAssembler(config, overrides, n_channels).assemble()


def _harmonic_wave(spec: ExcitationSpec, t: np.ndarray) -> np.ndarray:
    h = spec.harmonic
    wave = float(h.get('amplitude', 1.0)) * np.sin(
        2.0 * np.pi * float(h.get('frequency', 1.0)) * t + float(h.get('phase', 0.0))
    )
    out = np.repeat(wave[:, None], spec.channels, axis=1)
    return out * spec.envelope_values(t)[:, None]


def _synthesize(spec: ExcitationSpec, dt: float, n_t: int, phases) -> np.ndarray:
    """Sum of cosines with target amplitudes; phases(ch, amplitude) gives the bin phases"""
    t = np.arange(n_t) * dt
    out = np.zeros((n_t, spec.channels))
    N = n_t - 1
    if N < 2:
        return out
    freqs = np.fft.rfftfreq(N, dt)
    S = spec.one_sided_psd(freqs)
    S[0] = 0.0
    if N % 2 == 0:
        S[-1] = 0.0
    amplitude = np.sqrt(2.0 * S / (N * dt))

    for ch in range(spec.channels):
        coeffs = 0.5 * N * amplitude * np.exp(1j * phases(ch, amplitude))
        x = np.fft.irfft(coeffs, n=N)
        out[:N, ch] = x
        out[N, ch] = x[0]
    return out * spec.envelope_values(t)[:, None]


def random_function_phases(theta: float, active: np.ndarray, mapping_seed: int = 0) -> np.ndarray:
    """
    Bin phases -(n_k*theta + pi/4) of the random-function representation

    The active bins take the indices n_k = 1..n_active in an order fixed by
    mapping_seed. cos(n*theta + pi/4) and sin(n*theta + pi/4), scaled by
    sqrt(2), are orthonormal over theta ~ U(-pi, pi) for distinct n >= 1,
    which gives the same second-order statistics as independent phases.
    The permutation keeps realizations from being time shifts of one waveform.

    Args:
        theta: Elementary random variable in [-pi, pi)
        active: Boolean mask of bins with nonzero amplitude
        mapping_seed: Seed of the bin-to-index permutation

    Returns:
        Phase per bin (zero on inactive bins)
    """
    idx = np.flatnonzero(active)
    order = np.random.default_rng(mapping_seed).permutation(idx.size) + 1
    phase = np.zeros(np.asarray(active).shape[0])
    phase[idx] = -(order * theta + 0.25 * np.pi)
    return phase


def excitation_from_unit(spec: ExcitationSpec, dt: float, T: float, unit: np.ndarray) -> np.ndarray:
    """
    Random-function excitation from one unit-cube coordinate per channel

    Args:
        spec: Excitation description (representation 'random_function')
        dt: Sampling interval (s)
        T: Record length (s)
        unit: Values in [0, 1), one per channel, mapped to theta = -pi + 2 pi u

    Returns:
        n_t x channels array
    """
    spec.validate(dt)
    n_t = int(round(T / dt)) + 1
    if not spec.is_stochastic:
        return _harmonic_wave(spec, np.arange(n_t) * dt)
    if spec.representation != 'random_function':
        raise SystemConfigError("Unit-cube excitation needs the random_function representation")
    unit = np.asarray(unit, dtype=float).reshape(-1)
    if unit.shape[0] != spec.channels:
        raise ShapeMismatchError(f"Expected {spec.channels} excitation coordinates, got {unit.shape[0]}")
    theta = -np.pi + 2.0 * np.pi * unit
    mapping_seed = int(spec.mapping_seed)
    return _synthesize(spec, dt, n_t,
                       lambda ch, amplitude: random_function_phases(theta[ch], amplitude > 0, mapping_seed))


def generate_excitation(spec: ExcitationSpec, dt: float, T: float, seed: int) -> np.ndarray:
    """
    Spectral-representation synthesis

    The random_phase representation draws one independent phase per bin;
    random_function draws a single theta per channel and derives every
    bin phase from it.

    Args:
        spec: Excitation description
        dt: Sampling interval (s)
        T: Record length (s)
        seed: Random seed

    Returns:
        n_t x channels array with n_t = round(T/dt) + 1
    """
    spec.validate(dt)
    n_t = int(round(T / dt)) + 1

    if not spec.is_stochastic:
        return _harmonic_wave(spec, np.arange(n_t) * dt)

    rng = np.random.default_rng(seed)
    if spec.representation == 'random_function':
        return excitation_from_unit(spec, dt, T, rng.uniform(0.0, 1.0, size=spec.channels))
    return _synthesize(spec, dt, n_t, lambda ch, amplitude: rng.uniform(0.0, 2.0 * np.pi, size=amplitude.size))


def sample_parameters(space: ParameterSpace, seed: int) -> ParameterSample:
    """
    Draw one parameter configuration

    Args:
        space: Parameter space (distributions, excitation, time grid)
        seed: Master seed for this sample

    Returns:
        ParameterSample, identical for identical seeds
    """
    param_seq, excitation_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(param_seq)
    p = np.array([
        rng.uniform(spec.lo, spec.hi) if spec.is_random else spec.value
        for spec in space.parameters
    ], dtype=float)
    f = generate_excitation(space.excitation, space.dt, space.T,
                            int(excitation_seq.generate_state(1)[0]))
    return ParameterSample(p=p, f=f, dt=space.dt, seed=seed)


def residual(system: SecondOrderSystem, sample: ParameterSample,
             u: np.ndarray, du: np.ndarray, ddu: np.ndarray) -> ResidualField:
    """
    Equation residual per time step

    Args:
        system: System instantiated with the sample's parameters
        sample: Parameter sample providing f
        u, du, ddu: n_t x n_dof solution and time derivatives

    Returns:
        ResidualField with values = M ddu + C du + K u - B f
    """
    shape = (sample.n_t, system.n_dof)
    for name, arr in (('u', u), ('du', du), ('ddu', ddu)):
        if np.shape(arr) != shape:
            raise ShapeMismatchError(f"{name} has shape {np.shape(arr)}, expected {shape}")
    if sample.f.shape[1] != system.n_channels:
        raise ShapeMismatchError(
            f"Excitation has {sample.f.shape[1]} channels, system expects {system.n_channels}"
        )
    values = ddu @ system.M.T + du @ system.C.T + u @ system.K.T - sample.f @ system.force_map.T
    return ResidualField(values)


def export_excitation_csv(sample: ParameterSample, path: str):
    """Write the excitation as CSV with time and channel columns"""
    df = pd.DataFrame({'time': np.arange(sample.n_t) * sample.dt})
    for ch in range(sample.f.shape[1]):
        df[f"channel_{ch}"] = sample.f[:, ch]
    df.to_csv(path, index=False, float_format='%.17g')

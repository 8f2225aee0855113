#!/usr/bin/env python3
"""
Operator Model
Fourier-spectral neural operator over the time axis: lifting, spectral
blocks with a pointwise path and a fully connected head per time step
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

ACTIVATIONS = ('gelu', 'identity')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass
class Architecture:
    """Model dimensions"""
    n_in: int
    n_out: int
    n_t: int
    width: int = 36
    depth_spectral: int = 3
    k_modes: int = 16
    depth_fc: int = 2
    fc_width: int = 64
    activation: str = 'gelu'
    dtype: str = 'float32'

    @classmethod
    def from_config(cls, cfg: Dict, n_p: int, n_channels: int, n_out: int, n_t: int) -> "Architecture":
        """Input channels are p (broadcast), f channels and one time coordinate"""
        arch = cls(
            n_in=n_p + n_channels + 1, n_out=n_out, n_t=n_t,
            width=int(cfg['width']), depth_spectral=int(cfg['depth_spectral']),
            k_modes=int(cfg['k_modes']), depth_fc=int(cfg['depth_fc']),
            fc_width=int(cfg['fc_width']), activation=cfg.get('activation', 'gelu'),
            dtype=cfg.get('dtype', 'float32'),
        )
        arch.validate()
        return arch

    def validate(self):
        if min(self.n_in, self.n_out, self.width, self.k_modes, self.depth_fc, self.fc_width) < 1:
            raise ValueError("Architecture dimensions must be positive")
        if self.depth_spectral < 0:
            raise ValueError("depth_spectral must be nonnegative")
        if self.k_modes > self.n_t // 2 + 1:
            raise ValueError(f"k_modes={self.k_modes} exceeds {self.n_t // 2 + 1} frequency bins")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}'")
        if self.dtype not in DTYPES:
            raise ValueError(f"Unknown dtype '{self.dtype}'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def parameter_count(arch: Architecture) -> int:
    """
    Closed-form trainable parameter count

    lifting (n_in+1)w, each spectral block 2w^2k + w^2 + w, head
    (w+1)h + (d_f-2)(h+1)h + (h+1)n_out for d_f >= 2, (w+1)n_out for d_f = 1
    """
    w, k, h = arch.width, arch.k_modes, arch.fc_width
    total = (arch.n_in + 1) * w
    total += arch.depth_spectral * (2 * w * w * k + w * w + w)
    if arch.depth_fc == 1:
        total += (w + 1) * arch.n_out
    else:
        total += (w + 1) * h + (arch.depth_fc - 2) * (h + 1) * h + (h + 1) * arch.n_out
    return total


class SpectralConv1d(nn.Module):
    """Complex weights on the lowest k_modes bins, stored as real pairs"""

    def __init__(self, width: int, k_modes: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.width = width
        self.k_modes = k_modes
        self.weight = nn.Parameter(torch.zeros(width, width, k_modes, 2, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spectral_conv(self, x)


def spectral_conv(layer: SpectralConv1d, x: torch.Tensor) -> torch.Tensor:
    """
    Spectral convolution along time

    Args:
        layer: SpectralConv1d holding the complex weights
        x: (..., n_t, w) real tensor

    Returns:
        (..., n_t, w) tensor: rfft, per-bin w x w complex product on the
        retained bins, zero elsewhere, inverse transform
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    n_t = x.shape[-2]
    if x.shape[-1] != layer.width:
        raise ValueError(f"Input has {x.shape[-1]} channels, layer expects {layer.width}")
    if layer.k_modes > n_t // 2 + 1:
        raise ValueError(f"Grid of {n_t} steps cannot hold {layer.k_modes} modes")

    x_ft = torch.fft.rfft(x.transpose(-1, -2), dim=-1)
    weights = torch.view_as_complex(layer.weight.contiguous())
    out_ft = torch.zeros(x.shape[0], layer.width, n_t // 2 + 1, dtype=x_ft.dtype, device=x.device)
    out_ft[..., :layer.k_modes] = torch.einsum("bix,iox->box", x_ft[..., :layer.k_modes], weights)
    out = torch.fft.irfft(out_ft, n=n_t, dim=-1).transpose(-1, -2)
    return out.squeeze(0) if squeeze else out


class OperatorModel(nn.Module):
    """Lifting, spectral blocks and a per-time-step fully connected head"""

    def __init__(self, arch: Architecture):
        super().__init__()
        arch.validate()
        self.arch = arch
        dtype = arch.torch_dtype
        w = arch.width

        self.lifting = nn.Linear(arch.n_in, w, dtype=dtype)
        self.spectral = nn.ModuleList(
            [SpectralConv1d(w, arch.k_modes, dtype) for _ in range(arch.depth_spectral)]
        )
        self.pointwise = nn.ModuleList(
            [nn.Linear(w, w, dtype=dtype) for _ in range(arch.depth_spectral)]
        )
        if arch.depth_fc == 1:
            dims = [w, arch.n_out]
        else:
            dims = [w] + [arch.fc_width] * (arch.depth_fc - 1) + [arch.n_out]
        self.head = nn.ModuleList(
            [nn.Linear(dims[i], dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)]
        )
        self.act = nn.GELU() if arch.activation == 'gelu' else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """
        Map encoded inputs to normalized solutions

        Args:
            x: (B, n_t, n_in) encoded (p, f, time) inputs

        Returns:
            (B, n_t, n_out) normalized solution
        """
        if x.shape[-1] != self.arch.n_in or x.shape[-2] != self.arch.n_t:
            raise ValueError(
                f"Input shape {tuple(x.shape)} does not match (B, {self.arch.n_t}, {self.arch.n_in})"
            )
        h = self.lifting(x)
        for spec, point in zip(self.spectral, self.pointwise):
            h = self.act(spec(h) + point(h))
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = self.act(h)
        return h

    def shared_parameters(self):
        """Parameters whose gradient norms drive loss balancing"""
        if len(self.spectral):
            return [self.spectral[-1].weight]
        return [self.lifting.weight]


def encode_inputs(p: np.ndarray, f: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    Broadcast p over time and append f channels and a [0, 1] time coordinate

    Args:
        p: (B, n_p) normalized parameters
        f: (B, n_t, n_ch) normalized excitations

    Returns:
        (B, n_t, n_p + n_ch + 1) tensor
    """
    p = np.asarray(p, dtype=float)
    f = np.asarray(f, dtype=float)
    if p.shape[0] != f.shape[0]:
        raise ValueError("Parameter and excitation batches differ in size")
    n_b, n_t = f.shape[0], f.shape[1]
    t = np.broadcast_to(np.linspace(0.0, 1.0, n_t)[None, :, None], (n_b, n_t, 1))
    p_rep = np.broadcast_to(p[:, None, :], (n_b, n_t, p.shape[1]))
    return torch.as_tensor(np.concatenate([p_rep, f, t], axis=2), dtype=dtype)


def init_model(arch: Architecture, seed: int) -> OperatorModel:
    """
    Deterministic initialization

    Args:
        arch: Model dimensions
        seed: Seed for the parameter draws

    Returns:
        OperatorModel with spectral weights scaled by 1/(w*w) and affine
        layers drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    """
    model = OperatorModel(arch)
    gen = torch.Generator().manual_seed(int(seed))
    dtype = arch.torch_dtype
    scale = 1.0 / (arch.width * arch.width)
    with torch.no_grad():
        for layer in model.spectral:
            layer.weight.copy_(scale * torch.rand(layer.weight.shape, generator=gen, dtype=dtype))
        for layer in [model.lifting, *model.pointwise, *model.head]:
            bound = 1.0 / np.sqrt(layer.in_features)
            for param in (layer.weight, layer.bias):
                param.copy_((2.0 * torch.rand(param.shape, generator=gen, dtype=dtype) - 1.0) * bound)
    logger.info(f"Initialized operator model with {parameter_count(arch)} parameters (seed {seed})")
    return model


def flatten_parameters(model: nn.Module) -> np.ndarray:
    """All parameters in state-dict order as one float64 vector"""
    return np.concatenate([
        p.detach().cpu().numpy().astype(np.float64).ravel() for p in model.state_dict().values()
    ])


def save_checkpoint(model: OperatorModel, directory: str, meta: Optional[Dict] = None) -> str:
    """
    Write manifest.json and params.bin (little-endian float64, state-dict order)

    Args:
        model: Model to persist
        directory: Target directory
        meta: Extra manifest entries (stats hash, config, epoch)

    Returns:
        Path of the manifest
    """
    os.makedirs(directory, exist_ok=True)
    data = flatten_parameters(model).astype('<f8').tobytes()
    with open(os.path.join(directory, 'params.bin'), 'wb') as f:
        f.write(data)
    manifest = {
        'architecture': asdict(model.arch),
        'layout': [[name, list(t.shape)] for name, t in model.state_dict().items()],
        'parameter_count': parameter_count(model.arch),
        'sha256': hashlib.sha256(data).hexdigest(),
    }
    manifest.update(meta or {})
    path = os.path.join(directory, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint to {directory}")
    return path


def load_checkpoint(directory: str) -> Tuple[OperatorModel, Dict]:
    """Rebuild a model from save_checkpoint output"""
    path = os.path.join(directory, 'manifest.json')
    if not os.path.exists(path):
        raise FileNotFoundError(f"No checkpoint in {directory}")
    with open(path, 'r') as f:
        manifest = json.load(f)
    with open(os.path.join(directory, 'params.bin'), 'rb') as f:
        data = f.read()
    if hashlib.sha256(data).hexdigest() != manifest['sha256']:
        raise ValueError(f"Checksum mismatch for checkpoint in {directory}")

    model = OperatorModel(Architecture(**manifest['architecture']))
    flat = np.frombuffer(data, dtype='<f8')
    state, offset = {}, 0
    for name, shape in manifest['layout']:
        size = int(np.prod(shape))
        state[name] = torch.as_tensor(flat[offset:offset + size].reshape(shape),
                                      dtype=model.arch.torch_dtype)
        offset += size
    if offset != flat.size:
        raise ValueError("Checkpoint blob size does not match its layout")
    model.load_state_dict(state)
    return model, manifest

"""Thresholded SDR / inactive SDR losses and SDR-family metrics.

Functions accept numpy arrays or torch tensors; the last axis is time. The
torch path keeps gradients, the numpy path returns plain floats (or arrays
for batched input).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SDR_CAP_DB = 80.0


@dataclass(frozen=True)
class LossConfig:
    eta: float = 30.0
    tau_inactive: float = 1e-2

    @property
    def tau(self) -> float:
        return 10.0 ** (-self.eta / 10.0)


DEFAULT = LossConfig()


def _lib(x):
    return torch if isinstance(x, torch.Tensor) else np


def _energy(x):
    if isinstance(x, torch.Tensor):
        return x.pow(2).sum(-1)
    return np.sum(np.square(np.asarray(x, dtype=np.float64)), axis=-1)


def _out(v):
    if isinstance(v, torch.Tensor):
        return v
    return float(v) if np.ndim(v) == 0 else v


def loss_active(x, x_hat, cfg: LossConfig = DEFAULT):
    """SDR with a soft ceiling of ``eta`` dB (higher is better)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    lib = _lib(x)
    ex = _energy(x)
    if bool(lib.any(ex <= 0)):
        raise ValueError("loss_active needs a non-zero target; route silent targets to loss_inactive")
    err = _energy(x - x_hat)
    return _out(10.0 * lib.log10(ex / (err + cfg.tau * ex)))


def loss_inactive(y, x_hat, cfg: LossConfig = DEFAULT):
    """Output energy floored at ``tau_inactive`` times mixture energy, in dB (lower is better)."""
    if y.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(x_hat.shape)}")
    lib = _lib(y)
    return _out(10.0 * lib.log10(_energy(x_hat) + cfg.tau_inactive * _energy(y)))


def isdr_floor(y, cfg: LossConfig = DEFAULT) -> float:
    return float(10.0 * np.log10(cfg.tau_inactive * _energy(np.asarray(y))))


def sdr(x, x_hat, cap: float = SDR_CAP_DB) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    ex = _energy(x)
    if ex <= 0:
        raise ValueError("SDR reference is all zeros")
    err = _energy(x - x_hat)
    if err <= ex * 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(ex / err))


def sdri(x, x_hat, y, cap: float = SDR_CAP_DB) -> float:
    return sdr(x, x_hat, cap) - sdr(x, y, cap)


def si_sdr(x, x_hat, cap: float = SDR_CAP_DB) -> float:
    """Scale-invariant SDR; offline diagnostic only."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    ex = _energy(x)
    if ex <= 0:
        raise ValueError("SI-SDR reference is all zeros")
    proj = np.dot(x_hat, x) / ex * x
    noise = _energy(x_hat - proj)
    if noise <= _energy(proj) * 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(_energy(proj) / noise))


def training_loss(x, x_hat, y, presence, cfg: LossConfig = DEFAULT):
    """Mean over the batch of ``-loss_active`` (presence rows) and ``loss_inactive`` (absence rows)."""
    presence = torch.as_tensor(presence, dtype=torch.bool, device=x_hat.device)
    per_row = torch.zeros(x_hat.shape[0], dtype=x_hat.dtype, device=x_hat.device)
    if presence.any():
        per_row[presence] = -loss_active(x[presence], x_hat[presence], cfg)
    if (~presence).any():
        per_row[~presence] = loss_inactive(y[~presence], x_hat[~presence], cfg)
    return per_row.mean(), per_row

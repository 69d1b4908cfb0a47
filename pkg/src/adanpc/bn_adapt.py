"""Single batch-normalization layer retrained at test time by entropy descent.

Only the affine parameters (gamma, beta) receive gradients; running statistics
are updated from data. The entropy being minimized is that of the KNN vote
over the normalized feature, with the neighbor sets held fixed during each
gradient step because the search itself is not differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifier import predict
from .core_math import entropy
from .errors import DimMismatch
from .memory_bank import MemoryBank


@dataclass(frozen=True)
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 1-D array")
        if self.gamma.shape != self.beta.shape or self.gamma.shape != self.running_mean.shape:
            raise DimMismatch("BN parameter shapes disagree")
        if self.running_mean.shape != self.running_var.shape:
            raise DimMismatch("BN statistic shapes disagree")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")
        if not (0.0 < self.momentum <= 1.0):
            raise ValueError("momentum must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, dim: int, momentum: float = 0.1) -> "BnLayer":
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
        )


def _affine(layer: BnLayer, x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return (x - mean) / np.sqrt(var + layer.eps) * layer.gamma + layer.beta


def bn_forward(layer: BnLayer, x, mode: str = "eval") -> tuple[np.ndarray, BnLayer]:
    """Normalize ``x``; returns (output, possibly-updated layer).

    eval: running statistics, no state change. train with a batch: batch
    statistics, running stats nudged by momentum. train with a single sample:
    streaming update of the running stats, then normalization by the updated
    values (there is no batch to take statistics from).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != layer.dim:
        raise DimMismatch(f"input shape {np.shape(x)} incompatible with dim {layer.dim}")

    if mode == "eval":
        out = _affine(layer, arr, layer.running_mean, layer.running_var)
        return (out[0] if squeeze else out), layer

    m = layer.momentum
    if arr.shape[0] == 1:
        xs = arr[0]
        new_mean = (1.0 - m) * layer.running_mean + m * xs
        new_var = (1.0 - m) * layer.running_var + m * (xs - new_mean) ** 2
        updated = replace(layer, running_mean=new_mean, running_var=new_var)
        out = _affine(updated, arr, new_mean, new_var)
        return (out[0] if squeeze else out), updated

    batch_mean = arr.mean(axis=0)
    batch_var = arr.var(axis=0)
    updated = replace(
        layer,
        running_mean=(1.0 - m) * layer.running_mean + m * batch_mean,
        running_var=(1.0 - m) * layer.running_var + m * batch_var,
    )
    out = _affine(layer, arr, batch_mean, batch_var)
    return (out[0] if squeeze else out), updated


def _entropy_and_grad(layer: BnLayer, bank: MemoryBank, xhat: np.ndarray, k: int):
    """Mean vote entropy over normalized inputs plus its (gamma, beta) gradient.

    xhat rows are the stat-normalized inputs; the affine output z = gamma*xhat
    + beta is the search query. Neighbor sets are looked up here and treated
    as constants in the gradient.
    """
    n = xhat.shape[0]
    d_gamma = np.zeros(layer.dim)
    d_beta = np.zeros(layer.dim)
    total_h = 0.0
    for i in range(n):
        z = layer.gamma * xhat[i] + layer.beta
        pred = predict(bank, z, k)
        p = pred.probs
        h = entropy(p)
        total_h += h
        # dH/ds_c with the p log p limit handled at p = 0
        logp = np.log(np.where(p > 0, p, 1.0))
        ds = np.where(p > 0, -p * (logp + h), 0.0)
        znorm = np.linalg.norm(z)
        zhat = z / znorm
        dz = np.zeros(layer.dim)
        for entry_id, sim in pred.neighbors:
            m_j = bank.entry(entry_id).feature
            dz += ds[bank.label_of(entry_id)] * (m_j - sim * zhat) / znorm
        d_gamma += dz * xhat[i]
        d_beta += dz
    return total_h / n, d_gamma / n, d_beta / n


def bn_entropy_step(
    layer: BnLayer, bank: MemoryBank, queries, k: int, lr: float
) -> tuple[BnLayer, float, float]:
    """One entropy-descent update of (gamma, beta).

    Queries are pre-normalization features; running statistics are read, never
    written (feed data through bn_forward in train mode to update them).
    Returns (updated layer, mean entropy before, mean entropy after), the
    after value computed with freshly searched neighbor sets.
    """
    arr = np.asarray(queries, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != layer.dim:
        raise DimMismatch(f"queries shape {np.shape(queries)} incompatible with dim {layer.dim}")
    xhat = (arr - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)

    before, d_gamma, d_beta = _entropy_and_grad(layer, bank, xhat, k)
    updated = replace(
        layer, gamma=layer.gamma - lr * d_gamma, beta=layer.beta - lr * d_beta
    )
    after = 0.0
    for i in range(xhat.shape[0]):
        z = updated.gamma * xhat[i] + updated.beta
        after += entropy(predict(bank, z, k).probs)
    return updated, before, after / xhat.shape[0]

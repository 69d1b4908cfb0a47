"""Deterministic numeric primitives: similarity, softmax, entropy, constants.

Everything here is pure and operates on plain numpy arrays at float64.
"""

import math

import numpy as np

from .errors import DimMismatch, EmptyInput, ZeroNorm

NORM_FLOOR = 1e-30


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array and reject non-finite entries."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains NaN or Inf")
    return v


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimMismatch(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNorm("cosine undefined for (near-)zero vectors")
    sim = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, sim))


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax; output sums to 1."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("softmax of empty score sequence")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores contain NaN or Inf")
    e = np.exp(s - np.max(s))
    return e / np.sum(e)


def entropy(p) -> float:
    """Shannon entropy -sum p ln p in nats, with 0 ln 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def unit_ball_volume(d: int) -> float:
    """Volume of the d-dimensional Euclidean unit ball, pi^(d/2) / Gamma(d/2 + 1)."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)

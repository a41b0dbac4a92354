"""Importance-weighted quadratic anchor on the effective weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .lora import LoraAdapter, effective_weight

__all__ = [
    "LayerWeightVector",
    "RegLossBreakdown",
    "layer_reg_loss",
    "layer_reg_grad",
    "layer_weights",
    "uniform_weights",
    "reg_breakdown",
    "penalty_factor_grads",
    "total_loss",
]


@dataclass(frozen=True)
class LayerWeightVector:
    layer_ids: tuple[str, ...]
    weights: tuple[float, ...]

    def __getitem__(self, layer_id: str) -> float:
        return self.weights[self.layer_ids.index(layer_id)]

    def items(self):
        return zip(self.layer_ids, self.weights)

    def as_dict(self) -> dict[str, float]:
        return dict(self.items())


@dataclass(frozen=True)
class RegLossBreakdown:
    per_layer: dict[str, float]
    weights: LayerWeightVector
    reg_loss: float
    phi: float

    @property
    def contribution(self) -> float:
        return self.phi * self.reg_loss


def _check_omega(Omega: np.ndarray) -> None:
    if np.any(Omega < 0):
        raise ValueError("Omega has negative entries; importance must be consolidated (clamped) first")


def layer_reg_loss(theta_current: np.ndarray, theta_ref: np.ndarray, Omega: np.ndarray) -> float:
    """``sum(Omega * (theta - theta_ref)**2)``."""
    if not (theta_current.shape == theta_ref.shape == Omega.shape):
        raise ValueError(f"shape mismatch: {theta_current.shape}, {theta_ref.shape}, {Omega.shape}")
    _check_omega(Omega)
    d = theta_current - theta_ref
    return float(np.sum(Omega * d * d))


def layer_reg_grad(theta_current: np.ndarray, theta_ref: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    return 2.0 * Omega * (theta_current - theta_ref)


def layer_weights(norms: Mapping[str, float] | Sequence[tuple[str, float]]) -> LayerWeightVector:
    """Softmax over per-layer importance norms, in the given (canonical) order."""
    items = list(norms.items()) if isinstance(norms, Mapping) else list(norms)
    if not items:
        raise ValueError("no layers to weight")
    ids = tuple(k for k, _ in items)
    x = np.array([v for _, v in items], dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("layer norms must be nonnegative")
    e = np.exp(x - x.max())
    return LayerWeightVector(ids, tuple(float(v) for v in e / e.sum()))


def uniform_weights(layer_ids: Sequence[str]) -> LayerWeightVector:
    if not layer_ids:
        raise ValueError("no layers to weight")
    n = len(layer_ids)
    return LayerWeightVector(tuple(layer_ids), (1.0 / n,) * n)


def reg_breakdown(
    current: Mapping[str, np.ndarray],
    anchors: Mapping[str, np.ndarray],
    importance: Mapping[str, np.ndarray],
    weights: LayerWeightVector,
    phi: float,
) -> RegLossBreakdown:
    """Per-layer penalties and their weighted sum for the current effective weights."""
    if phi < 0:
        raise ValueError("phi must be nonnegative")
    per_layer = {lid: layer_reg_loss(current[lid], anchors[lid], importance[lid]) for lid in weights.layer_ids}
    total = float(np.dot(weights.weights, [per_layer[lid] for lid in weights.layer_ids]))
    return RegLossBreakdown(per_layer, weights, total, float(phi))


def penalty_factor_grads(
    adapter: LoraAdapter, theta_ref: np.ndarray, Omega: np.ndarray, coeff: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``coeff * layer_reg_loss`` with respect to ``B`` and ``A``.

    With ``theta = theta0 + s B A``: dB = s G A^T, dA = s B^T G.
    """
    G = coeff * layer_reg_grad(effective_weight(adapter), theta_ref, Omega)
    s = adapter.scale
    return s * (G @ adapter.A.T), s * (adapter.B.T @ G)


def total_loss(task_loss: float, breakdown: RegLossBreakdown) -> float:
    return task_loss + breakdown.phi * breakdown.reg_loss

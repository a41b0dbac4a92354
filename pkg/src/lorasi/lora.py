"""Low-rank adapters on a frozen base matrix.

All quantities that live in full-weight space (effective weight, step delta,
virtual gradient) include the scale ``s``, so that

    delta_theta(before, sgd_step(before, gB, gA, eta)) == -eta * virtual_gradient(...)

holds exactly. With ``s == 1`` these reduce to the plain ``theta0 + B @ A``
parameterisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

__all__ = [
    "ScalingMode",
    "LoraAdapter",
    "lora_init",
    "scale_factor",
    "effective_weight",
    "sgd_step",
    "virtual_gradient",
    "delta_theta",
]


class ScalingMode(str, Enum):
    STANDARD = "standard"  # alpha / r
    RANK_STABILIZED = "rank_stabilized"  # alpha / sqrt(r)


def scale_factor(alpha: float, rank: int, mode: ScalingMode | str) -> float:
    mode = ScalingMode(mode)
    if mode is ScalingMode.STANDARD:
        return alpha / rank
    return alpha / math.sqrt(rank)


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    theta0: np.ndarray
    B: np.ndarray
    A: np.ndarray
    alpha: float
    scaling_mode: ScalingMode = ScalingMode.STANDARD
    layer_id: str = ""

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return scale_factor(self.alpha, self.rank, self.scaling_mode)

    @property
    def shape(self) -> tuple[int, int]:
        return self.theta0.shape

    def delta(self) -> np.ndarray:
        """The scaled low-rank update ``s * B @ A``."""
        return self.scale * (self.B @ self.A)

    def with_factors(self, B: np.ndarray, A: np.ndarray) -> "LoraAdapter":
        return replace(self, B=B, A=A)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.alpha == other.alpha
            and self.scaling_mode == other.scaling_mode
            and np.array_equal(self.theta0, other.theta0)
            and np.array_equal(self.B, other.B)
            and np.array_equal(self.A, other.A)
        )


def lora_init(
    d_out: int,
    d_in: int,
    r: int,
    alpha: float,
    scaling_mode: ScalingMode | str = ScalingMode.STANDARD,
    seed: int | np.random.Generator = 0,
    theta0: np.ndarray | None = None,
    layer_id: str = "",
) -> LoraAdapter:
    """Zero ``B`` and Gaussian ``A`` (std ``1/sqrt(r)``), so the initial delta is exactly zero."""
    if d_out < 1 or d_in < 1:
        raise ValueError(f"dimensions must be positive, got {d_out}x{d_in}")
    if r < 1 or r > min(d_out, d_in):
        raise ValueError(f"rank {r} outside [1, {min(d_out, d_in)}] for a {d_out}x{d_in} layer")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if theta0 is None:
        theta0 = np.zeros((d_out, d_in))
    theta0 = np.array(theta0, dtype=np.float64)
    if theta0.shape != (d_out, d_in):
        raise ValueError(f"theta0 has shape {theta0.shape}, expected {(d_out, d_in)}")
    theta0.setflags(write=False)
    A = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, d_in))
    return LoraAdapter(theta0, np.zeros((d_out, r)), A, float(alpha), ScalingMode(scaling_mode), layer_id)


def effective_weight(adapter: LoraAdapter) -> np.ndarray:
    return adapter.theta0 + adapter.delta()


def sgd_step(adapter: LoraAdapter, gB: np.ndarray, gA: np.ndarray, eta: float) -> LoraAdapter:
    if gB.shape != adapter.B.shape or gA.shape != adapter.A.shape:
        raise ValueError(
            f"gradient shapes {gB.shape}, {gA.shape} do not match B {adapter.B.shape}, A {adapter.A.shape}"
        )
    if eta <= 0:
        raise ValueError("eta must be positive")
    return adapter.with_factors(adapter.B - eta * gB, adapter.A - eta * gA)


def virtual_gradient(adapter: LoraAdapter, gB: np.ndarray, gA: np.ndarray, eta: float) -> np.ndarray:
    """Full-weight gradient that reproduces one SGD step on the factors.

    ``s * (gB @ A + B @ gA - eta * gB @ gA)``, evaluated at the pre-step factors.
    """
    B, A = adapter.B, adapter.A
    return adapter.scale * (gB @ A + B @ gA - eta * (gB @ gA))


def delta_theta(before: LoraAdapter, after: LoraAdapter) -> np.ndarray:
    if before.shape != after.shape or not np.array_equal(before.theta0, after.theta0):
        raise ValueError(
            f"adapters {before.layer_id!r} and {after.layer_id!r} do not share a base weight"
        )
    if before.scale != after.scale:
        raise ValueError("adapters use different scale factors")
    return before.scale * (after.B @ after.A - before.B @ before.A)

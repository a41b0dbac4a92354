"""Per-element importance from the path integral of the loss gradient.

While the general task trains, every step adds ``-g * dtheta`` (elementwise)
to a running ``omega`` per adapted layer. At the end of the task ``omega`` is
normalised by the squared total excursion plus damping and folded into the
consolidated importance ``Omega``; the end-of-task weights become the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ImportanceError", "LayerImportance", "ImportanceState"]


class ImportanceError(RuntimeError):
    pass


@dataclass
class LayerImportance:
    omega: np.ndarray
    Omega: np.ndarray
    theta_ref: np.ndarray
    theta_start: np.ndarray
    delta_total: np.ndarray
    omega_is_live: bool = False

    def copy(self) -> "LayerImportance":
        return LayerImportance(
            self.omega.copy(),
            self.Omega.copy(),
            self.theta_ref.copy(),
            self.theta_start.copy(),
            self.delta_total.copy(),
            self.omega_is_live,
        )


@dataclass
class ImportanceState:
    layers: dict[str, LayerImportance] = field(default_factory=dict)
    tasks_consolidated: int = 0

    @classmethod
    def for_weights(cls, weights: dict[str, np.ndarray]) -> "ImportanceState":
        """Empty state (Omega = 0, anchor = current weights), not yet live."""
        layers = {}
        for lid, w in weights.items():
            z = np.zeros_like(w, dtype=np.float64)
            layers[lid] = LayerImportance(z.copy(), z.copy(), w.copy(), w.copy(), z.copy())
        return cls(layers)

    @property
    def live(self) -> bool:
        return any(l.omega_is_live for l in self.layers.values())

    @property
    def consolidated(self) -> bool:
        return self.tasks_consolidated > 0 and not self.live

    def layer_ids(self) -> tuple[str, ...]:
        return tuple(self.layers)

    def begin_task(self, weights: dict[str, np.ndarray]) -> None:
        """Zero omega and record the start-of-task weights."""
        for lid, layer in self.layers.items():
            layer.omega = np.zeros_like(layer.omega)
            layer.theta_start = np.array(weights[lid], dtype=np.float64)
            layer.omega_is_live = True

    def accumulate(self, layer_id: str, virtual_grad: np.ndarray, delta_theta: np.ndarray) -> None:
        layer = self.layers[layer_id]
        if not layer.omega_is_live:
            raise ImportanceError(f"{layer_id}: accumulate outside a live task (call begin_task first)")
        if virtual_grad.shape != layer.omega.shape or delta_theta.shape != layer.omega.shape:
            raise ValueError(
                f"{layer_id}: shapes {virtual_grad.shape}/{delta_theta.shape} vs omega {layer.omega.shape}"
            )
        layer.omega -= virtual_grad * delta_theta

    def consolidate(self, weights: dict[str, np.ndarray], xi: float) -> None:
        """Fold the running contributions into Omega and re-anchor.

        Negative contributions (possible with adaptive optimisers) are clamped
        to zero so that Omega stays a valid penalty weight.
        """
        if xi <= 0:
            raise ValueError("xi must be positive")
        if not self.live:
            raise ImportanceError("consolidate called without a live task")
        for lid, layer in self.layers.items():
            w = np.array(weights[lid], dtype=np.float64)
            layer.delta_total = w - layer.theta_start
            layer.Omega = layer.Omega + np.maximum(layer.omega, 0.0) / (layer.delta_total**2 + xi)
            layer.theta_ref = w
            layer.omega = np.zeros_like(layer.omega)
            layer.omega_is_live = False
        self.tasks_consolidated += 1

    def layer_l2_norms(self) -> dict[str, float]:
        """Frobenius norm of each layer's Omega."""
        return {lid: float(np.linalg.norm(l.Omega)) for lid, l in self.layers.items()}

    def snapshot(self) -> "ImportanceState":
        return ImportanceState({k: v.copy() for k, v in self.layers.items()}, self.tasks_consolidated)

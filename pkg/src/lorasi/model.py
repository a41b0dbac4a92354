"""Small causal sequence model with LoRA on the query and value projections.

Architecture (pre-norm, no biases, all base weights frozen)::

    x = tok_emb[ids] + pos_emb[pos]
    for each block:
        h = LN(x)
        x = x + softmax(h Wq^T (h Wk^T)^T + mask) (h Wv^T)
        h = LN(x)
        x = x + ((h W1^T) * (h W2^T)) W3^T
    logits = LN(x) head^T

``Wq`` and ``Wv`` are ``theta0 + s * B @ A``; only ``B`` and ``A`` train. A
batch is packed into one flat sequence of rows, with a block-diagonal causal
mask keeping examples apart.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .lora import LoraAdapter, ScalingMode, effective_weight, lora_init
from .tasks import CONTEXT_LEN, Example
from .tensor import Graph, Tensor

__all__ = ["ModelConfig", "ToyModel", "StepGrads", "ADAPTED"]

ADAPTED = ("q_proj", "v_proj")
_MASKED = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_blocks: int = 4
    d_ff: int = 64
    context_len: int = CONTEXT_LEN
    rank: int = 8
    alpha: float = 32.0
    scaling_mode: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size > 256 or self.d_model > 128 or self.n_blocks > 4:
            raise ValueError("desk-scale limits: vocab <= 256, width <= 128, blocks <= 4")
        if self.context_len > CONTEXT_LEN:
            raise ValueError(f"context length above {CONTEXT_LEN}")


@dataclass
class StepGrads:
    """Gradients of one batch loss for one adapted layer."""

    gB: np.ndarray
    gA: np.ndarray
    full: np.ndarray  # dL/d(effective weight)


class ToyModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x5EED]))
        d = c.d_model

        def frozen(*shape, std):
            w = rng.normal(0.0, std, size=shape)
            w.setflags(write=False)
            return w

        self.frozen: dict[str, np.ndarray] = {
            "tok_emb": frozen(c.vocab_size, d, std=1.0),
            "pos_emb": frozen(c.context_len, d, std=1.0),
            "head": frozen(c.vocab_size, d, std=1.0 / math.sqrt(d)),
        }
        self.adapters: dict[str, LoraAdapter] = {}
        for b in range(c.n_blocks):
            self.frozen[f"block{b}.k_proj"] = frozen(d, d, std=1.0 / d)  # 1/sqrt(d) attention scale folded in
            self.frozen[f"block{b}.ffn_in"] = frozen(c.d_ff, d, std=1.0 / math.sqrt(d))
            self.frozen[f"block{b}.ffn_gate"] = frozen(c.d_ff, d, std=1.0 / math.sqrt(d))
            self.frozen[f"block{b}.ffn_out"] = frozen(d, c.d_ff, std=1.0 / c.d_ff)
            for name in ADAPTED:
                lid = f"block{b}.{name}"
                theta0 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
                self.adapters[lid] = lora_init(
                    d, d, c.rank, c.alpha, c.scaling_mode, seed=rng, theta0=theta0, layer_id=lid
                )
        self.layer_ids: tuple[str, ...] = tuple(self.adapters)

    # -- state -----------------------------------------------------------

    def copy(self) -> "ToyModel":
        other = copy.copy(self)
        other.adapters = dict(self.adapters)
        return other

    def arch(self) -> dict:
        return asdict(self.config)

    def effective_weights(self) -> dict[str, np.ndarray]:
        return {lid: effective_weight(a) for lid, a in self.adapters.items()}

    def theta0_digest(self, layer_id: str) -> str:
        return hashlib.sha256(self.adapters[layer_id].theta0.tobytes()).hexdigest()

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.frozen):
            h.update(k.encode())
            h.update(self.frozen[k].tobytes())
        return h.hexdigest()

    def reset_adapters(self) -> None:
        """Fresh factors (B = 0) on the same base weights."""
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0xADA]))
        for lid, a in self.adapters.items():
            self.adapters[lid] = lora_init(
                *a.shape, c.rank, c.alpha, a.scaling_mode, seed=rng, theta0=a.theta0, layer_id=lid
            )

    # -- forward ---------------------------------------------------------

    @staticmethod
    def _pack(batch: Sequence[Example]):
        ids, pos, tgt, seg = [], [], [], []
        for k, ex in enumerate(batch):
            n = len(ex.inputs)
            ids.extend(ex.inputs)
            tgt.extend(ex.targets)
            pos.extend(range(n))
            seg.extend([k] * n)
        seg = np.asarray(seg)
        rows = np.arange(len(seg))
        allowed = (seg[:, None] == seg[None, :]) & (rows[None, :] <= rows[:, None])
        mask = np.where(allowed, 0.0, _MASKED)
        return ids, pos, np.asarray(tgt), mask

    def forward(self, batch: Sequence[Example]):
        """Build the graph for one batch.

        Returns ``(graph, loss, logits, weights, factors)`` where ``weights`` maps
        layer id to the effective-weight tensor and ``factors`` to ``(B, A)``.
        """
        if not batch:
            raise ValueError("empty batch")
        ids, pos, targets, mask = self._pack(batch)
        g = Graph()
        F = {k: Tensor(v, name=k) for k, v in self.frozen.items()}
        weights, factors = {}, {}
        for lid, a in self.adapters.items():
            B = Tensor(a.B, requires_grad=True, name=f"{lid}.B")
            A = Tensor(a.A, requires_grad=True, name=f"{lid}.A")
            delta = g.scale(g.matmul(B, A), a.scale)
            weights[lid] = g.add(Tensor(a.theta0), delta, name=lid)
            factors[lid] = (B, A)
        mask_t = Tensor(mask)
        x = g.add(g.embedding(F["tok_emb"], ids), g.embedding(F["pos_emb"], pos))
        for b in range(self.config.n_blocks):
            p = f"block{b}."
            h = g.layer_norm(x)
            q = g.matmul(h, weights[p + "q_proj"], transpose_b=True)
            k = g.matmul(h, F[p + "k_proj"], transpose_b=True)
            v = g.matmul(h, weights[p + "v_proj"], transpose_b=True)
            att = g.softmax(g.add(g.matmul(q, k, transpose_b=True), mask_t))
            x = g.add(x, g.matmul(att, v))
            h = g.layer_norm(x)
            u = g.matmul(h, F[p + "ffn_in"], transpose_b=True)
            gate = g.matmul(h, F[p + "ffn_gate"], transpose_b=True)
            x = g.add(x, g.matmul(g.mul(u, gate), F[p + "ffn_out"], transpose_b=True))
        logits = g.matmul(g.layer_norm(x), F["head"], transpose_b=True)
        loss = g.cross_entropy(logits, targets)
        return g, loss, logits, weights, factors

    def loss_and_grads(self, batch: Sequence[Example]) -> tuple[float, dict[str, StepGrads]]:
        g, loss, _, weights, factors = self.forward(batch)
        g.backward(loss)
        grads = {
            lid: StepGrads(factors[lid][0].grad, factors[lid][1].grad, weights[lid].grad)
            for lid in self.layer_ids
        }
        return loss.item(), grads

    def logits(self, batch: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
        """Logits and packed targets, no backward pass."""
        _, _, logits, _, _ = self.forward(batch)
        _, _, targets, _ = self._pack(batch)
        return logits.value, targets

"""Two-phase continual fine-tuning: a general task, then a domain task.

Strategies
----------
``ours``        record importance on the general task, then train the domain task
                with the importance-weighted anchor penalty and softmax layer weights
``lora_mu``     domain task only, fresh adapters
``lora_nu_mu``  general then domain task, no penalty
``rslora``      as ``lora_nu_mu`` with the alpha/sqrt(r) scale
``ewc_lora``    general then domain task, penalty weighted by a diagonal Fisher
                estimate taken after the general task, uniform layer weights

The anchor penalty is evaluated (and logged) whenever an anchor exists, but it
only enters the objective for ``ours`` and ``ewc_lora``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .importance import ImportanceState
from .lora import LoraAdapter, delta_theta, sgd_step, virtual_gradient
from .model import ModelConfig, ToyModel
from .regularizer import (
    LayerWeightVector,
    RegLossBreakdown,
    layer_weights,
    penalty_factor_grads,
    reg_breakdown,
    uniform_weights,
)
from .tasks import Example, TaskPair, TaskSpec, batches, gen_task_pair

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "TrainingError",
    "StepRow",
    "EvalRow",
    "RunReport",
    "PhaseResult",
    "Penalty",
    "Adam",
    "Trainer",
    "evaluate",
    "ewc_fisher_diag",
    "train_nu",
    "train_mu",
    "run_experiment",
]

STRATEGIES = ("ours", "lora_mu", "lora_nu_mu", "rslora", "ewc_lora")
PENALIZED = ("ours", "ewc_lora")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 8e-4
    phi: float = math.exp(-3)
    xi: float = 1e-3
    rank: int = 8
    alpha: float = 32.0
    scaling_mode: str = "standard"
    batch_size: int = 20
    epochs_nu: int = 5
    epochs_mu: int = 5
    seed: int = 0
    strategy: str = "ours"
    optimizer_mode: str = "adaptive"
    # desk-scale model and data
    d_model: int = 32
    n_blocks: int = 4
    d_ff: int = 64
    task: str = "grammar-shift"
    task_seed: int = 0
    ewc_samples: int = 200
    exact_check_every: int = 100

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.xi > 0:
            raise ValueError("xi must be > 0")
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.optimizer_mode not in ("sgd_exact", "adaptive"):
            raise ValueError(f"unknown optimizer_mode {self.optimizer_mode!r}")
        if self.epochs_nu < 0 or self.epochs_mu < 0:
            raise ValueError("epoch counts must be >= 0")

    @property
    def effective_scaling_mode(self) -> str:
        return "rank_stabilized" if self.strategy == "rslora" else self.scaling_mode

    @property
    def effective_phi(self) -> float:
        return self.phi if self.strategy in PENALIZED else 0.0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            d_ff=self.d_ff,
            rank=self.rank,
            alpha=self.alpha,
            scaling_mode=self.effective_scaling_mode,
            seed=self.seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        types = {f.name: f.type for f in fields(cls)}
        clean = {}
        for k, v in d.items():
            want = types[k]
            try:
                if want == "float" and not isinstance(v, bool):
                    v = float(v)
                elif want == "int" and not isinstance(v, bool) and float(v) == int(v):
                    v = int(v)
            except (TypeError, ValueError):
                pass
            ok = {"float": float, "int": int, "str": str}[want]
            if not isinstance(v, ok) or isinstance(v, bool):
                raise ValueError(f"config key {k!r}: expected {want}, got {v!r}")
            clean[k] = v
        return cls(**clean)

    def to_dict(self) -> dict:
        return asdict(self)


class StepRow(NamedTuple):
    step: int
    phase: str
    task_loss: float
    reg_loss: float
    weighted_total: float


class EvalRow(NamedTuple):
    phase: str
    epoch: int
    split: str
    ce: float
    ppl: float
    acc: float


@dataclass
class RunReport:
    steps: list[StepRow] = field(default_factory=list)
    evals: list[EvalRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


@dataclass
class PhaseResult:
    model: ToyModel
    importance: ImportanceState | None
    losses: list[StepRow]
    evals: list[EvalRow]


@dataclass
class Penalty:
    """Anchored quadratic penalty for the domain phase."""

    anchors: dict[str, np.ndarray]
    importance: dict[str, np.ndarray]
    weights: LayerWeightVector
    phi: float  # coefficient that enters the objective (0 when only monitored)

    def breakdown(self, current: dict[str, np.ndarray]) -> RegLossBreakdown:
        return reg_breakdown(current, self.anchors, self.importance, self.weights, self.phi)


class Adam:
    """Per-factor Adam; the learning rate is the config's ``eta``."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        b1, b2 = self.beta1, self.beta2
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        else:
            v = self.v[key]
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - b1**self.t)
        v_hat = v / (1 - b2**self.t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, adapter: LoraAdapter, gB, gA, lr: float) -> LoraAdapter:
        lid = adapter.layer_id
        return adapter.with_factors(
            self.update(lid + ".B", adapter.B, gB, lr), self.update(lid + ".A", adapter.A, gA, lr)
        )

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls()
        opt.t = state["t"]
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        return opt


# -- evaluation ----------------------------------------------------------


def evaluate(model: ToyModel, data: Sequence[Example], chunk: int = 50) -> dict[str, float]:
    """Mean token cross-entropy, its perplexity, and accuracy.

    Accuracy is the choice-restricted argmax for multiple-choice examples and
    top-1 next-token accuracy otherwise.
    """
    if not data:
        raise ValueError("cannot evaluate on empty data")
    nll, n_tok, correct, n_acc = 0.0, 0, 0, 0
    for start in range(0, len(data), chunk):
        part = data[start : start + chunk]
        logits, targets = model.logits(part)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.flatnonzero(targets >= 0)
        nll -= logp[rows, targets[rows]].sum()
        n_tok += rows.size
        offset = 0
        for ex in part:
            n = len(ex.inputs)
            block = logits[offset : offset + n]
            if ex.choices:
                pos = max(i for i, t in enumerate(ex.targets) if t >= 0)
                scores = block[pos, list(ex.choices)]
                correct += int(np.argmax(scores) == ex.answer)
                n_acc += 1
            else:
                tgt = np.asarray(ex.targets)
                keep = tgt >= 0
                correct += int(np.sum(block[keep].argmax(axis=1) == tgt[keep]))
                n_acc += int(keep.sum())
            offset += n
    ce = nll / n_tok
    return {"ce_loss": float(ce), "perplexity": float(math.exp(ce)), "accuracy": correct / n_acc}


def ewc_fisher_diag(
    model: ToyModel, data: Sequence[Example], n_samples: int, seed: int
) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher in effective-weight space.

    Each sampled example contributes the square of ``s * (gB @ A + B @ gA)``,
    i.e. the first-order weight-space gradient seen through the factors.
    """
    if not data:
        raise ValueError("cannot estimate Fisher information from empty data")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF15]))
    picks = rng.choice(len(data), size=n_samples, replace=n_samples > len(data))
    fisher = {lid: np.zeros(a.shape) for lid, a in model.adapters.items()}
    for i in picks:
        _, grads = model.loss_and_grads([data[i]])
        for lid, a in model.adapters.items():
            g = grads[lid]
            gw = a.scale * (g.gB @ a.A + a.B @ g.gA)
            fisher[lid] += gw * gw
    return {lid: f / n_samples for lid, f in fisher.items()}


# -- training ------------------------------------------------------------


def _epoch_seed(seed: int, phase: str, epoch: int) -> int:
    tag = {"nu": 1, "mu": 2}[phase]
    return int(np.random.SeedSequence([seed, tag, epoch]).generate_state(1)[0])


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a)
    diff = np.linalg.norm(a - b)
    return float(diff / denom) if denom > 0 else float(diff)


def _within_rounding(before: LoraAdapter, after: LoraAdapter, residual: np.ndarray) -> bool:
    """True when the residual is at the rounding level of the two products.

    The weight change is a difference of ``B @ A`` products; once a step is
    tiny compared with them, its relative error is dominated by rounding.
    """
    size = before.scale * (
        np.linalg.norm(before.B) * np.linalg.norm(before.A) + np.linalg.norm(after.B) * np.linalg.norm(after.A)
    )
    return float(np.linalg.norm(residual)) <= 64 * np.finfo(np.float64).eps * size


class Trainer:
    """Resumable driver for one experiment.

    Progress is tracked as (phase, epoch, batch index); :meth:`run` can stop
    after a number of optimizer steps and be resumed later, possibly from a
    checkpoint, with identical results.
    """

    def __init__(self, config: TrainConfig, pair: TaskPair, model: ToyModel | None = None):
        self.config = config
        self.pair = pair
        self.model = model or ToyModel(config.model_config(len(pair.vocab)))
        self.importance = ImportanceState.for_weights(self.model.effective_weights())
        self.phases: tuple[str, ...] = ("mu",) if config.strategy == "lora_mu" else ("nu", "mu")
        self.phase_idx = 0
        self.epoch = 0
        self.batch_idx = 0
        self.step = 0
        self.started = False
        self.in_phase = False
        self.opt: Adam | None = None
        self.penalty: Penalty | None = None
        self.report = RunReport()
        self.timings = {"importance_s": 0.0}
        self.on_step: Callable[[StepRow], None] | None = None
        self.on_eval: Callable[[EvalRow], None] | None = None

    # -- helpers -----------------------------------------------------

    @property
    def phase(self) -> str:
        return self.phases[self.phase_idx] if self.phase_idx < len(self.phases) else "done"

    @property
    def done(self) -> bool:
        return self.phase == "done"

    def _data(self, phase: str) -> list[Example]:
        return self.pair.nu_train if phase == "nu" else self.pair.mu_train

    def _epochs(self, phase: str) -> int:
        return self.config.epochs_nu if phase == "nu" else self.config.epochs_mu

    def _eval(self, phase: str, epoch: int) -> None:
        for split, data in (("nu_eval", self.pair.nu_eval), ("mu_eval", self.pair.mu_eval)):
            if not data:
                continue
            m = evaluate(self.model, data)
            row = EvalRow(phase, epoch, split, m["ce_loss"], m["perplexity"], m["accuracy"])
            self.report.evals.append(row)
            if self.on_eval:
                self.on_eval(row)

    def _last_eval(self, split: str) -> EvalRow | None:
        return next((r for r in reversed(self.report.evals) if r.split == split), None)

    # -- phase boundaries ----------------------------------------------

    def _begin_phase(self) -> None:
        phase = self.phase
        self.in_phase = True
        self.opt = Adam() if self.config.optimizer_mode == "adaptive" else None
        if phase == "nu":
            self.importance.begin_task(self.model.effective_weights())
        else:
            before = self._last_eval("nu_eval")
            if before is not None:
                self.report.summary["nu_ce_before_mu"] = before.ce
            self.penalty = self._build_penalty()

    def _end_phase(self) -> None:
        if self.phase == "nu":
            t0 = time.perf_counter()
            self.importance.consolidate(self.model.effective_weights(), self.config.xi)
            self.timings["importance_s"] += time.perf_counter() - t0
            norms = self.importance.layer_l2_norms()
            self.report.summary["layer_norms"] = norms
            self.report.summary["layer_weights"] = layer_weights(norms).as_dict()
        self.phase_idx += 1
        self.epoch = 0
        self.batch_idx = 0
        self.in_phase = False
        self.opt = None

    def _build_penalty(self) -> Penalty | None:
        cfg = self.config
        if cfg.strategy == "ewc_lora":
            t0 = time.perf_counter()
            fisher = ewc_fisher_diag(self.model, self.pair.nu_train, cfg.ewc_samples, cfg.seed)
            self.timings["importance_s"] += time.perf_counter() - t0
            anchors = self.model.effective_weights()
            return Penalty(anchors, fisher, uniform_weights(self.model.layer_ids), cfg.effective_phi)
        if not self.importance.consolidated:
            return None
        layers = self.importance.layers
        return Penalty(
            {lid: l.theta_ref for lid, l in layers.items()},
            {lid: l.Omega for lid, l in layers.items()},
            layer_weights(self.importance.layer_l2_norms()),
            cfg.effective_phi,
        )

    # -- one optimizer step ------------------------------------------

    def _train_step(self, batch: list[Example]) -> StepRow:
        cfg = self.config
        phase = self.phase
        try:
            task_loss, grads = self.model.loss_and_grads(batch)
        except FloatingPointError as e:
            raise TrainingError(f"{phase} step {self.step}: {e}") from e
        if not math.isfinite(task_loss):
            raise TrainingError(f"{phase} step {self.step}: non-finite loss {task_loss}")

        reg = 0.0
        phi = 0.0
        gB = {lid: g.gB for lid, g in grads.items()}
        gA = {lid: g.gA for lid, g in grads.items()}
        if phase == "mu" and self.penalty is not None:
            pen = self.penalty
            bd = pen.breakdown(self.model.effective_weights())
            reg, phi = bd.reg_loss, pen.phi
            if phi > 0:
                for lid, w in pen.weights.items():
                    pB, pA = penalty_factor_grads(
                        self.model.adapters[lid], pen.anchors[lid], pen.importance[lid], phi * w
                    )
                    gB[lid] = gB[lid] + pB
                    gA[lid] = gA[lid] + pA

        if self.opt is not None:
            self.opt.t += 1
        check = cfg.optimizer_mode == "sgd_exact" and self.step % cfg.exact_check_every == 0
        record = phase == "nu"
        for lid in self.model.layer_ids:
            before = self.model.adapters[lid]
            if self.opt is None:
                after = sgd_step(before, gB[lid], gA[lid], cfg.eta)
            else:
                after = self.opt.step(before, gB[lid], gA[lid], cfg.eta)
            self.model.adapters[lid] = after
            if record or check:
                t0 = time.perf_counter()
                vg = virtual_gradient(before, gB[lid], gA[lid], cfg.eta)
                dth = delta_theta(before, after)
                if record:
                    self.importance.accumulate(lid, vg, dth)
                self.timings["importance_s"] += time.perf_counter() - t0
                if check:
                    err = _rel_err(dth, -cfg.eta * vg)
                    if err > 1e-12 and not _within_rounding(before, after, dth + cfg.eta * vg):
                        raise TrainingError(
                            f"{phase} step {self.step}, {lid}: step identity violated (rel err {err:.3e})"
                        )

        row = StepRow(self.step, phase, task_loss, reg, task_loss + phi * reg)
        self.step += 1
        return row

    # -- main loop ---------------------------------------------------

    def run(self, max_steps: int | None = None) -> RunReport:
        """Advance training; stop after ``max_steps`` optimizer steps if given."""
        taken = 0
        if not self.started:
            self._eval("init", 0)
            self.started = True
        while not self.done:
            phase = self.phase
            if not self.in_phase:
                self._begin_phase()
            data = self._data(phase)
            while self.epoch < self._epochs(phase):
                order = list(batches(data, self.config.batch_size, _epoch_seed(self.config.seed, phase, self.epoch)))
                while self.batch_idx < len(order):
                    if max_steps is not None and taken >= max_steps:
                        return self.report
                    row = self._train_step(order[self.batch_idx])
                    self.batch_idx += 1
                    taken += 1
                    self.report.steps.append(row)
                    if self.on_step:
                        self.on_step(row)
                self.batch_idx = 0
                self.epoch += 1
                self._eval(phase, self.epoch)
            self._end_phase()
        self._finish()
        return self.report

    def _finish(self) -> None:
        s = self.report.summary
        norms = self.importance.layer_l2_norms()
        s.setdefault("layer_norms", norms)
        s.setdefault("layer_weights", layer_weights(norms).as_dict())
        nu_after, mu_after = self._last_eval("nu_eval"), self._last_eval("mu_eval")
        if "mu" not in self.phases or "forgetting" in s:
            return
        if nu_after is not None:
            s.setdefault("nu_ce_before_mu", self.report.evals[0].ce)
            s["nu_ce_after_mu"] = nu_after.ce
            s["forgetting"] = nu_after.ce - s["nu_ce_before_mu"]
            s["nu_ppl_after_mu"] = nu_after.ppl
        if mu_after is not None:
            s["mu_accuracy"] = mu_after.acc
            s["mu_ce"] = mu_after.ce


# -- functional entry points --------------------------------------------


def _inline_pair(nu_train=(), nu_eval=(), mu_train=(), mu_eval=()) -> TaskPair:
    return TaskPair(list(nu_train), list(nu_eval), list(mu_train), list(mu_eval), None, TaskSpec("inline"))


def _phase_result(t: Trainer) -> PhaseResult:
    return PhaseResult(t.model.copy(), t.importance.snapshot(), t.report.steps, t.report.evals)


def train_nu(
    model: ToyModel, data_nu: Sequence[Example], config: TrainConfig, eval_nu: Sequence[Example] | None = None
) -> PhaseResult:
    """General-task phase alone: train, record importance, consolidate.

    ``model`` is trained in place; the result holds a snapshot of it and the
    consolidated importance.
    """
    if not data_nu and config.epochs_nu:
        raise ValueError("no general-task data")
    t = Trainer(config, _inline_pair(nu_train=data_nu, nu_eval=eval_nu or ()), model=model)
    t.phases = ("nu",)
    t.run()
    return _phase_result(t)


def train_mu(
    model: ToyModel,
    data_mu: Sequence[Example],
    importance: ImportanceState | None,
    config: TrainConfig,
    eval_nu: Sequence[Example] | None = None,
    fisher_data: Sequence[Example] | None = None,
) -> PhaseResult:
    """Domain-task phase alone, penalised according to the config's strategy.

    ``fisher_data`` (general-task examples) is required for ``ewc_lora``.
    """
    if config.strategy == "ours" and (importance is None or not importance.consolidated):
        raise TrainingError("strategy 'ours' needs consolidated importance; finish the general task first")
    if config.strategy == "ewc_lora" and not fisher_data:
        raise ValueError("strategy 'ewc_lora' needs general-task data for the Fisher estimate")
    pair = _inline_pair(nu_train=fisher_data or (), nu_eval=eval_nu or (), mu_train=data_mu)
    t = Trainer(config, pair, model=model)
    if importance is not None:
        t.importance = importance.snapshot()
    t.phases = ("mu",)
    t.run()
    return _phase_result(t)


def run_experiment(config: TrainConfig, task_pair: TaskPair | None = None, **hooks) -> RunReport:
    """Run the strategy's phases on ``task_pair`` (generated from the config if omitted)."""
    pair = task_pair or gen_task_pair(config.task, seed=config.task_seed)
    trainer = Trainer(config, pair)
    trainer.on_step = hooks.get("on_step")
    trainer.on_eval = hooks.get("on_eval")
    return trainer.run()

"""Inner residual boosting and the outer continual domain loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Batch, BatchSampler, Sample, batches
from .errors import TrainingInstabilityError
from .model import BaseModel, lm_loss
from .moe_lora import MoEConfig, aux_loss
from .nullspace import Projector, collect_deltas, projectors_from_deltas
from .optim import AdamW, CosineSchedule

log = logging.getLogger(__name__)

NOT_TRAINED = "not_yet_trained"


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class InnerConfig:
    max_rounds: int = 2
    steps_per_round: int = 150
    eval_interval: int = 25
    min_loss_delta: float = 0.002
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 42

    def __post_init__(self):
        if self.min_loss_delta <= 0:
            raise ValueError("min_loss_delta must be positive")
        if self.max_rounds < 1 or self.steps_per_round < 0 or self.eval_interval < 1 or self.batch_size < 1:
            raise ValueError("max_rounds, eval_interval and batch_size must be >= 1; steps_per_round >= 0")


@dataclass(frozen=True)
class BestStackConfig:
    spike_threshold: float = 0.1
    patience: int = 4

    def __post_init__(self):
        if self.spike_threshold <= 0:
            raise ValueError("spike_threshold must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class DomainSpec:
    name: str
    train: list[Sample]
    val: list[Sample]
    max_rounds: int | None = None
    position: int = 0

    def __post_init__(self):
        if not self.val:
            raise ValueError(f"domain {self.name!r} has an empty validation set")


def check_curriculum(domains: list[DomainSpec]) -> None:
    pos = [d.position for d in domains]
    if any(b <= a for a, b in zip(pos, pos[1:])):
        raise ValueError(f"curriculum positions must be strictly increasing, got {pos}")
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ValueError("duplicate domain names in curriculum")


# ---------------------------------------------------------------------------
# best-stack callback
# ---------------------------------------------------------------------------


class BestStackCallback:
    """Tracks the best validation loss of the active stack within a round.

    ``on_eval`` returns one of ``snapshot``, ``restore_and_stop``,
    ``plateau_stop`` or ``continue``.  Restoring copies the snapshot back into
    the live parameters.
    """

    def __init__(self, cfg: BestStackConfig, params: list | None = None):
        self.cfg = cfg
        self.params = params or []
        self.best_loss = math.inf
        self.best_step = -1
        self.bad_evals = 0
        self._snapshot: list[np.ndarray] | None = None

    def on_eval(self, val_loss: float, step: int = 0) -> str:
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.best_step = step
            self.bad_evals = 0
            self._snapshot = [p.data.copy() for p in self.params]
            return "snapshot"
        if val_loss > self.best_loss + self.cfg.spike_threshold:
            self.restore()
            return "restore_and_stop"
        self.bad_evals += 1
        if self.bad_evals >= self.cfg.patience:
            self.restore()
            return "plateau_stop"
        return "continue"

    def restore(self) -> None:
        if self._snapshot is None:
            return
        for p, snap in zip(self.params, self._snapshot):
            p.data = snap.copy()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def gating_weights(model: BaseModel, gating) -> dict[str, float]:
    """Translate a gating spec into per-domain weights.

    ``gating`` is ``"ungated"``, ``"base"``, ``("isolated", d)``, or
    ``("routed", {domain: weight})``.
    """
    domains = model.frozen_domains()
    if gating == "ungated":
        return {}
    if gating == "base":
        return {d: 0.0 for d in domains}
    kind, arg = gating
    if kind == "isolated":
        if arg not in domains:
            raise ValueError(f"unknown gating domain {arg!r}; trained domains are {domains}")
        return {d: (1.0 if d == arg else 0.0) for d in domains}
    if kind == "routed":
        unknown = set(arg) - set(domains)
        if unknown:
            raise ValueError(f"unknown gating domains {sorted(unknown)}")
        return {d: float(arg.get(d, 0.0)) for d in domains}
    raise ValueError(f"unknown gating mode {gating!r}")


def mean_loss(model: BaseModel, val_batches: list[Batch]) -> float:
    """Token-weighted mean cross-entropy over batches, eval mode."""
    total, count = 0.0, 0
    with ad.no_grad():
        for b in val_batches:
            loss, _ = lm_loss(model, b, mode="eval")
            n = b.n_scored
            total += float(loss.data) * n
            count += n
    return total / count


def evaluate(model: BaseModel, val_batches: list[Batch], gating="ungated") -> float:
    """Deterministic val loss under a gating mode; restores prior weights."""
    saved = model.domain_weights()
    model.set_domain_weights(gating_weights(model, gating))
    try:
        return mean_loss(model, val_batches)
    finally:
        model.set_domain_weights(saved)


def per_sample_losses(model: BaseModel, samples: list[Sample], weights: dict[str, float], batch_size: int = 32) -> np.ndarray:
    """Mean answer-token loss of each sample under fixed domain weights."""
    saved = model.domain_weights()
    model.set_domain_weights(weights)
    out = []
    try:
        with ad.no_grad():
            for b in batches(samples, batch_size, model.cfg.max_seq_len):
                res = model.forward(b.tokens, mode="eval", token_mask=b.valid)
                logits = res.logits.data.astype(np.float64)
                m = logits.max(axis=-1, keepdims=True)
                lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
                tgt = np.take_along_axis(logits, b.targets[..., None], axis=-1)[..., 0]
                nll = (lse - tgt) * b.loss_mask
                out.extend(nll.sum(axis=1) / b.loss_mask.sum(axis=1))
    finally:
        model.set_domain_weights(saved)
    return np.array(out)


# ---------------------------------------------------------------------------
# loss traces
# ---------------------------------------------------------------------------

TRACE_FIELDS = ("step", "split", "domain", "round", "task_loss", "aux_loss", "total")


@dataclass
class TraceRow:
    step: int
    split: str
    domain: str
    round: int
    task_loss: float
    aux_loss: float
    total: float


def write_trace_csv(rows: list[TraceRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in rows:
            w.writerow([r.step, r.split, r.domain, r.round, f"{r.task_loss:.8f}", f"{r.aux_loss:.8f}", f"{r.total:.8f}"])


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------


@dataclass
class StackTrainResult:
    best_loss: float
    stop_reason: str
    steps_run: int
    trace: list[TraceRow] = field(default_factory=list)


def active_parameters(model: BaseModel) -> list:
    out = []
    for layer in model.stacked_layers():
        if layer.active is None:
            raise ValueError(f"site {layer.site_id} has no active stack")
        out += layer.active.parameters()
    return out


def train_step_loss(model: BaseModel, batch: Batch, cfg: MoEConfig, rng) -> tuple[ad.Tensor, float, float]:
    """Task loss plus lambda_aux times the auxiliary loss summed over sites.

    Every site's router carries its own balance term, as in per-layer MoE
    balancing.
    """
    task, records = lm_loss(model, batch, mode="train", rng=rng)
    if not records or cfg.aux_coeff == 0.0:
        return task, float(task.data), 0.0
    aux = ad.add_n([aux_loss(r, cfg) for r in records])
    total = ad.add(task, ad.mul(aux, cfg.aux_coeff))
    return total, float(task.data), float(aux.data)


def train_stack(
    model: BaseModel,
    train: list[Sample],
    val_batches: list[Batch],
    inner: InnerConfig,
    best_cfg: BestStackConfig,
    moe_cfg: MoEConfig,
    seed: int,
    domain: str = "",
    round_index: int = 1,
) -> StackTrainResult:
    """Train the installed active stacks with best-snapshot semantics.

    The active stacks are evaluated before the first step, so the identity
    stack is the first snapshot and a round can never end worse than it began.
    """
    params = active_parameters(model)
    sched = CosineSchedule(inner.lr, max(inner.steps_per_round, 1), inner.lr * 0.1)
    opt = AdamW(params, lr=inner.lr, weight_decay=0.0, schedule=sched)
    sampler = BatchSampler(train, inner.batch_size, derive_seed(seed, 1), model.cfg.max_seq_len)
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, 2)))
    cb = BestStackCallback(best_cfg, params)
    trace: list[TraceRow] = []

    def do_eval(step: int) -> str:
        v = mean_loss(model, val_batches)
        trace.append(TraceRow(step, "val", domain, round_index, v, 0.0, v))
        return cb.on_eval(v, step)

    do_eval(0)
    reason = "completed"
    step = 0
    for step in range(1, inner.steps_per_round + 1):
        batch = sampler.next()
        opt.zero_grad()
        total, task_v, aux_v = train_step_loss(model, batch, moe_cfg, rng)
        if not np.isfinite(total.data):
            cb.restore()
            raise TrainingInstabilityError(f"non-finite loss at step {step} of {domain} round {round_index}", param_name="loss")
        total.backward()
        try:
            opt.step()
        except TrainingInstabilityError:
            cb.restore()
            raise
        trace.append(TraceRow(step, "train", domain, round_index, task_v, aux_v, float(total.data)))
        if step % inner.eval_interval == 0 or step == inner.steps_per_round:
            action = do_eval(step)
            if action in ("restore_and_stop", "plateau_stop"):
                reason = action
                break
    if reason == "completed":
        cb.restore()
    for p in params:
        p.grad = None
    return StackTrainResult(cb.best_loss, reason, step, trace)


@dataclass
class RoundRecord:
    round: int
    boost_loss: float
    val_loss: float
    improvement: float
    break_fired: bool
    stop_reason: str
    steps: int
    wall_seconds: float


@dataclass
class InnerResult:
    domain: str
    baseline_loss: float
    rounds: list[RoundRecord]
    trace: list[TraceRow]

    @property
    def final_isolated(self) -> float:
        return self.rounds[-1].val_loss


def inner_loop(
    model: BaseModel,
    spec: DomainSpec,
    inner: InnerConfig,
    best_cfg: BestStackConfig,
    moe_cfg: MoEConfig,
    domain_index: int = 0,
    on_freeze: Callable[[int], None] | None = None,
) -> InnerResult:
    """Residual boosting: add, train, eval, freeze; stop on diminishing returns."""
    val = batches(spec.val, 32, model.cfg.max_seq_len)
    prev = evaluate(model, val, "ungated")
    baseline = prev
    rounds: list[RoundRecord] = []
    trace: list[TraceRow] = []
    max_rounds = spec.max_rounds or inner.max_rounds
    for m in range(1, max_rounds + 1):
        t0 = time.perf_counter()
        seed = derive_seed(inner.seed, domain_index, m)
        for i, layer in enumerate(model.stacked_layers()):
            layer.add_active_stack(moe_cfg, derive_seed(seed, 100 + i))
        try:
            res = train_stack(model, spec.train, val, inner, best_cfg, moe_cfg, seed, spec.name, m)
        except TrainingInstabilityError:
            for layer in model.stacked_layers():
                layer.active = None
            raise
        trace += res.trace
        loss_m = evaluate(model, val, "ungated")
        for layer in model.stacked_layers():
            layer.freeze_active(spec.name, m)
        isolated = evaluate(model, val, ("isolated", spec.name))
        improvement = prev - loss_m
        fired = improvement < inner.min_loss_delta
        rounds.append(
            RoundRecord(m, loss_m, isolated, improvement, fired, res.stop_reason, res.steps_run, time.perf_counter() - t0)
        )
        log.info("%s round %d: boost %.4f isolated %.4f (improvement %.4f)", spec.name, m, loss_m, isolated, improvement)
        if on_freeze is not None:
            on_freeze(m)
        if fired:
            break
        prev = loss_m
    return InnerResult(spec.name, baseline, rounds, trace)


# ---------------------------------------------------------------------------
# forgetting matrices and the outer loop
# ---------------------------------------------------------------------------


@dataclass
class ForgettingMatrix:
    mode: str
    domains: list[str]
    rows: list[str] = field(default_factory=list)
    cells: list[list[float | None]] = field(default_factory=list)

    def add_row(self, after: str, values: dict[str, float]) -> None:
        self.rows.append(after)
        self.cells.append([values.get(d) for d in self.domains])

    def value(self, after: str, domain: str) -> float | None:
        return self.cells[self.rows.index(after)][self.domains.index(domain)]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rows": self.rows,
            "cols": self.domains,
            "cells": [[NOT_TRAINED if v is None else v for v in row] for row in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForgettingMatrix":
        cells = [[None if v == NOT_TRAINED else float(v) for v in row] for row in d["cells"]]
        return cls(d["mode"], list(d["cols"]), list(d["rows"]), cells)


@dataclass
class NullspaceConfig:
    enabled: bool = True
    k_per_domain: int = 8
    n_samples: int = 200
    oversample: int = 8
    power_iters: int = 2


@dataclass
class OuterResult:
    domains: list[InnerResult]
    forgetting: dict[str, ForgettingMatrix]
    projectors: dict[str, dict[str, Projector]]
    trace: list[TraceRow]


def build_projectors(
    model: BaseModel, prior: list[DomainSpec], ns: NullspaceConfig, seed: int, max_len: int = 64
) -> dict[str, Projector]:
    val = [b for spec in prior for b in batches(spec.val, 32, max_len)]
    deltas = collect_deltas(model, val, ns.n_samples, seed=seed, source_domains=[s.name for s in prior])
    return projectors_from_deltas(deltas, ns.k_per_domain * len(prior), seed, ns.oversample, ns.power_iters)


def install_projectors(model: BaseModel, projectors: dict[str, Projector] | None) -> None:
    for layer in model.stacked_layers():
        layer.install_projector(None if projectors is None else projectors.get(layer.site_id))


def forgetting_row(model: BaseModel, trained: list[DomainSpec], mode: str) -> dict[str, float]:
    out = {}
    for spec in trained:
        val = batches(spec.val, 32, model.cfg.max_seq_len)
        out[spec.name] = evaluate(model, val, "ungated" if mode == "ungated" else ("isolated", spec.name))
    return out


def outer_loop(
    model: BaseModel,
    domains: list[DomainSpec],
    inner: InnerConfig,
    best_cfg: BestStackConfig,
    moe_cfg: MoEConfig,
    ns: NullspaceConfig,
    completed: list[str] | None = None,
    on_domain_done: Callable[[DomainSpec, InnerResult | None, dict[str, Projector] | None], None] | None = None,
    on_freeze: Callable[[DomainSpec, int], None] | None = None,
    forgetting: dict[str, ForgettingMatrix] | None = None,
) -> OuterResult:
    """Train domains in curriculum order with optional null-space protection.

    Domains named in ``completed`` must already have their frozen stacks
    installed (see :func:`brainstacks.store.resume`) and are skipped.
    """
    check_curriculum(domains)
    names = [d.name for d in domains]
    completed = list(completed or [])
    if completed != names[: len(completed)]:
        raise ValueError(f"completed domains {completed} are not a curriculum prefix of {names}")
    forgetting = forgetting or {m: ForgettingMatrix(m, names) for m in ("ungated", "isolated")}
    results: list[InnerResult] = []
    projectors_by_domain: dict[str, dict[str, Projector]] = {}
    trace: list[TraceRow] = []
    for idx, spec in enumerate(domains):
        if spec.name in completed:
            continue
        projectors = None
        if idx > 0 and ns.enabled:
            projectors = build_projectors(model, domains[:idx], ns, derive_seed(inner.seed, idx, 7), model.cfg.max_seq_len)
            projectors_by_domain[spec.name] = projectors
        install_projectors(model, projectors)
        cb = None if on_freeze is None else (lambda m, spec=spec: on_freeze(spec, m))
        res = inner_loop(model, spec, inner, best_cfg, moe_cfg, idx, on_freeze=cb)
        install_projectors(model, None)
        results.append(res)
        trace += res.trace
        # the rl refinement step of the outer loop is intentionally a no-op
        for mode in ("ungated", "isolated"):
            forgetting[mode].add_row(spec.name, forgetting_row(model, domains[: idx + 1], mode))
        if on_domain_done is not None:
            on_domain_done(spec, res, projectors)
    return OuterResult(results, forgetting, projectors_by_domain, trace)

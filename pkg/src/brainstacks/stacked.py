"""Per-site additive composition of frozen stacks and one active stack.

``out = W x + sum_j w(domain_j) * frozen_j(x) + project(active(x))``

Frozen stacks live in cold storage as packed float32 bytes.  During a
forward each one is materialized into a shared hot arena, used, and
released before the next is touched, so the arena never holds more than
one frozen stack.
"""

from __future__ import annotations

import logging
import zlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import StateError, StorageError
from .moe_lora import (
    FusedEval,
    MoEConfig,
    MoELoRADelta,
    RoutingRecord,
    delta_forward,
    fuse_for_eval,
    fused_eval_forward,
    init_delta,
)
from .nullspace import Projector, project
from .serialization import fnv1a64

log = logging.getLogger(__name__)


class HotArena:
    """Tracks which frozen stacks are materialized for compute."""

    def __init__(self, record_trace: bool = False):
        self.resident = 0
        self.peak = 0
        self.record_trace = record_trace
        self.trace: list[str] = []

    @contextmanager
    def shuttle(self, stack: "FrozenStack"):
        if self.resident >= 1:
            raise StateError("hot arena already holds a frozen stack")
        delta = stack.materialize()
        self.resident += 1
        self.peak = max(self.peak, self.resident)
        if self.record_trace:
            self.trace.append(stack.stack_id)
        try:
            yield delta
        finally:
            self.resident -= 1


_PARTS = ("A", "B", "W_r", "W_n")


class FrozenStack:
    """An immutable delta for one site, tagged with its domain and round."""

    def __init__(
        self,
        site: str,
        domain: str,
        round_index: int,
        config: MoEConfig,
        arrays: dict[str, np.ndarray],
        projector: Projector | None = None,
    ):
        self.site = site
        self.domain = domain
        self.round_index = round_index
        self.config = config
        self.shapes = {k: tuple(arrays[k].shape) for k in _PARTS}
        self._cold = b"".join(np.ascontiguousarray(arrays[k], dtype=np.float32).tobytes() for k in _PARTS)
        self._crc = zlib.crc32(self._cold)
        self.projector = projector
        self.state = "cold"

    @property
    def stack_id(self) -> str:
        return f"{self.domain}/{self.round_index}"

    @property
    def d_in(self) -> int:
        return self.shapes["A"][2]

    @property
    def d_out(self) -> int:
        return self.shapes["B"][1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for k in _PARTS:
            shape = self.shapes[k]
            n = int(np.prod(shape))
            out[k] = np.frombuffer(self._cold, dtype=np.float32, count=n, offset=offset).reshape(shape)
            offset += n * 4
        return out

    def _check(self) -> None:
        if zlib.crc32(self._cold) != self._crc:
            raise StorageError(f"cold record of stack {self.stack_id} at {self.site} is corrupted")

    def materialize(self) -> FusedEval:
        """Hot, eval-ready form with the bound projector folded in."""
        self._check()
        V = None if self.projector is None else self.projector.V
        return fuse_for_eval(self.arrays(), self.config, V)

    def as_delta(self) -> MoELoRADelta:
        """Read-only delta view of the frozen parameters."""
        self._check()
        a = self.arrays()
        return MoELoRADelta(
            A=Tensor(a["A"]),
            B=Tensor(a["B"]),
            router_weight=Tensor(a["W_r"]),
            noise_weight=Tensor(a["W_n"]),
            config=self.config,
            trainable=False,
            site=self.site,
        )

    def param_hash(self) -> str:
        return fnv1a64(self._cold)

    def num_parameters(self) -> int:
        return len(self._cold) // 4


class StackedLayer:
    """One injection site: frozen base projection plus stacked deltas."""

    def __init__(self, layer_index: int, name: str, weight: Tensor, arena: HotArena | None = None):
        self.layer_index = layer_index
        self.name = name
        self.weight = weight
        self.arena = arena or HotArena()
        self.frozen: list[FrozenStack] = []
        self.active: MoELoRADelta | None = None
        self.projector: Projector | None = None
        self.domain_weights: dict[str, float] = {}
        self.capture = False
        self.captured: np.ndarray | None = None
        self.probe: dict[str, list] | None = None
        self.last_record: RoutingRecord | None = None

    @property
    def site_id(self) -> str:
        return f"{self.layer_index}.{self.name}"

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    # -- composition ---------------------------------------------------
    def weight_for(self, domain: str) -> float:
        return self.domain_weights.get(domain, 1.0)

    def forward(
        self,
        x: Tensor,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        token_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Compose base output, weighted frozen deltas and the active delta.

        ``x`` has shape [t, d_in]; the result has shape [t, d_out].
        """
        out = ad.matmul(x, self.weight)
        agg = None
        for stack in self.frozen:
            w = self.weight_for(stack.domain)
            if w == 0.0:
                continue
            with self.arena.shuttle(stack) as hot:
                d, gates = fused_eval_forward(hot, x)
            if self.probe is not None:
                self._probe_gates(stack.stack_id, gates, token_mask)
            if w != 1.0:
                d = ad.mul(d, w)
            out = ad.add(out, d)
            if self.capture:
                agg = d.data.copy() if agg is None else agg + d.data
        if self.capture:
            self.captured = agg
        self.last_record = None
        if self.active is not None:
            train = mode == "train"
            d, rec = delta_forward(self.active, x, train, rng, token_mask, need_record=train or self.probe is not None)
            if self.projector is not None:
                d = project(d, self.projector)
            out = ad.add(out, d)
            self.last_record = rec
            if self.probe is not None and rec is not None:
                self._probe_add("active", rec)
        return out

    def _probe_gates(self, key: str, gates: np.ndarray, token_mask: np.ndarray | None) -> None:
        w = np.ones(len(gates)) if token_mask is None else np.asarray(token_mask, dtype=np.float64).reshape(-1)
        acc = self.probe.setdefault(key, [np.zeros(gates.shape[1]), 0])
        acc[0] = acc[0] + (gates.astype(np.float64) * w[:, None]).sum(axis=0)
        acc[1] += int(w.sum())

    def _probe_add(self, key: str, rec: RoutingRecord) -> None:
        acc = self.probe.setdefault(key, [np.zeros_like(rec.mean_gate), 0])
        acc[0] = acc[0] + rec.mean_gate * rec.n_tokens
        acc[1] += rec.n_tokens

    # -- lifecycle -----------------------------------------------------
    def add_active_stack(self, cfg: MoEConfig, seed: int) -> MoELoRADelta:
        if self.active is not None:
            raise StateError(f"site {self.site_id} already has an active stack")
        self.active = init_delta(cfg, self.d_in, self.d_out, seed, site=self.site_id, dtype=self.weight.dtype)
        return self.active

    def freeze_active(self, domain: str, round_index: int) -> FrozenStack:
        if self.active is None:
            raise StateError(f"site {self.site_id} has no active stack to freeze")
        a = self.active
        arrays = {
            "A": a.A.data,
            "B": a.B.data,
            "W_r": a.router_weight.data,
            "W_n": a.noise_weight.data,
        }
        stack = FrozenStack(self.site_id, domain, round_index, a.config, arrays, projector=self.projector)
        a.set_trainable(False)
        self.frozen.append(stack)
        self.active = None
        return stack

    def set_domain_weights(self, weights: dict[str, float]) -> set[str]:
        """Install per-domain gate weights; returns names matching no stack."""
        for d, w in weights.items():
            if not 0.0 <= float(w) <= 1.0:
                raise ValueError(f"domain weight for {d!r} must lie in [0, 1], got {w}")
        known = {s.domain for s in self.frozen}
        unknown = set(weights) - known
        self.domain_weights = {d: float(w) for d, w in weights.items()}
        return unknown

    def install_projector(self, projector: Projector | None) -> None:
        if projector is not None and projector.h_dim != self.d_out:
            raise ValueError(f"projector dim {projector.h_dim} != site output dim {self.d_out}")
        self.projector = projector

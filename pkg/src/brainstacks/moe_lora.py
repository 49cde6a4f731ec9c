"""Routed low-rank expert ensembles (MoE-LoRA deltas).

A delta attached to a projection ``W: d_in -> d_out`` holds ``N`` rank-``r``
experts.  Expert ``e`` maps ``x`` to ``s * B_e (A_e x)`` with the
rank-stabilized scale ``s = alpha / sqrt(r)``.  A noisy top-K router picks
``K`` experts per token and mixes their outputs with softmax gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import RoutingError


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int = 4
    top_k: int = 2
    rank: int = 8
    alpha: float | None = None
    aux_coeff: float = 1.0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got {self.top_k}/{self.n_experts}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        s = self.scale
        if not (math.isfinite(s) and s > 0):
            raise ValueError(f"scale alpha/sqrt(r) must be finite and positive, got {s}")

    @property
    def effective_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)

    @property
    def scale(self) -> float:
        return self.effective_alpha / math.sqrt(self.rank)

    def to_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "rank": self.rank,
            "alpha": self.effective_alpha,
            "aux_coeff": self.aux_coeff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        return cls(
            n_experts=int(d["n_experts"]),
            top_k=int(d["top_k"]),
            rank=int(d["rank"]),
            alpha=float(d["alpha"]),
            aux_coeff=float(d.get("aux_coeff", 1.0)),
        )


@dataclass
class RoutingRecord:
    """Routing statistics of one delta over one batch.

    ``mean_prob`` is the token-mean of the clean full softmax (kept as a
    tensor so the auxiliary loss can backpropagate into the router);
    ``dispatch_frac`` counts noise-free top-K selections normalized by ``t * K``.
    """

    mean_prob: Tensor
    dispatch_frac: np.ndarray
    mean_gate: np.ndarray
    n_tokens: int
    site: str = ""

    @property
    def aux_value(self) -> float:
        n = self.dispatch_frac.shape[0]
        return float(n * np.dot(self.mean_prob.data.astype(np.float64), self.dispatch_frac))


@dataclass
class MoELoRADelta:
    A: Tensor
    B: Tensor
    router_weight: Tensor
    noise_weight: Tensor
    config: MoEConfig
    trainable: bool = True
    site: str = ""

    @property
    def d_in(self) -> int:
        return self.A.shape[2]

    @property
    def d_out(self) -> int:
        return self.B.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B, self.router_weight, self.noise_weight]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


def num_delta_parameters(cfg: MoEConfig, d_in: int, d_out: int) -> int:
    return cfg.n_experts * cfg.rank * (d_in + d_out) + 2 * d_in * cfg.n_experts


def init_delta(cfg: MoEConfig, d_in: int, d_out: int, seed: int, site: str = "", dtype=np.float32) -> MoELoRADelta:
    """Fresh delta whose output is exactly zero (``B = 0``)."""
    if d_in <= 0 or d_out <= 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    n, r = cfg.n_experts, cfg.rank
    bound = math.sqrt(6.0 / d_in)
    rb = 1.0 / math.sqrt(d_in)
    A = rng.uniform(-bound, bound, size=(n, r, d_in)).astype(dtype)
    B = np.zeros((n, d_out, r), dtype=dtype)
    wr = rng.uniform(-rb, rb, size=(d_in, n)).astype(dtype)
    wn = rng.uniform(-rb, rb, size=(d_in, n)).astype(dtype)
    tag = site or "delta"
    return MoELoRADelta(
        A=Tensor(A, requires_grad=True, name=f"{tag}.A"),
        B=Tensor(B, requires_grad=True, name=f"{tag}.B"),
        router_weight=Tensor(wr, requires_grad=True, name=f"{tag}.W_r"),
        noise_weight=Tensor(wn, requires_grad=True, name=f"{tag}.W_n"),
        config=cfg,
        trainable=True,
        site=site,
    )


def _flatten(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else x.reshape(-1, x.shape[-1])


def route(
    delta: MoELoRADelta,
    x: Tensor,
    train_mode: bool,
    rng: np.random.Generator | None = None,
    token_mask: np.ndarray | None = None,
    need_record: bool = True,
) -> tuple[Tensor, RoutingRecord | None]:
    """Noisy top-K gates for inputs ``x`` of shape [t, d_in].

    In training mode the logits get learned, input-dependent Gaussian noise
    ``softplus(x W_n) * eps``; in eval mode the router is noise-free.
    """
    x = _flatten(x)
    cfg = delta.config
    clean = ad.matmul(x, delta.router_weight)
    logits = clean
    if train_mode:
        if rng is None:
            raise ValueError("training-mode routing needs an rng")
        eps = rng.standard_normal(clean.shape).astype(clean.dtype)
        logits = ad.add(clean, ad.mul(ad.softplus(ad.matmul(x, delta.noise_weight)), Tensor(eps)))
    if np.isnan(logits.data).any():
        raise RoutingError(f"NaN router logits at site {delta.site or '?'}")
    gates = ad.topk_softmax(logits, cfg.top_k)
    if not need_record:
        return gates, None
    t = x.shape[0]
    if t == 0:
        raise ValueError("routing an empty batch")
    probs = ad.softmax(clean, axis=-1)
    if token_mask is None:
        weights = None
        n_valid = t
    else:
        weights = np.asarray(token_mask, dtype=probs.dtype).reshape(-1, 1)
        n_valid = int(weights.sum())
        if n_valid == 0:
            raise ValueError("routing a batch with no valid tokens")
    # dispatch is counted on the noise-free selection that eval routing uses
    clean_gates = ad.topk_softmax_np(clean.data, cfg.top_k) if train_mode else gates.data
    sel = (clean_gates > 0).astype(np.float64)
    gate_vals = gates.data.astype(np.float64)
    if weights is None:
        mean_prob = ad.mean(probs, axis=0)
        counts = sel.sum(axis=0)
        mean_gate = gate_vals.mean(axis=0)
    else:
        mean_prob = ad.mul(ad.sum_(ad.mul(probs, Tensor(weights)), axis=0), 1.0 / n_valid)
        counts = (sel * weights).sum(axis=0)
        mean_gate = (gate_vals * weights).sum(axis=0) / n_valid
    record = RoutingRecord(
        mean_prob=mean_prob,
        dispatch_frac=counts / (n_valid * cfg.top_k),
        mean_gate=mean_gate,
        n_tokens=n_valid,
        site=delta.site,
    )
    return gates, record


def delta_forward(
    delta: MoELoRADelta,
    x: Tensor,
    train_mode: bool,
    rng: np.random.Generator | None = None,
    token_mask: np.ndarray | None = None,
    need_record: bool = True,
) -> tuple[Tensor, RoutingRecord | None]:
    """Gated expert correction ``sum_e g_e * s * B_e A_e x`` (no base term).

    Returns a tensor with the leading shape of ``x`` and last dim ``d_out``.
    """
    lead = x.shape[:-1]
    x2 = _flatten(x)
    gates, record = route(delta, x2, train_mode, rng, token_mask, need_record)
    out = ad.moe_mix(x2, gates, delta.A, delta.B, delta.config.scale)
    if len(lead) != 1:
        out = out.reshape(*lead, delta.d_out)
    return out, record


def aux_loss(record: RoutingRecord, cfg: MoEConfig) -> Tensor:
    """Load-balance loss ``N * sum_e P(e) f(e)``."""
    if record.n_tokens <= 0:
        raise ValueError("aux_loss of an empty batch")
    f = Tensor(record.dispatch_frac.astype(record.mean_prob.dtype))
    return ad.mul(ad.sum_(ad.mul(record.mean_prob, f)), float(cfg.n_experts))


@dataclass
class FusedEval:
    """Eval-mode delta packed for a single fused forward.

    ``down`` is [d_in, N*r + N]: every expert's down projection followed by the
    router weights.  ``up`` is [N*r, d_out] with the scale, and optionally a
    fixed output projection, folded in.
    """

    down: np.ndarray
    up: np.ndarray
    n_experts: int
    rank: int
    top_k: int


def fuse_for_eval(arrays: dict[str, np.ndarray], cfg: MoEConfig, V: np.ndarray | None = None) -> FusedEval:
    A, B, Wr = arrays["A"], arrays["B"], arrays["W_r"]
    n, r, f = A.shape
    o = B.shape[1]
    down = np.concatenate([A.reshape(n * r, f).T, Wr], axis=1)
    up = B.transpose(0, 2, 1).reshape(n * r, o) * np.float32(cfg.scale)
    if V is not None:
        Vd = V.astype(up.dtype)
        up = up - (up @ Vd) @ Vd.T
    return FusedEval(np.ascontiguousarray(down), np.ascontiguousarray(up), n, r, cfg.top_k)


def fused_eval_forward(fz: FusedEval, x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Noise-free delta output of a packed stack; returns (out [t, o], gates).

    Only ``x`` receives gradients; the packed weights are constants.
    """
    x2 = _flatten(x)
    t = x2.shape[0]
    n, r = fz.n_experts, fz.rank
    z = x2.data @ fz.down
    mid = z[:, : n * r].reshape(t, n, r)
    gates = ad.topk_softmax_np(np.ascontiguousarray(z[:, n * r :]), fz.top_k)
    gd = gates[:, :, None]
    data = (mid * gd).reshape(t, n * r) @ fz.up

    def bw(g):
        dhg = (g @ fz.up.T).reshape(t, n, r)
        dg = np.einsum("ter,ter->te", dhg, mid)
        dlogit = gates * (dg - np.sum(gates * dg, axis=1, keepdims=True))
        dz = np.concatenate([(dhg * gd).reshape(t, n * r), dlogit.astype(dhg.dtype)], axis=1)
        return (dz @ fz.down.T,)

    out = ad._result(data, (x2,), bw)
    lead = x.shape[:-1]
    if len(lead) != 1:
        out = out.reshape(*lead, fz.up.shape[1])
    return out, gates

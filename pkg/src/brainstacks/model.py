"""A small pre-LN decoder-only transformer with seven injection sites per layer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, FormatError
from .optim import AdamW, CosineSchedule
from .serialization import read_blob, write_blob
from .stacked import FrozenStack, HotArena, StackedLayer

log = logging.getLogger(__name__)

SITE_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
BASE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 128
    max_seq_len: int = 64
    seed: int = 42

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def site_dims(self, name: str) -> tuple[int, int]:
        if name in ("gate_proj", "up_proj"):
            return self.d_model, self.d_ff
        if name == "down_proj":
            return self.d_ff, self.d_model
        return self.d_model, self.d_model


@dataclass
class ForwardResult:
    logits: Tensor
    hidden: list[np.ndarray] = field(default_factory=list)
    records: list = field(default_factory=list)
    truncated: bool = False


class TransformerLayer:
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator, arena: HotArena):
        d = cfg.d_model
        self.ln1_g = Tensor(np.ones(d, np.float32), name=f"{index}.ln1.g")
        self.ln1_b = Tensor(np.zeros(d, np.float32), name=f"{index}.ln1.b")
        self.ln2_g = Tensor(np.ones(d, np.float32), name=f"{index}.ln2.g")
        self.ln2_b = Tensor(np.zeros(d, np.float32), name=f"{index}.ln2.b")
        resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
        self.sites: dict[str, StackedLayer] = {}
        for name in SITE_NAMES:
            d_in, d_out = cfg.site_dims(name)
            std = resid_std if name in ("o_proj", "down_proj") else 0.02
            w = Tensor((rng.standard_normal((d_in, d_out)) * std).astype(np.float32), name=f"{index}.{name}")
            self.sites[name] = StackedLayer(index, name, w, arena)

    def parameters(self) -> list[Tensor]:
        return [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b] + [s.weight for s in self.sites.values()]


class BaseModel:
    """Frozen-able transformer whose projections are :class:`StackedLayer` sites."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        d = cfg.d_model
        self.arena = HotArena()
        self.tok_emb = Tensor((rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(np.float32), name="tok_emb")
        self.pos_emb = Tensor((rng.standard_normal((cfg.max_seq_len, d)) * 0.01).astype(np.float32), name="pos_emb")
        self.layers = [TransformerLayer(i, cfg, rng, self.arena) for i in range(cfg.n_layers)]
        self.lnf_g = Tensor(np.ones(d, np.float32), name="lnf.g")
        self.lnf_b = Tensor(np.zeros(d, np.float32), name="lnf.b")
        self.head = Tensor((rng.standard_normal((d, cfg.vocab_size)) * 0.02).astype(np.float32), name="head")
        self.frozen = False
        self.creation_seed = cfg.seed
        mask = np.triu(np.ones((cfg.max_seq_len, cfg.max_seq_len), dtype=bool), k=1)
        self._causal = mask

    # -- parameters ----------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += [(f"{i}.ln1.g", layer.ln1_g), (f"{i}.ln1.b", layer.ln1_b)]
            out += [(f"{i}.ln2.g", layer.ln2_g), (f"{i}.ln2.b", layer.ln2_b)]
            out += [(f"{i}.{n}", layer.sites[n].weight) for n in SITE_NAMES]
        out += [("lnf.g", self.lnf_g), ("lnf.b", self.lnf_b), ("head", self.head)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def freeze(self) -> None:
        self.set_requires_grad(False)
        self.frozen = True

    # -- sites -----------------------------------------------------------
    def stacked_layers(self) -> list[StackedLayer]:
        return [layer.sites[n] for layer in self.layers for n in SITE_NAMES]

    def site(self, site_id: str) -> StackedLayer:
        i, name = site_id.split(".", 1)
        return self.layers[int(i)].sites[name]

    def set_domain_weights(self, weights: dict[str, float]) -> set[str]:
        unknown = set(weights)
        for layer in self.stacked_layers():
            unknown &= layer.set_domain_weights(weights)
        if unknown:
            log.warning("ignoring weights for unknown domains: %s", sorted(unknown))
        return unknown

    def domain_weights(self) -> dict[str, float]:
        layers = self.stacked_layers()
        return dict(layers[0].domain_weights) if layers else {}

    def frozen_domains(self) -> list[str]:
        seen: list[str] = []
        for s in self.stacked_layers()[0].frozen:
            if s.domain not in seen:
                seen.append(s.domain)
        return seen

    def set_capture(self, flag: bool) -> None:
        for layer in self.stacked_layers():
            layer.capture = flag
            if not flag:
                layer.captured = None

    def set_probe(self, flag: bool) -> None:
        for layer in self.stacked_layers():
            layer.probe = {} if flag else None

    # -- forward -----------------------------------------------------------
    def forward(
        self,
        tokens,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        capture_hidden: bool = False,
        token_mask: np.ndarray | None = None,
    ) -> ForwardResult:
        """Run the model on token ids of shape [T] or [B, T].

        Sequences longer than ``max_seq_len`` are right-truncated and the
        result carries ``truncated=True``.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        truncated = False
        if tokens.shape[1] > cfg.max_seq_len:
            tokens = tokens[:, : cfg.max_seq_len]
            truncated = True
            if token_mask is not None:
                token_mask = np.asarray(token_mask)[..., : cfg.max_seq_len]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        B, T = tokens.shape
        d, H = cfg.d_model, cfg.n_heads
        dh = d // H
        flat_mask = None if token_mask is None else np.asarray(token_mask).reshape(-1)

        x = ad.add(ad.take_rows(self.tok_emb, tokens.reshape(-1)).reshape(B, T, d), self.pos_emb[:T])
        x = x.reshape(B * T, d)
        hidden = [x.data.reshape(B, T, d).copy()] if capture_hidden else []
        causal = self._causal[:T, :T]
        scale = 1.0 / math.sqrt(dh)
        records = []

        def site(layer, name, h):
            s = layer.sites[name]
            out = s.forward(h, mode, rng, flat_mask)
            if s.last_record is not None:
                records.append(s.last_record)
            return out

        for layer in self.layers:
            h = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
            q = site(layer, "q_proj", h).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = site(layer, "k_proj", h).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = site(layer, "v_proj", h).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            scores = ad.mul(ad.matmul(q, k), scale)
            att = ad.softmax(ad.masked_fill(scores, causal, -np.inf), axis=-1)
            ctx = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(B * T, d)
            x = ad.add(x, site(layer, "o_proj", ctx))
            h2 = ad.layer_norm(x, layer.ln2_g, layer.ln2_b)
            a = ad.mul(ad.gelu(site(layer, "gate_proj", h2)), site(layer, "up_proj", h2))
            x = ad.add(x, site(layer, "down_proj", a))
            if capture_hidden:
                hidden.append(x.data.reshape(B, T, d).copy())

        x = ad.layer_norm(x, self.lnf_g, self.lnf_b)
        logits = ad.matmul(x, self.head).reshape(B, T, cfg.vocab_size)
        if single:
            logits = logits.reshape(T, cfg.vocab_size)
            hidden = [h[0] for h in hidden]
        return ForwardResult(logits=logits, hidden=hidden, records=records, truncated=truncated)

    # -- persistence -----------------------------------------------------
    def save(self, path: str | Path) -> str:
        header = {
            "kind": "base_model",
            "format_version": BASE_FORMAT_VERSION,
            "config": asdict(self.cfg),
            "creation_seed": self.creation_seed,
        }
        return write_blob(path, header, [(n, p.data) for n, p in self.named_parameters()])

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None) -> "BaseModel":
        header, arrays = read_blob(path, expected_hash)
        if header.get("kind") != "base_model" or header.get("format_version") != BASE_FORMAT_VERSION:
            raise FormatError(f"{path}: not a base model file of version {BASE_FORMAT_VERSION}")
        model = cls(ModelConfig(**header["config"]))
        model.creation_seed = header.get("creation_seed", model.cfg.seed)
        for name, p in model.named_parameters():
            if name not in arrays or arrays[name].shape != p.shape:
                raise FormatError(f"{path}: tensor {name} missing or mis-shaped")
            p.data = arrays[name].copy()
        model.freeze()
        return model

    def weights_fingerprint(self) -> str:
        from .serialization import fnv1a64

        return fnv1a64(b"".join(p.data.tobytes() for p in self.parameters()))


def injection_sites(model: BaseModel) -> list[tuple[int, str, int, int]]:
    """(layer index, site name, d_in, d_out) in layer-major, fixed site order."""
    return [(s.layer_index, s.name, s.d_in, s.d_out) for s in model.stacked_layers()]


def lm_loss(model: BaseModel, batch, mode: str = "eval", rng=None) -> tuple[Tensor, list]:
    res = model.forward(batch.tokens, mode=mode, rng=rng, token_mask=batch.valid)
    return ad.cross_entropy(res.logits, batch.targets, batch.loss_mask), res.records


def pretrain_base(
    corpus: np.ndarray,
    steps: int,
    cfg: ModelConfig,
    batch_size: int = 16,
    seq_len: int | None = None,
    lr: float = 3e-3,
    log_every: int = 0,
) -> tuple[BaseModel, list[float]]:
    """Train a fresh model with next-token loss on random corpus windows.

    Returns the frozen model and the per-step loss trace.
    """
    from .data import Batch

    corpus = np.asarray(corpus, dtype=np.int64)
    seq_len = seq_len or cfg.max_seq_len
    if len(corpus) < batch_size * (seq_len + 1):
        raise DataError(f"corpus of {len(corpus)} tokens is shorter than one batch of {batch_size}x{seq_len + 1}")
    model = BaseModel(cfg)
    model.set_requires_grad(True)
    params = model.parameters()
    sched = CosineSchedule(lr, max(steps, 1), lr * 0.1, warmup_steps=min(50, steps // 10))
    opt = AdamW(params, lr=lr, weight_decay=0.01, schedule=sched)
    rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
    trace: list[float] = []
    for step in range(steps):
        starts = rng.integers(0, len(corpus) - seq_len - 1, size=batch_size)
        windows = np.stack([corpus[s : s + seq_len + 1] for s in starts])
        batch = Batch.from_windows(windows)
        opt.zero_grad()
        loss, _ = lm_loss(model, batch, mode="train", rng=rng)
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, trace[-1])
    model.freeze()
    return model, trace

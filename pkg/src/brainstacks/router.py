"""Outcome-based sigmoid meta-router.

Targets come from outcome discovery: each training prompt is scored under
every domain combination and the combination that actually lowers its loss
becomes the label.  The router reads base-model hidden states only.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, PAD, Sample, encode_text
from .errors import CorruptionError, LeakageError
from .optim import AdamW, CosineSchedule
from .serialization import atomic_write, fnv1a64, read_blob, write_blob
from .training import derive_seed, per_sample_losses

log = logging.getLogger(__name__)

ROUTER_VERSION = 1


@dataclass(frozen=True)
class RouterConfig:
    domains: tuple[str, ...] = ("format", "procedural", "arithmetic", "lookup")
    blend_mid: float = 0.45
    blend_last: float = 0.55
    hidden: int = 64
    seq_len: int = 64
    chat_domain: str = "format"
    chat_floor: float = 0.20
    gate_threshold: float = 0.12
    improve_threshold: float = 0.01
    soft_boost_domain: str | None = "procedural"
    soft_boost: float = 0.5
    blend_discovered: float = 0.8
    blend_label: float = 0.2
    epochs: int = 8
    lr: float = 1e-2
    batch_size: int = 16
    dropout: float = 0.1
    w_top1: float = 0.50
    w_set: float = 0.35
    w_bce: float = 0.15
    margin_coeff: float = 0.05
    margin: float = 0.3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.chat_floor > self.gate_threshold:
            raise ValueError("chat_floor must exceed gate_threshold so the chat domain always survives")
        if abs(self.blend_mid + self.blend_last - 1.0) > 1e-9:
            raise ValueError("feature blend weights must sum to 1")
        if abs(self.blend_discovered + self.blend_label - 1.0) > 1e-9:
            raise ValueError("target blend weights must sum to 1")
        if self.chat_domain not in self.domains:
            raise ValueError(f"chat domain {self.chat_domain!r} is not among {self.domains}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domains"] = list(self.domains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        d = dict(d)
        d["domains"] = tuple(d["domains"])
        return cls(**d)


def composite_score(top1: float, set_match: float, bce: float, cfg: RouterConfig = RouterConfig()) -> float:
    return cfg.w_top1 * top1 + cfg.w_set * set_match - cfg.w_bce * bce


# ---------------------------------------------------------------------------
# prompt encoding
# ---------------------------------------------------------------------------


def prompt_tokens(prompt: str) -> np.ndarray:
    return np.array([BOS] + encode_text(prompt), dtype=np.int64)


def encode_prompts(model, prompts: list[str], cfg: RouterConfig, batch_size: int = 64) -> list[np.ndarray]:
    """Blended mid/last hidden states per prompt, computed with every stack off.

    Each entry has shape [min(len, seq_len), d_model].
    """
    if any(len(p) == 0 for p in prompts):
        raise ValueError("cannot encode an empty prompt")
    saved = model.domain_weights()
    saved_active = [layer.active for layer in model.stacked_layers()]
    model.set_domain_weights({d: 0.0 for d in model.frozen_domains()})
    for layer in model.stacked_layers():
        layer.active = None
    mid = model.cfg.n_layers // 2
    limit = min(cfg.seq_len, model.cfg.max_seq_len)
    out: list[np.ndarray] = []
    try:
        with ad.no_grad():
            for i in range(0, len(prompts), batch_size):
                toks = [prompt_tokens(p)[:limit] for p in prompts[i : i + batch_size]]
                T = max(len(t) for t in toks)
                arr = np.full((len(toks), T), PAD, dtype=np.int64)
                for j, t in enumerate(toks):
                    arr[j, : len(t)] = t
                res = model.forward(arr, mode="eval", capture_hidden=True)
                feats = cfg.blend_mid * res.hidden[mid] + cfg.blend_last * res.hidden[model.cfg.n_layers]
                if arr.shape[0] == 1 and feats.ndim == 2:
                    feats = feats[None]
                out += [feats[j, : len(t)].astype(np.float32) for j, t in enumerate(toks)]
    finally:
        for layer, a in zip(model.stacked_layers(), saved_active):
            layer.active = a
        model.set_domain_weights(saved)
    return out


def encode_prompt(model, prompt: str, cfg: RouterConfig) -> np.ndarray:
    return encode_prompts(model, [prompt], cfg)[0]


def pad_features(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    T = max(f.shape[0] for f in feats)
    d = feats[0].shape[1]
    x = np.zeros((len(feats), T, d), dtype=np.float32)
    mask = np.zeros((len(feats), T), dtype=bool)
    for i, f in enumerate(feats):
        x[i, : len(f)] = f
        mask[i, : len(f)] = True
    return x, mask


# ---------------------------------------------------------------------------
# outcome discovery
# ---------------------------------------------------------------------------


@dataclass
class OracleTarget:
    prompt_id: str
    prompt: str
    label: str
    kind: str
    base_loss: float
    single_losses: dict[str, float]
    discovered: list[str]
    best_loss: float
    target: dict[str, float]
    exhaustive_best: list[str] = field(default_factory=list)
    exhaustive_loss: float = 0.0
    soft_boost: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleTarget":
        return cls(**d)


def combo_key(combo) -> str:
    return "+".join(sorted(combo)) or "-"


def combo_weights(combo, domains) -> dict[str, float]:
    return {d: (1.0 if d in combo else 0.0) for d in domains}


def combo_loss_table(model, samples: list[Sample], domains: list[str]) -> dict[str, np.ndarray]:
    """Per-sample losses under every subset of ``domains`` at weight 1."""
    table = {}
    for n in range(len(domains) + 1):
        for combo in itertools.combinations(domains, n):
            table[combo_key(combo)] = per_sample_losses(model, samples, combo_weights(combo, domains))
    return table


def greedy_discover(losses: dict[str, float], domains: list[str], threshold: float) -> tuple[list[str], float]:
    """Add the most helpful domain while it lowers loss by more than ``threshold``."""
    chosen: list[str] = []
    best = losses[combo_key(())]
    while True:
        rest = [d for d in domains if d not in chosen]
        if not rest:
            break
        trial = {d: losses[combo_key(chosen + [d])] for d in rest}
        d = min(rest, key=lambda k: (trial[k], domains.index(k)))
        if best - trial[d] > threshold:
            chosen.append(d)
            best = trial[d]
        else:
            break
    return sorted(chosen, key=domains.index), best


def exhaustive_discover(losses: dict[str, float], domains: list[str]) -> tuple[list[str], float]:
    best_combo, best = (), math.inf
    for n in range(len(domains) + 1):
        for combo in itertools.combinations(domains, n):
            v = losses[combo_key(combo)]
            if v < best:
                best_combo, best = combo, v
    return list(best_combo), best


def build_target(
    sample: Sample, losses: dict[str, float], domains: list[str], cfg: RouterConfig
) -> OracleTarget:
    base = losses[combo_key(())]
    chosen, best = greedy_discover(losses, domains, cfg.improve_threshold)
    disc = {d: (1.0 if d in chosen else 0.0) for d in domains}
    boosted = False
    sb = cfg.soft_boost_domain
    if sb is not None and sb in domains and sb not in chosen:
        if losses[combo_key(chosen + [sb])] < best:
            disc[sb] = cfg.soft_boost
            boosted = True
    target = {d: cfg.blend_discovered * disc[d] + cfg.blend_label * (1.0 if d == sample.domain else 0.0) for d in domains}
    ex_combo, ex_loss = exhaustive_discover(losses, domains)
    return OracleTarget(
        prompt_id=sample.uid,
        prompt=sample.prompt,
        label=sample.domain,
        kind=sample.kind,
        base_loss=float(base),
        single_losses={d: float(losses[combo_key((d,))]) for d in domains},
        discovered=chosen,
        best_loss=float(best),
        target=target,
        exhaustive_best=ex_combo,
        exhaustive_loss=float(ex_loss),
        soft_boost=boosted,
    )


def oracle_discover(model, samples: list[Sample], cfg: RouterConfig, cache_dir: str | Path | None = None) -> list[OracleTarget]:
    """Outcome targets for ``samples``; cached per sample domain as JSON lines.

    A cache file that fails to parse or whose hash does not verify is
    recomputed with a warning.
    """
    domains = [d for d in cfg.domains if d in model.frozen_domains()]
    cached: dict[str, OracleTarget] = {}
    dset = combo_key(domains)
    if cache_dir is not None:
        cached = _read_cache(Path(cache_dir), dset)
    key_of = {s.uid: _prompt_key(s, dset) for s in samples}
    todo = [s for s in samples if key_of[s.uid] not in cached]
    if todo:
        table = combo_loss_table(model, todo, domains)
        for i, s in enumerate(todo):
            losses = {k: float(v[i]) for k, v in table.items()}
            cached[key_of[s.uid]] = build_target(s, losses, domains, cfg)
        if cache_dir is not None:
            _write_cache(Path(cache_dir), dset, cached)
    return [cached[key_of[s.uid]] for s in samples]


def _prompt_key(s: Sample, dset: str) -> str:
    return fnv1a64(f"{s.prompt}\x00{s.answer}\x00{s.domain}\x00{dset}".encode("utf-8"))


def _cache_files(cache_dir: Path, dset: str) -> list[Path]:
    return sorted(cache_dir.glob(f"oracle_*_{dset}.jsonl"))


def _read_cache(cache_dir: Path, dset: str) -> dict[str, OracleTarget]:
    out = {}
    for path in _cache_files(cache_dir, dset):
        try:
            lines = path.read_text().splitlines()
            digest = json.loads(lines[0])["sha"]
            body = "\n".join(lines[1:])
            if fnv1a64(body.encode("utf-8")) != digest:
                raise CorruptionError(f"{path}: hash mismatch")
            for line in lines[1:]:
                rec = json.loads(line)
                out[rec["key"]] = OracleTarget.from_dict(rec["target"])
        except (CorruptionError, json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            log.warning("discarding oracle cache %s (%s); targets will be recomputed", path, exc)
    return out


def _write_cache(cache_dir: Path, dset: str, targets: dict[str, OracleTarget]) -> None:
    by_domain: dict[str, list] = {}
    for key in sorted(targets):
        t = targets[key]
        by_domain.setdefault(t.label, []).append(json.dumps({"key": key, "target": t.to_dict()}, sort_keys=True))
    for domain, lines in by_domain.items():
        body = "\n".join(lines)
        head = json.dumps({"sha": fnv1a64(body.encode("utf-8"))})
        atomic_write(cache_dir / f"oracle_{domain}_{dset}.jsonl", (head + "\n" + body).encode("utf-8"))


# ---------------------------------------------------------------------------
# router network
# ---------------------------------------------------------------------------


class RouterNet:
    """Attention-pooled prompt features to independent per-domain sigmoids."""

    def __init__(self, d_model: int, cfg: RouterConfig, seed: int = 0):
        self.cfg = cfg
        self.d_model = d_model
        H, D = cfg.hidden, len(cfg.domains)
        rng = np.random.Generator(np.random.Philox(seed))

        def init(shape, fan_in, name):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, size=shape).astype(np.float32), requires_grad=True, name=name)

        self.W_in = init((d_model, H), d_model, "W_in")
        self.b_in = Tensor(np.zeros(H, np.float32), requires_grad=True, name="b_in")
        self.q_global = init((H, 1), H, "q_global")
        self.q_domain = init((H, D), H, "q_domain")
        self.W_g = init((H, H), H, "W_g")
        self.W_c = init((H, H), H, "W_c")
        self.b_f = Tensor(np.zeros(H, np.float32), requires_grad=True, name="b_f")
        self.head_w = Tensor(np.zeros((D, H), np.float32), requires_grad=True, name="head_w")
        self.head_b = Tensor(np.zeros(D, np.float32), requires_grad=True, name="head_b")
        self.log_temp = Tensor(np.zeros(D, np.float32), requires_grad=True, name="log_temp")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ("W_in", "b_in", "q_global", "q_domain", "W_g", "W_c", "b_f", "head_w", "head_b", "log_temp")
        return [(n, getattr(self, n)) for n in names]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def logits(self, x: np.ndarray, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """Temperature-scaled logits [B, D] for padded features x [B, T, d]."""
        H = self.cfg.hidden
        B, T, _ = x.shape
        h = ad.tanh(ad.add(ad.matmul(Tensor(x), self.W_in), self.b_in))  # [B,T,H]
        inv = 1.0 / math.sqrt(H)
        pad = ~mask[:, :, None]  # [B,T,1]
        sg = ad.masked_fill(ad.mul(ad.matmul(h, self.q_global), inv), pad, -np.inf)  # [B,T,1]
        ag = ad.softmax(sg, axis=1)
        g = ad.sum_(ad.mul(ag, h), axis=1)  # [B,H]
        sd = ad.masked_fill(ad.mul(ad.matmul(h, self.q_domain), inv), pad, -np.inf)  # [B,T,D]
        ad_ = ad.softmax(sd, axis=1)
        c = ad.matmul(ad_.transpose(0, 2, 1), h)  # [B,D,H]
        fused = ad.add(ad.add(ad.matmul(g, self.W_g).reshape(B, 1, H), ad.matmul(c, self.W_c)), self.b_f)
        z = ad.dropout(ad.gelu(fused), self.cfg.dropout, train, rng)  # [B,D,H]
        raw = ad.add(ad.sum_(ad.mul(z, self.head_w), axis=-1), self.head_b)  # [B,D]
        return ad.div(raw, ad.exp(self.log_temp))

    def forward(self, x: np.ndarray, mask: np.ndarray, train: bool = False, rng=None) -> Tensor:
        return ad.sigmoid(self.logits(x, mask, train, rng))

    def predict(self, feats: list[np.ndarray], batch_size: int = 128) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(feats), batch_size):
                x, m = pad_features(feats[i : i + batch_size])
                out.append(self.forward(x, m).data)
        return np.concatenate(out, axis=0).astype(np.float64)

    # -- persistence ---------------------------------------------------
    def save(self, path: str | Path, meta: dict | None = None) -> str:
        header = {
            "kind": "router",
            "format_version": ROUTER_VERSION,
            "config": self.cfg.to_dict(),
            "d_model": self.d_model,
            "meta": meta or {},
        }
        return write_blob(path, header, [(n, p.data) for n, p in self.named_parameters()])

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None) -> "RouterNet":
        from .errors import FormatError

        header, arrays = read_blob(path, expected_hash)
        if header.get("kind") != "router" or header.get("format_version") != ROUTER_VERSION:
            raise FormatError(f"{path}: not a router checkpoint of version {ROUTER_VERSION}")
        net = cls(int(header["d_model"]), RouterConfig.from_dict(header["config"]))
        for n, p in net.named_parameters():
            if n not in arrays or arrays[n].shape != p.shape:
                raise FormatError(f"{path}: router tensor {n} missing or mis-shaped")
            p.data = arrays[n].copy()
        return net


def margin_penalty(probs: Tensor, margin: float) -> Tensor:
    """``mean(max(0, m - |p - 0.5|))``: pushes outputs away from 0.5."""
    return ad.mean(ad.relu(ad.sub(margin, ad.abs_(ad.sub(probs, 0.5)))))


# ---------------------------------------------------------------------------
# metrics and training
# ---------------------------------------------------------------------------


def target_matrix(targets: list[OracleTarget], domains) -> np.ndarray:
    return np.array([[t.target[d] for d in domains] for t in targets], dtype=np.float32)


def predicted_set(p: np.ndarray, domains, threshold: float) -> set[str]:
    return {d for d, v in zip(domains, p) if v >= threshold}


def target_set(t: OracleTarget, threshold: float) -> set[str]:
    return {d for d, v in t.target.items() if v >= threshold}


def top1_correct(p: np.ndarray, target: np.ndarray) -> bool:
    """Argmax prediction lands on a maximal target entry."""
    top = int(np.argmax(p))
    return bool(target[top] >= target.max() - 1e-9)


def bce_value(p: np.ndarray, t: np.ndarray, eps: float = 1e-7) -> float:
    pc = np.clip(p, eps, 1 - eps)
    return float(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean())


@dataclass
class RoutingStats:
    single_top1: float
    mixed_set_match: float
    val_bce: float
    activation_rate: dict[str, float]
    cross_domain_rate: float
    n_single: int
    n_mixed: int

    def composite(self, cfg: RouterConfig) -> float:
        return composite_score(self.single_top1, self.mixed_set_match, self.val_bce, cfg)

    def to_dict(self) -> dict:
        return asdict(self)


def routing_stats(probs: np.ndarray, targets: list[OracleTarget], cfg: RouterConfig) -> RoutingStats:
    if len(targets) == 0:
        raise ValueError("routing_stats needs a non-empty eval set")
    domains = list(cfg.domains)
    T = target_matrix(targets, domains)
    single = [i for i, t in enumerate(targets) if t.kind == "single"]
    mixed = [i for i, t in enumerate(targets) if t.kind != "single"]
    top1 = float(np.mean([top1_correct(probs[i], T[i]) for i in single])) if single else 0.0
    sm = (
        float(np.mean([predicted_set(probs[i], domains, cfg.gate_threshold) == target_set(targets[i], cfg.gate_threshold) for i in mixed]))
        if mixed
        else 0.0
    )
    weights = [route_weights(p, cfg) for p in probs]
    act = {d: float(np.mean([w[d] > 0 for w in weights])) for d in domains}
    cross = float(np.mean([sum(v > 0 for v in w.values()) >= 2 for w in weights]))
    return RoutingStats(top1, sm, bce_value(probs, T), act, cross, len(single), len(mixed))


def split_by_prompt(targets: list[OracleTarget], val_fraction: float, seed: int) -> tuple[list[OracleTarget], list[OracleTarget]]:
    """Deterministic split on unique prompts; raises on leakage."""
    prompts = sorted({t.prompt for t in targets})
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(prompts))
    n_val = max(1, int(round(val_fraction * len(prompts))))
    val_prompts = {prompts[i] for i in order[:n_val]}
    train = [t for t in targets if t.prompt not in val_prompts]
    val = [t for t in targets if t.prompt in val_prompts]
    check_leakage(train, val)
    return train, val


def check_leakage(train: list[OracleTarget], val: list[OracleTarget]) -> None:
    shared = {t.prompt for t in train} & {t.prompt for t in val}
    if shared:
        raise LeakageError(f"{len(shared)} prompt(s) appear in both router splits, e.g. {sorted(shared)[0]!r}")


@dataclass
class RouterTrainResult:
    net: RouterNet
    best_epoch: int
    best_score: float
    history: list[dict]
    val_stats: RoutingStats


def train_router(
    feats: list[np.ndarray],
    targets: list[OracleTarget],
    cfg: RouterConfig,
    d_model: int,
    val_feats: list[np.ndarray] | None = None,
    val_targets: list[OracleTarget] | None = None,
) -> RouterTrainResult:
    """BCE plus margin penalty, cosine LR, best-composite checkpoint.

    Without an explicit validation set the targets are split by unique prompt.
    """
    domains = list(cfg.domains)
    for d in domains:
        if len({t.prompt for t in targets if t.label == d}) < 2:
            raise ValueError(f"router training needs at least 2 distinct prompts for domain {d!r}")
    if val_targets is None:
        tr, va = split_by_prompt(targets, cfg.val_fraction, cfg.seed)
        idx = {id(t): i for i, t in enumerate(targets)}
        tr_f = [feats[idx[id(t)]] for t in tr]
        va_f = [feats[idx[id(t)]] for t in va]
    else:
        check_leakage(targets, val_targets)
        tr, va, tr_f, va_f = targets, val_targets, feats, val_feats
    net = RouterNet(d_model, cfg, seed=derive_seed(cfg.seed, 11))
    Y = target_matrix(tr, domains)
    n = len(tr)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(net.parameters(), lr=cfg.lr, weight_decay=0.01, schedule=CosineSchedule(cfg.lr, total))
    rng = np.random.Generator(np.random.Philox(derive_seed(cfg.seed, 12)))
    best = (-math.inf, -1, None, None)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            x, m = pad_features([tr_f[i] for i in idx])
            opt.zero_grad()
            p = net.forward(x, m, train=True, rng=rng)
            loss = ad.binary_cross_entropy(p, Y[idx])
            if cfg.margin_coeff > 0:
                loss = ad.add(loss, ad.mul(margin_penalty(p, cfg.margin), cfg.margin_coeff))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        stats = routing_stats(net.predict(va_f), va, cfg)
        score = stats.composite(cfg)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "composite": score, **stats.to_dict()})
        if score > best[0]:
            best = (score, epoch, [p.data.copy() for p in net.parameters()], stats)
    for p, snap in zip(net.parameters(), best[2]):
        p.data = snap
    return RouterTrainResult(net, best[1], best[0], history, best[3])


# ---------------------------------------------------------------------------
# inference gating
# ---------------------------------------------------------------------------


def route_weights(probs, cfg: RouterConfig) -> dict[str, float]:
    """Chat floor, then gate threshold; survivors pass through unchanged."""
    w = {d: float(p) for d, p in zip(cfg.domains, probs)}
    w[cfg.chat_domain] = max(w[cfg.chat_domain], cfg.chat_floor)
    return {d: (v if v >= cfg.gate_threshold else 0.0) for d, v in w.items()}


def route(net: RouterNet, model, prompt: str) -> dict[str, float]:
    feats = encode_prompt(model, prompt, net.cfg)
    return route_weights(net.predict([feats])[0], net.cfg)

"""Experiment orchestration behind the command-line interface.

Every command reads its prerequisites from the output directory and writes
raw results there, so reports can be produced later without recomputation.

Layout of an output directory::

    base.bin, pretrain_trace.csv
    ns/ and nons/           one run directory per null-space setting
        manifest.json, stacks/, projectors/, traces/, forgetting_*.json,
        expert_activation.json, orthogonality.json
    oracle/                 cached outcome targets
    router.bin, routing_stats.json, eval_routed.json, cache_session.json
    compare_lora.json
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import DOMAINS, EOS, SEP, Batch, Sample, batches, decontaminate, dump_jsonl, encode_text, make_splits, mixed_samples, pretrain_corpus
from .errors import IncompatibilityError, PrerequisiteError
from .model import BaseModel, pretrain_base
from .moe_lora import MoEConfig, num_delta_parameters
from .nullspace import collect_deltas, orthogonality_report, subspace_leakage
from .router import (
    OracleTarget,
    RouterNet,
    encode_prompts,
    oracle_discover,
    route_weights,
    routing_stats,
    train_router,
)
from .store import StackCache, StackStore, empty_manifest, fingerprint, resume
from .training import (
    DomainSpec,
    ForgettingMatrix,
    InnerResult,
    derive_seed,
    outer_loop,
    train_step_loss,
    mean_loss,
    write_trace_csv,
)
from .optim import AdamW, CosineSchedule
from .serialization import atomic_write

log = logging.getLogger(__name__)

BASE_FILE = "base.bin"


def _dump(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode("utf-8"))


def _load(path: Path, command: str):
    if not path.exists():
        raise PrerequisiteError(f"{path} is missing; run `{command}` first")
    return json.loads(path.read_text())


def run_dir(out: Path, use_nullspace: bool) -> Path:
    return Path(out) / ("ns" if use_nullspace else "nons")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def build_domains(cfg: RunConfig) -> list[DomainSpec]:
    """Train/val splits for each curriculum domain, decontaminated."""
    train_sets, val_sets = {}, {}
    for d in cfg.domains:
        i = DOMAINS.index(d)
        tr, va = make_splits(d, cfg.data.n_train, cfg.data.n_val, cfg.data.seed + i, cfg.data.multi_step)
        train_sets[d], val_sets[d] = tr, va
    for d in cfg.domains:
        kept, moved = decontaminate(train_sets[d], d)
        if moved:
            log.info("decontamination moved %d %s samples", len(moved), d)
        train_sets[d] = kept
        for s in moved:
            if s.domain in train_sets:
                train_sets[s.domain].append(s)
    return [DomainSpec(d, train_sets[d], val_sets[d], position=i) for i, d in enumerate(cfg.domains)]


def oracle_samples(cfg: RunConfig, domains: list[DomainSpec], split: str) -> list[Sample]:
    """Single-domain and mixed prompts for outcome discovery."""
    n = cfg.data.oracle_per_domain if split == "train" else cfg.data.heldout_per_domain
    pools = {d.name: (d.train if split == "train" else d.val) for d in domains}
    out = []
    for d in domains:
        out += pools[d.name][:n]
    k = cfg.data.oracle_mixed_per_pair
    for i, (a, b) in enumerate(itertools.combinations([d.name for d in domains], 2)):
        tail_a = pools[a][n:] if split == "train" else pools[a]
        tail_b = pools[b][n:] if split == "train" else pools[b]
        out += mixed_samples(tail_a, tail_b, derive_seed(cfg.data.seed, i, 0 if split == "train" else 1), cfg.model.max_seq_len, k)
    return out


def dump_data(cfg: RunConfig, out: Path) -> list[Path]:
    paths = []
    for spec in build_domains(cfg):
        for split, samples in (("train", spec.train), ("val", spec.val)):
            p = Path(out) / "data" / f"{spec.name}_{split}.jsonl"
            dump_jsonl(samples, p)
            paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(cfg: RunConfig, out: Path) -> Path:
    out = Path(out)
    corpus = pretrain_corpus(cfg.data.pretrain_tokens, cfg.model.seed)
    model, trace = pretrain_base(corpus, cfg.data.pretrain_steps, cfg.model, cfg.data.pretrain_batch, lr=cfg.data.pretrain_lr)
    path = out / BASE_FILE
    model.save(path)
    rows = "step,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(trace))
    atomic_write(out / "pretrain_trace.csv", rows.encode("utf-8"))
    return path


def load_base(out: Path) -> BaseModel:
    path = Path(out) / BASE_FILE
    if not path.exists():
        raise PrerequisiteError(f"no base model at {path}; run `pretrain` first")
    return BaseModel.load(path)


# ---------------------------------------------------------------------------
# continual training
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    model: BaseModel
    manifest: dict
    forgetting: dict[str, ForgettingMatrix]
    run_dir: Path


def _round_entry(res: InnerResult, m: int) -> dict:
    r = res.rounds[m - 1]
    return {
        "val_loss": r.val_loss,
        "boost_loss": r.boost_loss,
        "improvement": r.improvement,
        "break_fired": r.break_fired,
        "stop_reason": r.stop_reason,
        "steps": r.steps,
        "wall_seconds": r.wall_seconds,
    }


def train(cfg: RunConfig, out: Path, use_nullspace: bool = True, resume_run: bool = False, stop_after: int | None = None) -> TrainOutcome:
    """Full outer loop with manifest updates after every domain."""
    out = Path(out)
    model = load_base(out)
    domains = build_domains(cfg)
    names = [d.name for d in domains]
    rdir = run_dir(out, use_nullspace)
    store = StackStore(rdir)
    ns = replace(cfg.nullspace, enabled=use_nullspace)
    conf = cfg.to_dict()
    conf.pop("out_dir")
    run_meta = {"config": conf, "use_nullspace": use_nullspace}
    completed: list[str] = []
    forgetting = None
    if resume_run and store.exists():
        completed, pending = resume(store, model, names)
        manifest = store.read_manifest()
        if manifest.get("run") != run_meta:
            raise IncompatibilityError("run configuration differs from the manifest being resumed")
        forgetting = {m: ForgettingMatrix.from_dict(store.read_json(f"forgetting_{m}.json")) for m in ("ungated", "isolated")}
        log.info("resuming: %d domain(s) complete, next %s", len(completed), pending)
    else:
        if rdir.exists():
            shutil.rmtree(rdir)
        base_hash = _file_hash(out / BASE_FILE)
        manifest = empty_manifest(f"../{BASE_FILE}", base_hash, model.weights_fingerprint(), run_meta)
        store.write_manifest(manifest)

    pending_rounds: dict[str, list[dict]] = {}

    def on_freeze(spec: DomainSpec, m: int) -> None:
        pending_rounds.setdefault(spec.name, []).append(store.save_round(model, spec.name, m))

    result_holder = {}

    def on_domain_done(spec: DomainSpec, res: InnerResult, projectors) -> None:
        block = {
            "domain": spec.name,
            "position": spec.position,
            "baseline_loss": res.baseline_loss,
            "final_isolated_loss": res.final_isolated,
            "projector": None,
            "stacks": [],
        }
        if projectors:
            idx = names.index(spec.name)
            block["projector"] = store.save_projector_set(spec.name, projectors, derive_seed(cfg.seed, idx, 7), ns.k_per_domain * idx)
        for entry in pending_rounds.pop(spec.name):
            entry.update(_round_entry(res, entry["round"]))
            block["stacks"].append(entry)
        manifest["domains"].append(block)
        write_trace_csv(res.trace, rdir / "traces" / f"{spec.name}.csv")
        for mode, fm in result_holder["forgetting"].items():
            store.write_json(f"forgetting_{mode}.json", fm.to_dict())
        store.write_manifest(manifest)

    todo = domains if stop_after is None else domains[:stop_after]
    if forgetting is None:
        forgetting = {m: ForgettingMatrix(m, names) for m in ("ungated", "isolated")}
    result_holder["forgetting"] = forgetting
    res = outer_loop(
        model,
        todo,
        cfg.inner_cfg(),
        cfg.best,
        cfg.moe,
        ns,
        completed=completed,
        on_domain_done=on_domain_done,
        on_freeze=on_freeze,
        forgetting=forgetting,
    )
    if len(manifest["domains"]) == len(domains):
        store.write_json("expert_activation.json", expert_activation(model, domains))
        orth = orthogonality_data(store, manifest, model, domains, ns.n_samples)
        store.write_json("orthogonality.json", orth)
    return TrainOutcome(model, manifest, res.forgetting, rdir)


def _file_hash(path: Path) -> str:
    from .serialization import fnv1a64

    return fnv1a64(Path(path).read_bytes())


def load_trained(cfg: RunConfig, out: Path, use_nullspace: bool = True) -> tuple[BaseModel, dict, list[DomainSpec]]:
    out = Path(out)
    store = StackStore(run_dir(out, use_nullspace))
    if not store.exists():
        flag = "" if use_nullspace else " --ablate-nullspace"
        raise PrerequisiteError(f"no trained run in {store.root}; run `train{flag}` first")
    model = load_base(out)
    domains = build_domains(cfg)
    completed, pending = resume(store, model, [d.name for d in domains])
    if pending is not None:
        raise PrerequisiteError(f"run in {store.root} stopped before {pending}; run `train --resume` first")
    return model, store.read_manifest(), domains


def expert_activation(model: BaseModel, domains: list[DomainSpec]) -> list[dict]:
    """Mean gate per expert for every frozen stack on its own domain's val data."""
    rows = []
    saved = model.domain_weights()
    trained = model.frozen_domains()
    try:
        for spec in domains:
            if spec.name not in trained:
                continue
            model.set_domain_weights({d: (1.0 if d == spec.name else 0.0) for d in trained})
            model.set_probe(True)
            with ad.no_grad():
                for b in batches(spec.val, 32, model.cfg.max_seq_len):
                    model.forward(b.tokens, mode="eval", token_mask=b.valid)
            for layer in model.stacked_layers():
                for key, (total, n) in sorted(layer.probe.items()):
                    dom, _, rnd = key.partition("/")
                    if dom != spec.name:
                        continue
                    for e, v in enumerate(total / n):
                        rows.append({"domain": dom, "round": int(rnd), "site": layer.site_id, "expert": e, "mean_activation": float(v)})
    finally:
        model.set_probe(False)
        model.set_domain_weights(saved)
    return rows


def orthogonality_data(store: StackStore, manifest: dict, model: BaseModel, domains: list[DomainSpec], n_samples: int = 200) -> dict:
    """Cross-domain direction cosines, spectra, capacity and post-training leakage."""
    from .store import load_projectors

    projs = {}
    for block in manifest["domains"]:
        if block.get("projector"):
            projs[block["domain"]] = load_projectors(store.root / block["projector"]["file"], block["projector"]["hash"])
    report = orthogonality_report(projs).to_dict()
    # share of each protected domain's new stacks that falls inside its projector
    leakage = []
    names = [d.name for d in domains]
    for d, p in projs.items():
        idx = names.index(d)
        val = [b for spec in domains[:idx] for b in batches(spec.val, 32, model.cfg.max_seq_len)]
        only = {n: (1.0 if n == d else 0.0) for n in names}
        deltas = collect_deltas(model, val, n_samples, seed=derive_seed(idx, 9), weights=only)
        for site, dm in sorted(deltas.items()):
            if site in p:
                leakage.append({"domain": d, "site": site, "leakage": subspace_leakage(dm.D, p[site])})
    report["leakage"] = leakage
    return report


# ---------------------------------------------------------------------------
# oracle and router
# ---------------------------------------------------------------------------


def run_oracle(cfg: RunConfig, out: Path) -> dict[str, list[OracleTarget]]:
    model, manifest, domains = load_trained(cfg, out, True)
    rcfg = cfg.router_cfg()
    cache = Path(out) / "oracle"
    result = {}
    for split in ("train", "heldout"):
        samples = oracle_samples(cfg, domains, "train" if split == "train" else "val")
        result[split] = oracle_discover(model, samples, rcfg, cache_dir=cache)
        _dump(Path(out) / f"oracle_{split}.json", [t.to_dict() for t in result[split]])
    return result


def _load_targets(out: Path, split: str) -> list[OracleTarget]:
    return [OracleTarget.from_dict(d) for d in _load(Path(out) / f"oracle_{split}.json", "oracle")]


def run_train_router(cfg: RunConfig, out: Path) -> dict:
    out = Path(out)
    model, manifest, domains = load_trained(cfg, out, True)
    rcfg = cfg.router_cfg()
    train_t = _load_targets(out, "train")
    held_t = _load_targets(out, "heldout")
    feats = encode_prompts(model, [t.prompt for t in train_t], rcfg)
    res = train_router(feats, train_t, rcfg, model.cfg.d_model)
    path = out / "router.bin"
    h = res.net.save(path, meta={"best_epoch": res.best_epoch})
    held_f = encode_prompts(model, [t.prompt for t in held_t], rcfg)
    held_probs = res.net.predict(held_f)
    held = routing_stats(held_probs, held_t, rcfg)
    stats = {
        "router_file": "router.bin",
        "router_hash": h,
        "n_parameters": res.net.num_parameters(),
        "best_epoch": res.best_epoch,
        "best_composite": res.best_score,
        "history": res.history,
        "val": res.val_stats.to_dict(),
        "heldout": held.to_dict(),
        "heldout_predictions": [
            {"prompt_id": t.prompt_id, "label": t.label, "kind": t.kind, "probs": dict(zip(rcfg.domains, map(float, p))), "weights": route_weights(p, rcfg)}
            for t, p in zip(held_t, held_probs)
        ],
    }
    _dump(out / "routing_stats.json", stats)
    store = StackStore(run_dir(out, True))
    manifest = store.read_manifest()
    manifest["router"] = {"file": "../router.bin", "hash": h}
    store.write_manifest(manifest)
    return stats


def load_router(out: Path) -> RouterNet:
    stats = _load(Path(out) / "routing_stats.json", "train-router")
    return RouterNet.load(Path(out) / stats["router_file"], stats["router_hash"])


def sample_nll(model: BaseModel, sample: Sample, weights: dict[str, float]) -> tuple[float, int]:
    saved = model.domain_weights()
    model.set_domain_weights(weights)
    try:
        b = Batch.from_samples([sample], model.cfg.max_seq_len)
        with ad.no_grad():
            res = model.forward(b.tokens, mode="eval", token_mask=b.valid)
        logits = res.logits.data.astype(np.float64)
        m = logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
        tgt = np.take_along_axis(logits, b.targets[..., None], axis=-1)[..., 0]
        return float(((lse - tgt) * b.loss_mask).sum()), int(b.loss_mask.sum())
    finally:
        model.set_domain_weights(saved)


def run_eval(cfg: RunConfig, out: Path, modes=("ungated", "isolated", "routed")) -> dict:
    """Final-state losses per domain in each gating mode; routed uses the router per prompt."""
    out = Path(out)
    model, manifest, domains = load_trained(cfg, out, True)
    names = [d.name for d in domains]
    result = {"manifest": fingerprint(manifest), "modes": {}}
    if "ungated" in modes or "isolated" in modes:
        for mode in ("ungated", "isolated"):
            if mode not in modes:
                continue
            row = {}
            for spec in domains:
                val = batches(spec.val, 32, model.cfg.max_seq_len)
                from .training import evaluate

                row[spec.name] = evaluate(model, val, "ungated" if mode == "ungated" else ("isolated", spec.name))
            result["modes"][mode] = row
    if "routed" in modes:
        net = load_router(out)
        rcfg = net.cfg
        row, per_prompt = {}, []
        for spec in domains:
            feats = encode_prompts(model, [s.prompt for s in spec.val], rcfg)
            probs = net.predict(feats)
            tot, cnt = 0.0, 0
            for s, p in zip(spec.val, probs):
                w = route_weights(p, rcfg)
                nll, n = sample_nll(model, s, {d: w[d] for d in names})
                tot += nll
                cnt += n
                per_prompt.append({"prompt_id": s.uid, "domain": spec.name, "weights": w, "loss": nll / n})
            row[spec.name] = tot / cnt
        result["modes"]["routed"] = row
        result["routed_prompts"] = per_prompt
        result["cache"] = cache_session(cfg, out, net, model, domains)
    _dump(out / "eval.json", result)
    return result


def cache_session(cfg: RunConfig, out: Path, net: RouterNet, model: BaseModel, domains: list[DomainSpec], n_per_domain: int = 5) -> dict:
    """Lazy-load session over held-out prompts grouped by domain."""
    store = StackStore(run_dir(out, True))
    manifest = store.read_manifest()
    n_stacks = sum(len(b["stacks"]) for b in manifest["domains"])
    cache = StackCache(store, manifest, capacity=n_stacks)
    prompts = [s for spec in domains for s in spec.val[:n_per_domain]]
    feats = encode_prompts(model, [s.prompt for s in prompts], net.cfg)
    probs = net.predict(feats)
    fresh = load_base(out)
    for p in probs:
        cache.install(fresh, route_weights(p, net.cfg))
    return cache.report()


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate(cfg: RunConfig, out: Path, prompt: str, max_new: int = 48) -> tuple[str, dict[str, float], dict]:
    """Greedy decoding with router-selected stacks loaded lazily."""
    out = Path(out)
    net = load_router(out)
    store = StackStore(run_dir(out, True))
    manifest = store.read_manifest()
    model = load_base(out)
    weights = route_weights(net.predict([encode_prompts(model, [prompt], net.cfg)[0]])[0], net.cfg)
    cache = StackCache(store, manifest, capacity=sum(len(b["stacks"]) for b in manifest["domains"]))
    report = cache.install(model, weights)
    toks = [1] + encode_text(prompt) + [SEP]
    out_ids = []
    with ad.no_grad():
        for _ in range(max_new):
            if len(toks) >= model.cfg.max_seq_len:
                break
            logits = model.forward(np.array(toks), mode="eval").logits.data
            nxt = int(np.argmax(logits[-1]))
            if nxt == EOS:
                break
            toks.append(nxt)
            out_ids.append(nxt)
    from .data import decode

    return decode(out_ids), weights, asdict(report)


# ---------------------------------------------------------------------------
# MoE versus a parameter-matched single LoRA
# ---------------------------------------------------------------------------


def matched_single_rank(model: BaseModel, moe: MoEConfig) -> int:
    dims = [(l.d_in, l.d_out) for l in model.stacked_layers()]
    moe_total = sum(num_delta_parameters(moe, a, b) for a, b in dims)
    return max(1, int(round(moe_total / sum(a + b for a, b in dims))))


def single_lora_config(rank: int) -> MoEConfig:
    return MoEConfig(n_experts=1, top_k=1, rank=rank, aux_coeff=0.0)


def single_lora_parameters(model: BaseModel, rank: int) -> int:
    return sum(rank * (l.d_in + l.d_out) for l in model.stacked_layers())


def train_curve(model: BaseModel, spec: DomainSpec, moe: MoEConfig, steps: int, eval_interval: int, lr: float, batch_size: int, seed: int) -> list[dict]:
    """Fixed-length training of fresh deltas; val loss every ``eval_interval`` steps."""
    from .data import BatchSampler
    from .training import active_parameters

    for i, layer in enumerate(model.stacked_layers()):
        layer.add_active_stack(moe, derive_seed(seed, 100 + i))
    params = active_parameters(model)
    opt = AdamW(params, lr=lr, weight_decay=0.0, schedule=CosineSchedule(lr, max(steps, 1), lr * 0.1))
    sampler = BatchSampler(spec.train, batch_size, derive_seed(seed, 1), model.cfg.max_seq_len)
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, 2)))
    val = batches(spec.val, 32, model.cfg.max_seq_len)
    rows = [{"step": 0, "split": "val", "loss": mean_loss(model, val), "task_loss": math.nan}]
    try:
        for step in range(1, steps + 1):
            opt.zero_grad()
            total, task, aux = train_step_loss(model, sampler.next(), moe, rng)
            total.backward()
            opt.step()
            rows.append({"step": step, "split": "train", "loss": float(total.data), "task_loss": task})
            if step % eval_interval == 0 or step == steps:
                rows.append({"step": step, "split": "val", "loss": mean_loss(model, val), "task_loss": math.nan})
    finally:
        for layer in model.stacked_layers():
            layer.active = None
    return rows


def compare_lora(cfg: RunConfig, out: Path) -> dict:
    out = Path(out)
    domains = {d.name: d for d in build_domains(cfg)}
    spec = domains[cfg.lora.domain]
    model = load_base(out)
    rank = matched_single_rank(model, cfg.moe)
    moe_params = sum(num_delta_parameters(cfg.moe, l.d_in, l.d_out) for l in model.stacked_layers())
    single_params = single_lora_parameters(model, rank)
    common = dict(steps=cfg.lora.steps, eval_interval=cfg.lora.eval_interval, lr=cfg.inner.lr, batch_size=cfg.inner.batch_size, seed=derive_seed(cfg.seed, 77))
    moe_rows = train_curve(model, spec, cfg.moe, **common)
    single_rows = train_curve(model, spec, single_lora_config(rank), **common)
    mv = [r for r in moe_rows if r["split"] == "val"]
    sv = [r for r in single_rows if r["split"] == "val"]
    result = {
        "domain": spec.name,
        "moe_parameters": moe_params,
        "single_rank": rank,
        "single_parameters": single_params,
        "parameter_ratio": single_params / moe_params,
        "moe_final_val": mv[-1]["loss"],
        "single_final_val": sv[-1]["loss"],
        "moe_curve": moe_rows,
        "single_curve": single_rows,
    }
    _dump(out / "compare_lora.json", _nan_to_none(result))
    return result


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj

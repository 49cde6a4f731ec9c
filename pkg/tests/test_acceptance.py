"""The sixteen acceptance criteria, one test each, each printing a verdict line.

The full-scale fixtures train seeds 41-45 with and without null-space
projection on one shared base model (roughly 45 CPU minutes in total).  Set
``BRAINSTACKS_ACCEPT_DIR`` to keep those runs between sessions; artifacts found
there are reused as-is, so clear the directory after changing training code.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from brainstacks import autodiff as ad
from brainstacks import pipeline as P
from brainstacks.autodiff import Tensor
from brainstacks.config import RunConfig, quick_config
from brainstacks.data import batches
from brainstacks.errors import CorruptionError
from brainstacks.model import BaseModel, ModelConfig
from brainstacks.moe_lora import MoEConfig, RoutingRecord, aux_loss, delta_forward, init_delta, route
from brainstacks.nullspace import principal_angles_deg, project, randomized_svd
from brainstacks.reports import REPORT_KINDS, build_report, write_report
from brainstacks.router import RouterConfig, combo_key, combo_loss_table, combo_weights, exhaustive_discover, route_weights
from brainstacks.router import route as route_prompt
from brainstacks.store import StackCache, StackStore, fingerprint, load_projectors, load_stack, save_stack
from brainstacks.training import evaluate, per_sample_losses

from conftest import ACCEPTANCE_LINES

SEEDS = (41, 42, 43, 44, 45)
MAIN_SEED = 42
DOMAINS = ("format", "procedural", "arithmetic", "lookup")


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def work(tmp_path_factory) -> Path:
    env = os.environ.get("BRAINSTACKS_ACCEPT_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


def _trained(out: Path, ns: bool) -> bool:
    rdir = P.run_dir(out, ns)
    if not (rdir / "manifest.json").exists() or not (rdir / "expert_activation.json").exists():
        return False
    return len(json.loads((rdir / "manifest.json").read_text())["domains"]) == len(DOMAINS)


@pytest.fixture(scope="module")
def seed_runs(work) -> dict[int, tuple[RunConfig, Path]]:
    """Null-space and ablation runs for every seed on one pretrained base."""
    base_dir = work / "base"
    base_dir.mkdir(exist_ok=True)
    if not (base_dir / P.BASE_FILE).exists():
        P.pretrain(RunConfig(seed=MAIN_SEED, out_dir=str(base_dir)), base_dir)
    runs = {}
    for s in SEEDS:
        out = work / f"seed{s}"
        out.mkdir(exist_ok=True)
        if not (out / P.BASE_FILE).exists():
            shutil.copy(base_dir / P.BASE_FILE, out / P.BASE_FILE)
        cfg = RunConfig(seed=s, out_dir=str(out))
        for ns in (True, False):
            if not _trained(out, ns):
                P.train(cfg, out, use_nullspace=ns)
        runs[s] = (cfg, out)
    return runs


@pytest.fixture(scope="module")
def main_run(seed_runs) -> tuple[RunConfig, Path]:
    """Seed 42 carried through oracle, router, eval, LoRA comparison and reports."""
    cfg, out = seed_runs[MAIN_SEED]
    if not (out / "oracle_heldout.json").exists():
        P.run_oracle(cfg, out)
    if not (out / "routing_stats.json").exists():
        P.run_train_router(cfg, out)
    if not (out / "eval.json").exists():
        P.run_eval(cfg, out)
    if not (out / "compare_lora.json").exists():
        P.compare_lora(cfg, out)
    for kind in REPORT_KINDS:
        write_report(out, kind)
    return cfg, out


def _quick_pipeline(out: Path, seed: int = MAIN_SEED) -> RunConfig:
    cfg = quick_config(seed=seed, out_dir=str(out))
    if not (out / "reports" / "comparison.json").exists():
        out.mkdir(parents=True, exist_ok=True)
        P.pretrain(cfg, out)
        P.train(cfg, out, use_nullspace=True)
        P.train(cfg, out, use_nullspace=False)
        P.run_oracle(cfg, out)
        P.run_train_router(cfg, out)
        P.run_eval(cfg, out)
        P.compare_lora(cfg, out)
        for kind in REPORT_KINDS:
            write_report(out, kind)
    return cfg


def _manifest(out: Path, ns: bool = True) -> dict:
    return json.loads((P.run_dir(out, ns) / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# 1-6: building blocks
# ---------------------------------------------------------------------------


def test_01_identity_at_birth():
    t0 = time.perf_counter()
    model = BaseModel(ModelConfig())
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, model.cfg.vocab_size, size=(50, 24))
    before = model.forward(tokens, mode="eval").logits.data.copy()
    for i, layer in enumerate(model.stacked_layers()):
        layer.add_active_stack(MoEConfig(), 1000 + i)
    after = model.forward(tokens, mode="eval").logits.data
    after_train = model.forward(tokens, mode="train", rng=np.random.default_rng(1)).logits.data
    diff = max(float(np.abs(after - before).max()), float(np.abs(after_train - before).max()))
    secs = time.perf_counter() - t0
    verdict(1, "identity at birth", diff < 1e-6 and secs < 10, f"max |dlogits| = {diff:.2e} over 50 prompts, {secs:.1f}s")


def test_02_exact_k_gating():
    t0 = time.perf_counter()
    worst, rows = 0.0, 0
    ok = True
    for seed, (n, k) in enumerate([(4, 2), (4, 1), (8, 3), (6, 6)]):
        d = init_delta(MoEConfig(n_experts=n, top_k=k), 32, 8, seed)
        x = Tensor(np.random.default_rng(seed).standard_normal((2500, 32)).astype(np.float32))
        for mode in (False, True):
            g, _ = route(d, x, train_mode=mode, rng=np.random.default_rng(seed + 9))
            ok &= bool(np.all((g.data > 0).sum(axis=1) == k))
            worst = max(worst, float(np.abs(g.data.sum(axis=1) - 1.0).max()))
            rows += g.shape[0]
    secs = time.perf_counter() - t0
    verdict(2, "exact-K gating", ok and worst < 1e-6 and secs < 10, f"{rows} gate rows, row-sum error {worst:.1e}, {secs:.1f}s")


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def test_03_gradient_correctness():
    from conftest import numeric_grad

    t0 = time.perf_counter()
    worst = 0.0
    cfg = MoEConfig(n_experts=4, top_k=2, rank=3)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = init_delta(cfg, 6, 5, seed, dtype=np.float64)
        d.B.data = rng.standard_normal(d.B.shape)
        x = rng.standard_normal((7, 6))
        w = rng.standard_normal((7, 5))
        params = d.parameters()

        def loss_fn():
            out, rec = delta_forward(d, Tensor(x), train_mode=False)
            return ad.add(ad.sum_(ad.mul(out, Tensor(w))), ad.mul(aux_loss(rec, cfg), 0.1))

        for p in params:
            p.grad = None
        loss_fn().backward()
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad

            def f():
                with ad.no_grad():
                    return float(loss_fn().data)

            worst = max(worst, _rel_err(analytic, numeric_grad(f, p.data)))
    secs = time.perf_counter() - t0
    verdict(3, "gradient correctness", worst < 1e-4 and secs < 120, f"worst relative error {worst:.1e} over A, B, W_r, W_n on 20 seeds, {secs:.1f}s")


def test_04_aux_loss_anchors():
    n = 4
    uniform = RoutingRecord(Tensor(np.full(n, 1 / n)), np.full(n, 1 / n), np.full(n, 1 / n), 10)
    collapse = RoutingRecord(Tensor(np.eye(n)[0]), np.eye(n)[0], np.eye(n)[0], 10)
    cfg = MoEConfig(n_experts=n, top_k=1)
    u, c = aux_loss(uniform, cfg).item(), aux_loss(collapse, cfg).item()
    # the same anchors through real routing: zero router weights tie every logit
    d = init_delta(MoEConfig(n_experts=n, top_k=1), 8, 4, 0, dtype=np.float64)
    d.router_weight.data[:] = 0.0
    d.router_weight.data[:, 0] = 50.0
    _, rec = route(d, Tensor(np.abs(np.random.default_rng(0).standard_normal((64, 8))) + 0.1), train_mode=False)
    routed = aux_loss(rec, cfg).item()
    ok = abs(u - 1.0) < 1e-3 and abs(c - n) < 1e-3 and abs(routed - n) < 1e-3
    verdict(4, "aux loss anchors", ok, f"uniform {u:.6f}, collapse {c:.6f}, routed collapse {routed:.6f} (N={n})")


def test_05_projection_hard_constraint(main_run):
    cfg, out = main_run
    store = StackStore(P.run_dir(out, True))
    worst_dot, worst_idem, checked = 0.0, 0.0, 0
    rng = np.random.default_rng(5)
    model = P.load_base(out)
    layers = {l.site_id: l for l in model.stacked_layers()}
    for block in store.read_manifest()["domains"]:
        if not block["projector"]:
            continue
        projs = load_projectors(store.root / block["projector"]["file"], block["projector"]["hash"])
        stacks = store.load_domain_stacks(block)[0]
        by_site = {s.site: s for s in stacks}
        for site, pr in projs.items():
            layer = layers[site]
            delta = by_site[site].as_delta()
            x = Tensor(rng.standard_normal((1000, layer.d_in)).astype(np.float32))
            with ad.no_grad():
                raw, _ = delta_forward(delta, x, train_mode=False)
                dp = project(raw, pr)
            V = pr.V.astype(np.float64)
            worst_dot = max(worst_dot, float(np.abs(dp.data.astype(np.float64) @ V).max()))
            Pm = pr.P
            worst_idem = max(worst_idem, float(np.abs(Pm @ Pm - Pm).max()))
            checked += 1
    ok = checked > 0 and worst_dot < 1e-5 and worst_idem < 1e-5
    verdict(5, "projection hard constraint", ok, f"{checked} site projectors, max |delta_p . v| {worst_dot:.1e}, idempotence error {worst_idem:.1e}")


def test_06_randomized_svd_fidelity():
    t0 = time.perf_counter()
    worst_sv, worst_angle = 0.0, 0.0
    for seed, (n, h, k) in enumerate([(256, 64, 8), (200, 128, 16), (256, 256, 12), (120, 96, 4)]):
        rng = np.random.default_rng(seed)
        U, _ = np.linalg.qr(rng.standard_normal((n, min(n, h))))
        W, _ = np.linalg.qr(rng.standard_normal((h, min(n, h))))
        s = np.concatenate([np.linspace(20, 10, k), np.linspace(4.0, 0.01, min(n, h) - k)])
        D = (U * s) @ W.T
        V, sv = randomized_svd(D, k, seed=seed)
        _, s_ex, vt = np.linalg.svd(D, full_matrices=False)
        worst_sv = max(worst_sv, float(np.max(np.abs(sv - s_ex[:k]) / s_ex[:k])))
        worst_angle = max(worst_angle, float(principal_angles_deg(V, vt[:k].T).max()))
    secs = time.perf_counter() - t0
    ok = worst_sv < 0.01 and worst_angle < 2.0 and secs < 30
    verdict(6, "randomized SVD fidelity", ok, f"max singular value error {100 * worst_sv:.3f}%, max principal angle {worst_angle:.3f} deg, {secs:.1f}s")


# ---------------------------------------------------------------------------
# 7-12: training trends on the full runs
# ---------------------------------------------------------------------------


def test_07_zero_forgetting(main_run):
    cfg, out = main_run
    t0 = time.perf_counter()
    model, manifest, domains = P.load_trained(cfg, out, True)
    worst = 0.0
    for spec, block in zip(domains, manifest["domains"]):
        v = evaluate(model, batches(spec.val, 32, model.cfg.max_seq_len), ("isolated", spec.name))
        worst = max(worst, abs(v - block["final_isolated_loss"]))
    secs = time.perf_counter() - t0
    verdict(7, "zero forgetting", worst < 1e-6 and secs < 60, f"max |isolated - at-freeze| = {worst:.1e} over {len(domains)} domains, check {secs:.1f}s")


def test_08_residual_boosting(seed_runs):
    passing, detail = 0, []
    plateau_ok = True
    for s, (cfg, out) in seed_runs.items():
        wins = 0
        for block in _manifest(out)["domains"]:
            st = block["stacks"]
            for e in st:
                plateau_ok &= e["break_fired"] == (e["improvement"] < cfg.inner.min_loss_delta)
            plateau_ok &= all(not e["break_fired"] for e in st[:-1])
            if len(st) >= 2 and st[1]["boost_loss"] <= st[0]["boost_loss"]:
                wins += 1
        passing += wins >= 3
        detail.append(f"{s}:{wins}/4")
    ok = passing >= 3 and plateau_ok
    verdict(8, "residual boosting", ok, f"round 2 <= round 1 per seed {', '.join(detail)}; {passing}/5 seeds pass; plateau rule consistent={plateau_ok}")


def test_09_interference_and_recovery(main_run):
    cfg, out = main_run
    modes = json.loads((out / "eval.json").read_text())["modes"]
    ung, iso, rt = modes["ungated"], modes["isolated"], modes["routed"]
    interfered = sum(ung[d] >= iso[d] for d in DOMAINS)
    recovered = [d for d in DOMAINS if rt[d] <= ung[d]]
    ok = interfered >= 3 and len(recovered) == len(DOMAINS)
    cells = ", ".join(f"{d} u{ung[d]:.3f}/i{iso[d]:.3f}/r{rt[d]:.3f}" for d in DOMAINS)
    verdict(9, "interference and recovery", ok, f"ungated>=isolated on {interfered}/4, routed<=ungated on {len(recovered)}/4 ({cells})")


def test_10_nullspace_benefit(seed_runs):
    wins, detail = 0, []
    for s, (cfg, out) in seed_runs.items():
        sums = {}
        for ns in (True, False):
            fm = json.loads((P.run_dir(out, ns) / "forgetting_ungated.json").read_text())
            sums[ns] = float(sum(fm["cells"][-1]))
        wins += sums[True] <= sums[False]
        detail.append(f"{s}: {sums[True]:.3f} vs {sums[False]:.3f}")
    rep = build_report(seed_runs[MAIN_SEED][1], "comparison")
    per_domain = [r for r in rep.rows if r["table"] == "nullspace" and r["mode"] == "ungated"]
    ok = wins >= 3 and len(per_domain) == len(DOMAINS)
    verdict(10, "null-space benefit", ok, f"ungated sum with <= without on {wins}/5 seeds ({'; '.join(detail)})")


def test_11_expert_utilization(main_run):
    cfg, out = main_run
    rows = json.loads((P.run_dir(out, True) / "expert_activation.json").read_text())
    sites: dict[tuple, list[float]] = {}
    for r in rows:
        sites.setdefault((r["domain"], r["round"], r["site"]), []).append(r["mean_activation"])
    chat = cfg.router.chat_domain
    bad = {d: 0 for d in DOMAINS}
    total = {d: 0 for d in DOMAINS}
    lo, hi = 1.0, 0.0
    for (d, _, _), v in sites.items():
        total[d] += 1
        bad[d] += any(a < 0.15 or a > 0.35 for a in v)
        if d == chat:
            lo, hi = min(lo, min(v)), max(hi, max(v))
    ok = total[chat] > 0 and bad[chat] == 0
    others = ", ".join(f"{d} {bad[d]}/{total[d]}" for d in DOMAINS if d != chat)
    verdict(11, "expert utilization", ok, f"{chat} stacks: {bad[chat]}/{total[chat]} sites outside [0.15, 0.35], range {lo:.3f}-{hi:.3f}; other domains out of range: {others}")


def test_12_moe_vs_single_lora(main_run):
    cfg, out = main_run
    c = json.loads((out / "compare_lora.json").read_text())
    moe = {r["step"]: r["loss"] for r in c["moe_curve"] if r["split"] == "val"}
    single = {r["step"]: r["loss"] for r in c["single_curve"] if r["split"] == "val"}
    steps = sorted(set(moe) & set(single))
    worst = max(moe[s] - single[s] for s in steps)
    ratio = c["parameter_ratio"]
    ok = abs(ratio - 1.0) <= 0.10 and worst <= 0.02
    verdict(12, "MoE vs single LoRA", ok, f"parameter ratio {ratio:.3f} (rank {c['single_rank']}), max (MoE - single) val gap {worst:+.4f} over {len(steps)} matched steps, final {c['moe_final_val']:.4f} vs {c['single_final_val']:.4f}")


# ---------------------------------------------------------------------------
# 13-16: routing, storage, determinism
# ---------------------------------------------------------------------------


def test_13_oracle_soundness(main_run):
    cfg, out = main_run
    model, manifest, domains = P.load_trained(cfg, out, True)
    names = [d.name for d in domains]
    worst_replay, worst_gap, n_ex = 0.0, 0.0, 0
    for split, pool in (("train", "train"), ("heldout", "val")):
        samples = P.oracle_samples(cfg, domains, pool)
        targets = P._load_targets(out, split)
        assert [t.prompt_id for t in targets] == [s.uid for s in samples]
        by_combo: dict[str, list[int]] = {}
        for i, t in enumerate(targets):
            by_combo.setdefault(combo_key(t.discovered), []).append(i)
        for key, idx in by_combo.items():
            combo = [] if key == "-" else key.split("+")
            got = per_sample_losses(model, [samples[i] for i in idx], combo_weights(combo, names))
            worst_replay = max(worst_replay, max(abs(g - targets[i].best_loss) for g, i in zip(got, idx)))
        if split == "train":
            sub = samples[:100]
            table = combo_loss_table(model, sub, names)
            for i, t in enumerate(targets[:100]):
                _, ex = exhaustive_discover({k: float(v[i]) for k, v in table.items()}, names)
                worst_gap = max(worst_gap, t.best_loss - ex)
                n_ex += 1
    ok = worst_replay < 1e-5 and worst_gap <= 0.02 and n_ex == 100
    verdict(13, "oracle soundness", ok, f"replay error {worst_replay:.1e}; greedy - exhaustive <= {worst_gap:.4f} on {n_ex} samples")


def test_14_router_quality(main_run):
    cfg, out = main_run
    stats = json.loads((out / "routing_stats.json").read_text())
    top1 = stats["heldout"]["single_top1"]
    rc = RouterConfig(domains=("chat", "code", "math", "medical"), chat_domain="chat")
    floor = route_weights([0.05, 0.5, 0.5, 0.5], rc)["chat"] == 0.20
    gate = route_weights([0.5, 0.11, 0.12, 0.3], rc) == {"chat": 0.5, "code": 0.0, "math": 0.12, "medical": 0.3}
    three = route_weights([0.59, 0.0, 1.0, 1.0], rc)
    composes = three == {"chat": 0.59, "code": 0.0, "math": 1.0, "medical": 1.0}
    cross = 0
    for split in ("train", "heldout"):
        for t in P._load_targets(out, split):
            if t.label == "lookup" and t.kind == "single" and "dose" in t.prompt and t.discovered and "lookup" not in t.discovered:
                cross += 1
    ok = top1 >= 0.90 and floor and gate and composes and cross >= 1
    verdict(14, "router quality", ok, f"held-out single top-1 {top1:.3f}; chat floor {floor}; gate threshold {gate and composes}; dosage prompts routed away from lookup: {cross}")


def test_15_store_and_cache(main_run, work):
    cfg, out = main_run
    store = StackStore(P.run_dir(out, True))
    manifest = store.read_manifest()
    block = manifest["domains"][1]
    stacks = store.load_domain_stacks(block)[0]
    tmp = work / "store_check"
    tmp.mkdir(exist_ok=True)
    h, _ = save_stack(stacks, tmp / "s.bin")
    again = load_stack(tmp / "s.bin", h)
    exact = all(np.array_equal(a.arrays()[k], b.arrays()[k]) for a, b in zip(stacks, again) for k in a.arrays())
    raw = bytearray((tmp / "s.bin").read_bytes())
    detected = 0
    for pos in (len(raw) // 3, len(raw) - 1):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        (tmp / "bad.bin").write_bytes(bytes(bad))
        try:
            load_stack(tmp / "bad.bin", h)
        except CorruptionError:
            detected += 1
    # consecutive same-domain prompts: the second loads nothing
    net = P.load_router(out)
    model = P.load_base(out)
    arith = [s for s in P.build_domains(cfg) if s.name == "arithmetic"][0].val[:2]
    cache = StackCache(store, manifest, capacity=sum(len(b["stacks"]) for b in manifest["domains"]))
    loads = []
    for s in arith:
        w = route_prompt(net, model, s.prompt)
        loads.append(len(cache.install(model, w).loaded))
    # interrupted then resumed run against an uninterrupted one
    ref_dir = work / "quick_a"
    _quick_pipeline(ref_dir)
    res_dir = work / "quick_resume"
    if res_dir.exists():
        shutil.rmtree(res_dir)
    res_dir.mkdir()
    shutil.copy(ref_dir / P.BASE_FILE, res_dir / P.BASE_FILE)
    qcfg = quick_config(seed=MAIN_SEED, out_dir=str(res_dir))
    P.train(qcfg, res_dir, use_nullspace=True, stop_after=2)
    P.train(qcfg, res_dir, use_nullspace=True, resume_run=True)
    # the reference later gained a router entry from train-router
    trained = [{k: v for k, v in _manifest(d).items() if k != "router"} for d in (res_dir, ref_dir)]
    same = fingerprint(trained[0]) == fingerprint(trained[1])
    ok = exact and detected == 2 and loads[0] > 0 and loads[1] == 0 and same
    verdict(15, "store and cache", ok, f"roundtrip bit-exact {exact}; corruptions detected {detected}/2; loads per prompt {loads}; resumed manifest matches {same}")


def test_16_end_to_end_determinism(work):
    a, b = work / "quick_a", work / "quick_b"
    _quick_pipeline(a)
    if b.exists():
        shutil.rmtree(b)
    _quick_pipeline(b)
    same_manifest = all(fingerprint(_manifest(a, ns)) == fingerprint(_manifest(b, ns)) for ns in (True, False))
    diff = [k for k in REPORT_KINDS if (a / "reports" / f"{k}.json").read_bytes() != (b / "reports" / f"{k}.json").read_bytes()]
    ok = same_manifest and not diff
    verdict(16, "end-to-end determinism", ok, f"manifests identical {same_manifest}; reports differing: {diff or 'none'} of {len(REPORT_KINDS)}")

"""Plot-ready report tables built only from files a run already wrote."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import PrerequisiteError
from .serialization import atomic_write
from .store import StackStore, fingerprint, strip_volatile

REPORT_KINDS = (
    "loss_curve",
    "forgetting_matrix",
    "expert_heatmap",
    "orthogonality",
    "routing_stats",
    "cache_stats",
    "comparison",
)


@dataclass
class Report:
    kind: str
    rows: list[dict]
    metadata: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "source": self.source, "metadata": self.metadata, "rows": self.rows}

    def to_csv(self) -> str:
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
        return buf.getvalue()


def _cell(v):
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def _read_json(path: Path, command: str):
    if not path.exists():
        raise PrerequisiteError(f"{path} is missing; run `{command}` first")
    return json.loads(path.read_text())


def _source(out: Path, run: str = "ns") -> dict:
    store = StackStore(out / run)
    if not store.exists():
        flag = "" if run == "ns" else " --ablate-nullspace"
        raise PrerequisiteError(f"no manifest in {store.root}; run `train{flag}` first")
    return {"run": run, "manifest": str(store.manifest_path.relative_to(out)), "manifest_fingerprint": fingerprint(store.read_manifest())}


def _num(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def loss_curve(out: Path) -> Report:
    rows = []
    runs = [r for r in ("ns", "nons") if (out / r / "manifest.json").exists()]
    if not runs:
        raise PrerequisiteError(f"no trained run under {out}; run `train` first")
    for run in runs:
        for path in sorted((out / run / "traces").glob("*.csv")):
            with path.open() as fh:
                for r in csv.DictReader(fh):
                    rows.append({"run": run, **{k: (v if k in ("split", "domain") else _num(v)) for k, v in r.items()}})
    return Report("loss_curve", rows, {"runs": runs}, _source(out, runs[0]))


def forgetting_matrix(out: Path, run: str = "ns") -> Report:
    src = _source(out, run)
    rows = []
    for mode in ("ungated", "isolated"):
        fm = _read_json(out / run / f"forgetting_{mode}.json", "train")
        for after, cells in zip(fm["rows"], fm["cells"]):
            for domain, v in zip(fm["cols"], cells):
                rows.append({"mode": mode, "after": after, "domain": domain, "val_loss": v})
    meta = {}
    ev = out / "eval.json"
    if run == "ns" and ev.exists():
        e = json.loads(ev.read_text())
        last = fm["rows"][-1]
        for domain, v in e["modes"].get("routed", {}).items():
            rows.append({"mode": "routed", "after": last, "domain": domain, "val_loss": v})
        meta["final_state"] = e["modes"]
    return Report("forgetting_matrix", rows, meta, src)


def expert_heatmap(out: Path, run: str = "ns") -> Report:
    src = _source(out, run)
    rows = _read_json(out / run / "expert_activation.json", "train")
    vals = [r["mean_activation"] for r in rows]
    meta = {"min": min(vals), "max": max(vals)} if vals else {}
    return Report("expert_heatmap", rows, meta, src)


def orthogonality(out: Path) -> Report:
    src = _source(out, "ns")
    o = _read_json(out / "ns" / "orthogonality.json", "train")
    rows = [{"table": "cross", **r} for r in o["cross"]] + [{"table": "leakage", **r} for r in o["leakage"]]
    return Report("orthogonality", rows, {"capacity": o["capacity"], "spectra": o["spectra"]}, src)


def routing_stats(out: Path) -> Report:
    src = _source(out, "ns")
    s = _read_json(out / "routing_stats.json", "train-router")
    meta = {k: s[k] for k in ("router_hash", "n_parameters", "best_epoch", "best_composite", "val", "heldout", "history")}
    return Report("routing_stats", s["heldout_predictions"], meta, src)


def cache_stats(out: Path) -> Report:
    src = _source(out, "ns")
    c = _read_json(out / "eval.json", "eval --mode routed").get("cache")
    if c is None:
        raise PrerequisiteError("eval.json has no cache session; run `eval --mode routed` first")
    meta = {k: c[k] for k in ("hits", "misses", "hit_rate", "evictions")}
    return Report("cache_stats", c["timeline"], meta, src)


def comparison(out: Path) -> Report:
    """Null-space on/off deltas per domain, plus the MoE vs single LoRA curves when present."""
    rows = []
    meta = {}
    have_ns = all((out / r / "forgetting_ungated.json").exists() for r in ("ns", "nons"))
    lora = out / "compare_lora.json"
    if not have_ns and not lora.exists():
        raise PrerequisiteError("nothing to compare; run `train --ablate-nullspace` or `compare-lora` first")
    src = _source(out, "ns") if have_ns else {"run": None, "manifest": None, "manifest_fingerprint": None}
    if have_ns:
        src["paired_manifest_fingerprint"] = _source(out, "nons")["manifest_fingerprint"]
        tot = {"ns": 0.0, "nons": 0.0}
        for mode in ("ungated", "isolated"):
            final = {}
            for run in ("ns", "nons"):
                fm = json.loads((out / run / f"forgetting_{mode}.json").read_text())
                final[run] = dict(zip(fm["cols"], fm["cells"][-1]))
            for d in final["ns"]:
                a, b = final["nons"][d], final["ns"][d]
                rows.append({"table": "nullspace", "mode": mode, "domain": d, "no_nullspace": a, "nullspace": b, "delta": b - a})
                if mode == "ungated":
                    tot["ns"] += b
                    tot["nons"] += a
        meta["nullspace_ungated_sum"] = tot
    if lora.exists():
        c = json.loads(lora.read_text())
        moe = {r["step"]: r["loss"] for r in c["moe_curve"] if r["split"] == "val"}
        single = {r["step"]: r["loss"] for r in c["single_curve"] if r["split"] == "val"}
        for step in sorted(moe):
            rows.append({"table": "lora", "step": step, "moe_val": moe[step], "single_val": single.get(step), "delta": moe[step] - single.get(step, float("nan"))})
        meta["lora"] = {k: c[k] for k in ("domain", "moe_parameters", "single_rank", "single_parameters", "parameter_ratio", "moe_final_val", "single_final_val")}
        meta["lora"]["train_curves"] = {
            "moe": [{k: r[k] for k in ("step", "loss", "task_loss")} for r in c["moe_curve"] if r["split"] == "train"],
            "single": [{k: r[k] for k in ("step", "loss", "task_loss")} for r in c["single_curve"] if r["split"] == "train"],
        }
    return Report("comparison", rows, meta, src)


_BUILDERS = {
    "loss_curve": loss_curve,
    "forgetting_matrix": forgetting_matrix,
    "expert_heatmap": expert_heatmap,
    "orthogonality": orthogonality,
    "routing_stats": routing_stats,
    "cache_stats": cache_stats,
    "comparison": comparison,
}


def build_report(out: str | Path, kind: str) -> Report:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown report kind {kind!r}; choose from {', '.join(REPORT_KINDS)}")
    rep = _BUILDERS[kind](Path(out))
    rep.rows = strip_volatile(rep.rows)
    rep.metadata = strip_volatile(rep.metadata)
    return rep


def write_report(out: str | Path, kind: str) -> tuple[Path, Path]:
    """Write ``reports/{kind}.json`` and ``reports/{kind}.csv``."""
    rep = build_report(out, kind)
    base = Path(out) / "reports" / kind
    jpath, cpath = base.with_suffix(".json"), base.with_suffix(".csv")
    atomic_write(jpath, json.dumps(rep.to_dict(), indent=2, sort_keys=True).encode("utf-8"))
    atomic_write(cpath, rep.to_csv().encode("utf-8"))
    return jpath, cpath

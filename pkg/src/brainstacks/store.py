"""Stack, projector and manifest persistence plus the lazy stack cache."""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IncompatibilityError, StorageError
from .moe_lora import MoEConfig
from .nullspace import Projector, build_projector
from .serialization import atomic_write, fnv1a64, read_blob, write_blob
from .stacked import FrozenStack

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STACK_VERSION = 1
PROJECTOR_VERSION = 1
VOLATILE_KEYS = frozenset({"wall_seconds", "created_at", "load_seconds", "mean_load_seconds"})
_PARTS = ("A", "B", "W_r", "W_n")


# ---------------------------------------------------------------------------
# stack and projector files
# ---------------------------------------------------------------------------


def save_stack(stacks: list[FrozenStack], path: str | Path) -> tuple[str, int]:
    """Write one domain round (a frozen stack per site) to a single file.

    Returns the content hash and byte size of the file.
    """
    if not stacks:
        raise ValueError("no stacks to save")
    first = stacks[0]
    if any(s.domain != first.domain or s.round_index != first.round_index for s in stacks):
        raise ValueError("a stack file holds exactly one domain round")
    named = []
    sites = []
    for s in stacks:
        arrays = s.arrays()
        sites.append({"site": s.site, "shapes": {k: list(arrays[k].shape) for k in _PARTS}})
        named += [(f"{s.site}.{k}", arrays[k]) for k in _PARTS]
    header = {
        "kind": "stack",
        "format_version": STACK_VERSION,
        "domain": first.domain,
        "round": first.round_index,
        "moe": first.config.to_dict(),
        "scale": first.config.scale,
        "sites": sites,
    }
    h = write_blob(path, header, named)
    return h, Path(path).stat().st_size


def load_stack(
    path: str | Path, expected_hash: str | None = None, projectors: dict[str, Projector] | None = None
) -> list[FrozenStack]:
    """Read a stack file; the hash is verified before anything is built."""
    header, arrays = read_blob(path, expected_hash)
    if header.get("kind") != "stack" or header.get("format_version") != STACK_VERSION:
        raise FormatError(f"{path}: not a stack file of version {STACK_VERSION}")
    cfg = MoEConfig.from_dict(header["moe"])
    out = []
    for entry in header["sites"]:
        site = entry["site"]
        parts = {}
        for k in _PARTS:
            arr = arrays.get(f"{site}.{k}")
            if arr is None or list(arr.shape) != entry["shapes"][k]:
                raise FormatError(f"{path}: tensor {site}.{k} missing or mis-shaped")
            parts[k] = arr
        proj = None if projectors is None else projectors.get(site)
        out.append(FrozenStack(site, header["domain"], int(header["round"]), cfg, parts, projector=proj))
    return out


def save_projectors(projectors: dict[str, Projector], path: str | Path, seed: int, k_dirs: int) -> tuple[str, int]:
    sites = sorted(projectors)
    header = {
        "kind": "projector",
        "format_version": PROJECTOR_VERSION,
        "sites": sites,
        "k_dirs": k_dirs,
        "n_samples": {s: projectors[s].n_samples for s in sites},
        "seed": seed,
    }
    named = []
    for s in sites:
        named += [(f"{s}.V", projectors[s].V), (f"{s}.sv", projectors[s].singular_values)]
    h = write_blob(path, header, named)
    return h, Path(path).stat().st_size


def load_projectors(path: str | Path, expected_hash: str | None = None) -> dict[str, Projector]:
    header, arrays = read_blob(path, expected_hash)
    if header.get("kind") != "projector" or header.get("format_version") != PROJECTOR_VERSION:
        raise FormatError(f"{path}: not a projector file of version {PROJECTOR_VERSION}")
    out = {}
    for s in header["sites"]:
        out[s] = build_projector(arrays[f"{s}.V"], site=s, singular_values=arrays[f"{s}.sv"], n_samples=header["n_samples"][s])
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def empty_manifest(base_file: str, base_hash: str, base_fingerprint: str, run: dict | None = None) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "base_model": {"file": base_file, "hash": base_hash, "weights_fingerprint": base_fingerprint},
        "domains": [],
        "router": None,
        "run": run or {},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "marginal_stack_policy": "freeze_then_check",
    }


def strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def fingerprint(obj) -> str:
    """Hash of a JSON document with timing fields removed."""
    return fnv1a64(json.dumps(strip_volatile(obj), sort_keys=True).encode("utf-8"))


class StackStore:
    """A run directory holding the manifest, stack and projector files."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def stack_file(self, domain: str, round_index: int) -> str:
        return f"stacks/{domain}_r{round_index}.bin"

    def projector_file(self, domain: str) -> str:
        return f"projectors/{domain}.bin"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def read_manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise StorageError(f"no manifest at {self.manifest_path}")
        try:
            m = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{self.manifest_path}: unreadable manifest ({exc})") from exc
        if m.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"{self.manifest_path}: unsupported manifest version {m.get('format_version')}")
        return m

    def write_manifest(self, manifest: dict) -> None:
        atomic_write(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))

    def write_json(self, name: str, obj) -> None:
        atomic_write(self.root / name, json.dumps(obj, indent=2, sort_keys=True).encode("utf-8"))

    def read_json(self, name: str):
        return json.loads((self.root / name).read_text())

    # -- writing during training -------------------------------------
    def save_round(self, model, domain: str, round_index: int) -> dict:
        stacks = [layer.frozen[-1] for layer in model.stacked_layers()]
        if any(s.domain != domain or s.round_index != round_index for s in stacks):
            raise StorageError(f"model's newest frozen stacks are not {domain}/{round_index}")
        rel = self.stack_file(domain, round_index)
        h, size = save_stack(stacks, self.root / rel)
        return {"round": round_index, "file": rel, "bytes": size, "hash": h}

    def save_projector_set(self, domain: str, projectors: dict[str, Projector], seed: int, k_dirs: int) -> dict:
        rel = self.projector_file(domain)
        h, size = save_projectors(projectors, self.root / rel, seed, k_dirs)
        return {"file": rel, "hash": h, "bytes": size, "k_dirs": k_dirs}

    # -- reading -------------------------------------------------------
    def load_domain_stacks(self, block: dict) -> list[list[FrozenStack]]:
        """All rounds of one domain block, each a per-site stack list."""
        projectors = None
        if block.get("projector"):
            p = block["projector"]
            projectors = load_projectors(self.root / p["file"], p["hash"])
        rounds = []
        for entry in block["stacks"]:
            path = self.root / entry["file"]
            if not path.exists():
                raise StorageError(f"missing stack file for {block['domain']}/{entry['round']}: {path}")
            rounds.append(load_stack(path, entry["hash"], projectors))
        return rounds


def install_round(model, stacks: list[FrozenStack]) -> None:
    by_site = {s.site: s for s in stacks}
    for layer in model.stacked_layers():
        if layer.site_id not in by_site:
            raise FormatError(f"stack file lacks site {layer.site_id}")
        s = by_site[layer.site_id]
        if (s.d_in, s.d_out) != (layer.d_in, layer.d_out):
            raise FormatError(f"stack {s.stack_id} at {s.site} has shape {(s.d_in, s.d_out)}, site is {(layer.d_in, layer.d_out)}")
        layer.frozen.append(s)


def resume(store: StackStore, model, curriculum: list[str]) -> tuple[list[str], str | None]:
    """Install every recorded stack; returns (completed domains, next pending)."""
    manifest = store.read_manifest()
    base = manifest["base_model"]
    if base.get("weights_fingerprint") != model.weights_fingerprint():
        raise IncompatibilityError("base model weights do not match the manifest's base model")
    if any(layer.frozen for layer in model.stacked_layers()):
        raise StorageError("resume needs a model without frozen stacks")
    completed = []
    for block in manifest["domains"]:
        for stacks in store.load_domain_stacks(block):
            install_round(model, stacks)
        completed.append(block["domain"])
    if completed != curriculum[: len(completed)]:
        raise IncompatibilityError(f"manifest domains {completed} are not a prefix of the curriculum {curriculum}")
    pending = curriculum[len(completed)] if len(completed) < len(curriculum) else None
    return completed, pending


# ---------------------------------------------------------------------------
# lazy loading
# ---------------------------------------------------------------------------


@dataclass
class LoadReport:
    requested: list[str]
    loaded: list[str]
    hits: int
    misses: int
    load_seconds: float
    evicted: list[str]


@dataclass
class StackCache:
    """LRU cache of domain rounds loaded from a run directory."""

    store: StackStore
    manifest: dict
    capacity: int = 8
    hits: int = 0
    misses: int = 0
    load_times: list[float] = field(default_factory=list)
    eviction_log: list[str] = field(default_factory=list)
    timeline: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.resident: OrderedDict[str, list[FrozenStack]] = OrderedDict()
        self._projectors: dict[str, dict[str, Projector] | None] = {}

    def _block(self, domain: str) -> dict:
        for b in self.manifest["domains"]:
            if b["domain"] == domain:
                return b
        raise StorageError(f"domain {domain!r} is not in the manifest")

    def _load(self, domain: str, entry: dict) -> list[FrozenStack]:
        block = self._block(domain)
        if domain not in self._projectors:
            p = block.get("projector")
            self._projectors[domain] = load_projectors(self.store.root / p["file"], p["hash"]) if p else None
        path = self.store.root / entry["file"]
        if not path.exists():
            raise StorageError(f"missing stack file for {domain}/{entry['round']}: {path}")
        return load_stack(path, entry["hash"], self._projectors[domain])

    def request(self, weights: dict[str, float]) -> LoadReport:
        """Make every round of each positively weighted domain resident."""
        wanted = [b["domain"] for b in self.manifest["domains"] if weights.get(b["domain"], 0.0) > 0.0]
        keys = [(d, e) for d in wanted for e in self._block(d)["stacks"]]
        hits = misses = 0
        loaded, evicted = [], []
        seconds = 0.0
        for d, entry in keys:
            key = f"{d}/{entry['round']}"
            if key in self.resident:
                self.resident.move_to_end(key)
                hits += 1
                continue
            t0 = time.perf_counter()
            self.resident[key] = self._load(d, entry)
            dt = time.perf_counter() - t0
            seconds += dt
            self.load_times.append(dt)
            misses += 1
            loaded.append(key)
        needed = {f"{d}/{e['round']}" for d, e in keys}
        while len(self.resident) > self.capacity:
            victim = next((k for k in self.resident if k not in needed), None)
            if victim is None:
                raise StorageError(f"cache capacity {self.capacity} is below the {len(needed)} stacks one prompt needs")
            del self.resident[victim]
            evicted.append(victim)
            self.eviction_log.append(victim)
            log.info("evicted %s (LRU)", victim)
        self.hits += hits
        self.misses += misses
        self.timeline.append(
            {"request": len(self.timeline), "domains": wanted, "hits": hits, "misses": misses, "load_seconds": seconds, "resident": list(self.resident)}
        )
        return LoadReport(wanted, loaded, hits, misses, seconds, evicted)

    def install(self, model, weights: dict[str, float]) -> LoadReport:
        """Load what ``weights`` needs and compose exactly those stacks into ``model``."""
        report = self.request(weights)
        for layer in model.stacked_layers():
            layer.frozen = []
        order = [b["domain"] for b in self.manifest["domains"]]
        for d in order:
            if weights.get(d, 0.0) <= 0.0:
                continue
            for e in self._block(d)["stacks"]:
                install_round(model, self.resident[f"{d}/{e['round']}"])
        model.set_domain_weights({d: float(w) for d, w in weights.items() if w > 0.0})
        return report

    def report(self) -> dict:
        return cache_report(self)


def cache_report(cache: StackCache) -> dict:
    total = cache.hits + cache.misses
    if total == 0:
        raise ValueError("cache has served no requests")
    return {
        "hits": cache.hits,
        "misses": cache.misses,
        "hit_rate": cache.hits / total,
        "mean_load_seconds": float(np.mean(cache.load_times)) if cache.load_times else 0.0,
        "evictions": list(cache.eviction_log),
        "timeline": copy.deepcopy(cache.timeline),
    }

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstacks.errors import CorruptionError, FormatError, IncompatibilityError, StorageError
from brainstacks.model import BaseModel
from brainstacks.moe_lora import MoEConfig
from brainstacks.serialization import decode_blob, encode_blob, fnv1a64
from brainstacks.store import (
    StackCache,
    StackStore,
    cache_report,
    empty_manifest,
    fingerprint,
    load_stack,
    resume,
    save_stack,
)

from conftest import TINY

MOE = MoEConfig(rank=2)
DOMS = ["format", "procedural", "arithmetic", "lookup"]


def train_fake_round(model, domain, m, seed):
    for i, layer in enumerate(model.stacked_layers()):
        d = layer.add_active_stack(MOE, seed * 100 + i)
        d.B.data = np.random.default_rng(seed * 100 + i).standard_normal(d.B.shape).astype(np.float32) * 0.1
        layer.freeze_active(domain, m)


@pytest.fixture
def run(tmp_path):
    """A run directory with three domains of two rounds each."""
    model = BaseModel(TINY)
    store = StackStore(tmp_path / "run")
    manifest = empty_manifest("base.bin", "0", model.weights_fingerprint())
    for j, dom in enumerate(DOMS[:3]):
        block = {"domain": dom, "position": j, "projector": None, "stacks": []}
        for m in (1, 2):
            train_fake_round(model, dom, m, 10 * j + m)
            block["stacks"].append(store.save_round(model, dom, m))
        manifest["domains"].append(block)
    store.write_manifest(manifest)
    return model, store, manifest


def test_fnv_reference_values():
    assert fnv1a64(b"") == "cbf29ce484222325"
    assert fnv1a64(b"a") == "af63dc4c8601ec8c"


@given(st.dictionaries(st.text(max_size=5), st.integers()), st.lists(st.integers(1, 4), min_size=1, max_size=3))
@settings(max_examples=25)
def test_blob_roundtrip(header, shape):
    arr = np.arange(int(np.prod(shape)), dtype=np.float32).reshape(shape)
    header = {f"k_{k}": v for k, v in header.items()}
    h, arrays = decode_blob(encode_blob(header, [("x", arr)]))
    assert {k: h[k] for k in header} == header and np.array_equal(arrays["x"], arr)


def test_save_load_save_is_byte_identical(run, tmp_path):
    model, store, manifest = run
    entry = manifest["domains"][0]["stacks"][0]
    stacks = load_stack(store.root / entry["file"], entry["hash"])
    h2, _ = save_stack(stacks, tmp_path / "again.bin")
    assert h2 == entry["hash"]
    assert (tmp_path / "again.bin").read_bytes() == (store.root / entry["file"]).read_bytes()
    orig = [layer.frozen[0] for layer in model.stacked_layers()]
    assert [s.param_hash() for s in stacks] == [s.param_hash() for s in orig]


@pytest.mark.parametrize("offset", [0, 20, -1, -100])
def test_single_byte_corruption_is_detected(run, offset):
    _, store, manifest = run
    entry = manifest["domains"][1]["stacks"][1]
    path = store.root / entry["file"]
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_stack(path, entry["hash"])


def test_truncated_file_is_rejected(run):
    _, store, manifest = run
    path = store.root / manifest["domains"][0]["stacks"][0]["file"]
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CorruptionError):
        load_stack(path)


def test_mixed_rounds_cannot_share_a_file(run, tmp_path):
    model, _, _ = run
    layer = model.stacked_layers()[0]
    with pytest.raises(ValueError):
        save_stack([layer.frozen[0], layer.frozen[1]], tmp_path / "x.bin")


def test_resume_prefixes():
    model = BaseModel(TINY)
    store = StackStore("/nonexistent")
    store.read_manifest = lambda: empty_manifest("b", "0", model.weights_fingerprint())
    assert resume(store, model, DOMS) == ([], "format")


def test_resume_full_and_partial(run):
    model, store, manifest = run
    fresh = BaseModel(TINY)
    done, pending = resume(store, fresh, DOMS)
    assert done == DOMS[:3] and pending == "lookup"
    toks = np.random.default_rng(0).integers(1, 128, size=(2, 10))
    assert np.array_equal(fresh.forward(toks).logits.data, model.forward(toks).logits.data)
    with pytest.raises(IncompatibilityError):
        resume(store, BaseModel(TINY), ["procedural", "format", "arithmetic", "lookup"])
    with pytest.raises(StorageError):
        resume(store, fresh, DOMS)


def test_resume_rejects_other_base(run):
    _, store, _ = run
    other = BaseModel(TINY.__class__(**{**TINY.__dict__, "seed": 99}))
    with pytest.raises(IncompatibilityError):
        resume(store, other, DOMS)


def test_fingerprint_ignores_timing():
    a = {"x": 1, "wall_seconds": 3.0, "nested": [{"load_seconds": 1.0, "y": 2}]}
    b = {"x": 1, "wall_seconds": 9.0, "nested": [{"load_seconds": 0.5, "y": 2}]}
    assert fingerprint(a) == fingerprint(b)
    assert fingerprint(a) != fingerprint({"x": 2})


def test_same_domain_twice_needs_no_loads(run):
    _, store, manifest = run
    cache = StackCache(store, manifest, capacity=6)
    first = cache.request({"format": 1.0})
    second = cache.request({"format": 0.7})
    assert (first.misses, first.hits) == (2, 0)
    assert (second.misses, second.hits, second.load_seconds) == (0, 2, 0.0)
    assert set(cache.resident) == {"format/1", "format/2"}


def test_ten_prompt_session_hit_rate(run):
    _, store, manifest = run
    cache = StackCache(store, manifest, capacity=6)
    for _ in range(10):
        cache.request({"arithmetic": 1.0})
    rep = cache_report(cache)
    assert rep["hit_rate"] == pytest.approx(0.9)
    assert len(rep["timeline"]) == 10


def test_lru_eviction_and_alternation(run):
    _, store, manifest = run
    cache = StackCache(store, manifest, capacity=4)
    cache.request({"format": 1.0})
    cache.request({"procedural": 1.0})
    cache.request({"arithmetic": 1.0})
    assert cache.eviction_log == ["format/1", "format/2"]
    assert set(cache.resident) == {"procedural/1", "procedural/2", "arithmetic/1", "arithmetic/2"}
    before = cache.misses
    for _ in range(4):
        cache.request({"procedural": 1.0})
        cache.request({"arithmetic": 1.0})
    assert cache.misses == before
    with pytest.raises(StorageError):
        StackCache(store, manifest, capacity=1).request({"format": 1.0})


def test_empty_session_report_errors(run):
    _, store, manifest = run
    with pytest.raises(ValueError):
        cache_report(StackCache(store, manifest))


def test_install_composes_only_weighted_domains(run):
    model, store, manifest = run
    cache = StackCache(store, manifest, capacity=6)
    fresh = BaseModel(TINY)
    cache.install(fresh, {"format": 0.2, "procedural": 0.0, "arithmetic": 1.0})
    assert [s.stack_id for s in fresh.stacked_layers()[0].frozen] == ["format/1", "format/2", "arithmetic/1", "arithmetic/2"]
    model.set_domain_weights({"format": 0.2, "procedural": 0.0, "arithmetic": 1.0})
    toks = np.random.default_rng(0).integers(1, 128, size=(2, 10))
    assert np.allclose(fresh.forward(toks).logits.data, model.forward(toks).logits.data, atol=1e-6)


def test_unreadable_manifest(tmp_path):
    store = StackStore(tmp_path)
    with pytest.raises(StorageError):
        store.read_manifest()
    store.manifest_path.write_text("{not json")
    with pytest.raises(FormatError):
        store.read_manifest()

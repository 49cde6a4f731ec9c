import numpy as np
import pytest

from brainstacks import autodiff as ad
from brainstacks.data import Batch, pretrain_corpus
from brainstacks.errors import CorruptionError, DataError
from brainstacks.model import BaseModel, ModelConfig, injection_sites, lm_loss, pretrain_base
from brainstacks.moe_lora import MoEConfig

from conftest import TINY


def test_shapes_and_sites(tiny_model):
    out = tiny_model.forward(np.array([[1, 5, 9], [1, 7, 0]]))
    assert out.logits.shape == (2, 3, 128)
    sites = injection_sites(tiny_model)
    assert len(sites) == 7 * TINY.n_layers
    assert sites[4] == (0, "gate_proj", 16, 32)
    assert sites[6] == (0, "down_proj", 32, 16)


def test_single_sequence_and_truncation(tiny_model):
    long = np.arange(40) % 100 + 1
    res = tiny_model.forward(long)
    assert res.truncated and res.logits.shape == (TINY.max_seq_len, 128)
    with pytest.raises(ValueError):
        tiny_model.forward(np.array([1, 999]))


def test_causality(tiny_model):
    a = tiny_model.forward(np.array([1, 5, 9, 11])).logits.data
    b = tiny_model.forward(np.array([1, 5, 9, 60])).logits.data
    assert np.allclose(a[:3], b[:3], atol=1e-6)
    assert not np.allclose(a[3], b[3])


def test_adding_fresh_stacks_leaves_logits_unchanged(tiny_model):
    toks = np.random.default_rng(0).integers(1, 128, size=(5, 12))
    before = tiny_model.forward(toks).logits.data.copy()
    for i, layer in enumerate(tiny_model.stacked_layers()):
        layer.add_active_stack(MoEConfig(), i)
    after = tiny_model.forward(toks, mode="train", rng=np.random.default_rng(0)).logits.data
    assert np.abs(after - before).max() < 1e-6


def test_save_load_roundtrip_and_corruption(tiny_model, tmp_path):
    path = tmp_path / "base.bin"
    h = tiny_model.save(path)
    loaded = BaseModel.load(path, h)
    assert loaded.weights_fingerprint() == tiny_model.weights_fingerprint()
    assert loaded.frozen
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        BaseModel.load(path, h)


def test_pretraining_reduces_loss_and_freezes():
    corpus = pretrain_corpus(20_000, 0)
    model, trace = pretrain_base(corpus, 60, TINY, batch_size=8, seq_len=16, lr=1e-2)
    assert np.mean(trace[-10:]) < trace[0] - 1.0
    assert model.frozen and not any(p.requires_grad for p in model.parameters())


def test_pretraining_needs_enough_corpus():
    with pytest.raises(DataError):
        pretrain_base(np.ones(10, dtype=np.int64), 1, TINY, batch_size=4)


def test_lm_loss_uses_mask(tiny_model):
    w = np.random.default_rng(0).integers(1, 128, size=(2, 9))
    b = Batch.from_windows(w)
    full, _ = lm_loss(tiny_model, b)
    b.loss_mask[:, :4] = 0
    part, _ = lm_loss(tiny_model, b)
    assert full.item() != part.item()


def test_bad_head_count():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)

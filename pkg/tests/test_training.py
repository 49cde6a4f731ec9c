import math

import numpy as np
import pytest

from brainstacks.data import batches, make_splits
from brainstacks.errors import TrainingInstabilityError
from brainstacks.model import BaseModel, ModelConfig
from brainstacks.moe_lora import MoEConfig
from brainstacks.training import (
    NOT_TRAINED,
    BestStackCallback,
    BestStackConfig,
    DomainSpec,
    ForgettingMatrix,
    InnerConfig,
    NullspaceConfig,
    check_curriculum,
    evaluate,
    inner_loop,
    outer_loop,
    train_stack,
    train_step_loss,
)
from brainstacks.autodiff import Tensor
from brainstacks.data import BatchSampler

SMALL = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=64, seed=5)
MOE = MoEConfig(rank=2)


def spec(domain, pos, n_train=48, n_val=16, seed=0):
    tr, va = make_splits(domain, n_train, n_val, seed + pos)
    return DomainSpec(domain, tr, va, position=pos)


def actions(losses, patience=4, spike=0.1):
    cb = BestStackCallback(BestStackConfig(spike, patience), [])
    return [cb.on_eval(v, i) for i, v in enumerate(losses)]


def test_callback_spike_restores():
    assert actions([1.0, 0.9, 2.6]) == ["snapshot", "snapshot", "restore_and_stop"]


def test_callback_plateau_after_patience():
    assert actions([1.0, 0.99, 0.99, 0.99, 0.99, 0.99]) == ["snapshot", "snapshot", "continue", "continue", "continue", "plateau_stop"]


def test_callback_monotone_never_stops():
    assert set(actions(list(np.linspace(2, 1, 20)))) == {"snapshot"}


def test_callback_restore_copies_snapshot():
    p = Tensor(np.array([1.0]))
    cb = BestStackCallback(BestStackConfig(), [p])
    cb.on_eval(1.0)
    p.data = np.array([5.0])
    cb.on_eval(3.0)
    assert p.data[0] == 1.0


@pytest.mark.parametrize("kw", [dict(min_loss_delta=0.0), dict(max_rounds=0)])
def test_inner_config_validation(kw):
    with pytest.raises(ValueError):
        InnerConfig(**kw)


def test_curriculum_order_enforced():
    a, b = spec("format", 0), spec("procedural", 0)
    with pytest.raises(ValueError):
        check_curriculum([a, b])


def test_forgetting_matrix_sentinel_roundtrip():
    fm = ForgettingMatrix("isolated", ["a", "b"])
    fm.add_row("a", {"a": 1.5})
    d = fm.to_dict()
    assert d["cells"] == [[1.5, NOT_TRAINED]]
    assert ForgettingMatrix.from_dict(d).value("a", "b") is None


def test_loss_composition_and_aux_off():
    model = BaseModel(SMALL)
    s = spec("format", 0)
    for i, layer in enumerate(model.stacked_layers()):
        layer.add_active_stack(MOE, i)
    b = BatchSampler(s.train, 8, 0).next()
    total, task, aux = train_step_loss(model, b, MOE, np.random.default_rng(0))
    assert total.item() - MOE.aux_coeff * aux == pytest.approx(task, abs=1e-5)
    off = MoEConfig(rank=2, aux_coeff=0.0)
    total0, task0, aux0 = train_step_loss(model, b, off, np.random.default_rng(0))
    assert total0.item() == task0 and aux0 == 0.0


def test_train_stack_is_deterministic_and_never_worse_than_identity():
    inner = InnerConfig(steps_per_round=12, eval_interval=4, lr=5e-3, batch_size=8)
    s = spec("format", 0)
    val = batches(s.val, 32)
    traces = []
    for _ in range(2):
        model = BaseModel(SMALL)
        before = evaluate(model, val)
        for i, layer in enumerate(model.stacked_layers()):
            layer.add_active_stack(MOE, 100 + i)
        res = train_stack(model, s.train, val, inner, BestStackConfig(), MOE, seed=3)
        assert res.best_loss <= before + 1e-6
        assert evaluate(model, val) == pytest.approx(res.best_loss, abs=1e-6)
        traces.append([(r.step, r.split, r.total) for r in res.trace])
    assert traces[0] == traces[1]


def test_nan_loss_raises_and_restores():
    model = BaseModel(SMALL)
    s = spec("format", 0)
    val = batches(s.val, 32)
    for i, layer in enumerate(model.stacked_layers()):
        layer.add_active_stack(MOE, i)
    model.stacked_layers()[-1].active.B.data[:] = np.nan
    with pytest.raises(TrainingInstabilityError):
        train_stack(model, s.train, val, InnerConfig(steps_per_round=2, eval_interval=1, batch_size=8), BestStackConfig(), MOE, 0)


def test_single_round_gives_one_stack_and_zero_forgetting():
    model = BaseModel(SMALL)
    a, b = spec("format", 0), spec("arithmetic", 1)
    inner = InnerConfig(max_rounds=1, steps_per_round=6, eval_interval=3, batch_size=8, lr=5e-3)
    frozen = []
    res = outer_loop(model, [a, b], inner, BestStackConfig(), MOE, NullspaceConfig(n_samples=64), on_freeze=lambda sp, m: frozen.append((sp.name, m)))
    assert frozen == [("format", 1), ("arithmetic", 1)]
    assert all(len(layer.frozen) == 2 for layer in model.stacked_layers())
    iso = res.forgetting["isolated"]
    assert iso.value("arithmetic", "format") == iso.value("format", "format")
    assert iso.value("format", "arithmetic") is None
    assert "arithmetic" in res.projectors and "format" not in res.projectors


def test_break_fires_when_improvement_small():
    model = BaseModel(SMALL)
    s = spec("format", 0)
    inner = InnerConfig(max_rounds=3, steps_per_round=0, eval_interval=1, batch_size=8)
    res = inner_loop(model, s, inner, BestStackConfig(), MOE)
    # no steps: round 1 improves nothing, is frozen anyway, and ends the loop
    assert len(res.rounds) == 1 and res.rounds[0].break_fired
    assert math.isclose(res.rounds[0].improvement, 0.0, abs_tol=1e-7)
    assert len(model.stacked_layers()[0].frozen) == 1

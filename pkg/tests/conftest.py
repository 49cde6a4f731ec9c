import numpy as np
import pytest
from hypothesis import settings

from brainstacks.model import BaseModel, ModelConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=128, max_seq_len=32, seed=3)


@pytest.fixture
def tiny_model():
    return BaseModel(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` with respect to float64 array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def micro_config(out_dir, seed: int = 7):
    """A seconds-scale run configuration for CLI and report tests."""
    from dataclasses import replace

    from brainstacks.config import quick_config

    cfg = quick_config(seed=seed, out_dir=str(out_dir))
    return replace(
        cfg,
        model=ModelConfig(n_layers=1, d_model=32, n_heads=2, d_ff=64, vocab_size=128, max_seq_len=64, seed=seed),
        inner=replace(cfg.inner, steps_per_round=8, eval_interval=4),
        data=replace(cfg.data, n_train=64, n_val=16, pretrain_tokens=20_000, pretrain_steps=30, oracle_per_domain=6, oracle_mixed_per_pair=1, heldout_per_domain=4),
        lora=replace(cfg.lora, steps=8, eval_interval=4),
        router=replace(cfg.router, epochs=2),
    )


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """Every CLI stage run once on the micro configuration; returns the output dir."""
    from brainstacks.cli import main

    out = tmp_path_factory.mktemp("micro")
    cfg_path = out / "config.json"
    micro_config(out).save(cfg_path)
    for argv in (
        ["pretrain"],
        ["train", "--ablate-nullspace"],
        ["oracle"],
        ["train-router"],
        ["eval"],
        ["compare-lora"],
        ["report", "all"],
    ):
        assert main(argv + ["--config", str(cfg_path)]) == 0, argv
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

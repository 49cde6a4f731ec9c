"""Run configuration: everything needed to reproduce a run from a seed."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import DOMAINS
from .model import ModelConfig
from .moe_lora import MoEConfig
from .router import RouterConfig
from .training import BestStackConfig, InnerConfig, NullspaceConfig


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 600
    n_val: int = 64
    seed: int = 1000
    multi_step: bool = True
    pretrain_tokens: int = 300_000
    pretrain_steps: int = 1500
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-3
    oracle_per_domain: int = 100
    oracle_mixed_per_pair: int = 10
    heldout_per_domain: int = 40


@dataclass(frozen=True)
class LoraCompareConfig:
    domain: str = "arithmetic"
    steps: int = 300
    eval_interval: int = 25


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    inner: InnerConfig = field(default_factory=InnerConfig)
    best: BestStackConfig = field(default_factory=BestStackConfig)
    nullspace: NullspaceConfig = field(default_factory=NullspaceConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    lora: LoraCompareConfig = field(default_factory=LoraCompareConfig)
    domains: tuple[str, ...] = DOMAINS
    seed: int = 42
    out_dir: str = "runs/default"

    def __post_init__(self):
        unknown = set(self.domains) - set(DOMAINS)
        if unknown:
            raise ValueError(f"unknown domains {sorted(unknown)}")
        if tuple(self.router.domains) != tuple(self.domains):
            object.__setattr__(self, "router", replace(self.router, domains=tuple(self.domains)))

    def inner_cfg(self) -> InnerConfig:
        return replace(self.inner, seed=self.seed)

    def router_cfg(self) -> RouterConfig:
        return replace(self.router, seed=self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = {
            "model": asdict(self.model),
            "moe": self.moe.to_dict(),
            "inner": asdict(self.inner),
            "best": asdict(self.best),
            "nullspace": asdict(self.nullspace),
            "router": self.router.to_dict(),
            "data": asdict(self.data),
            "lora": asdict(self.lora),
            "domains": list(self.domains),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "moe", "inner", "best", "nullspace", "router", "data", "lora", "domains", "seed", "out_dir"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig(**d["model"])
        if "moe" in d:
            m = dict(d["moe"])
            kw["moe"] = MoEConfig(**m)
        for key, typ in (("inner", InnerConfig), ("best", BestStackConfig), ("nullspace", NullspaceConfig), ("data", DataConfig), ("lora", LoraCompareConfig)):
            if key in d:
                kw[key] = typ(**d[key])
        if "router" in d:
            r = dict(RouterConfig().to_dict(), **d["router"])
            kw["router"] = RouterConfig.from_dict(r)
        if "domains" in d:
            kw["domains"] = tuple(d["domains"])
        for key in ("seed", "out_dir"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def quick_config(seed: int = 42, out_dir: str = "runs/quick") -> RunConfig:
    """A reduced-step configuration for smoke runs and determinism checks."""
    return RunConfig(
        inner=InnerConfig(max_rounds=2, steps_per_round=30, eval_interval=10),
        data=DataConfig(n_train=200, n_val=32, pretrain_tokens=60_000, pretrain_steps=100, oracle_per_domain=16, oracle_mixed_per_pair=3, heldout_per_domain=8),
        router=RouterConfig(epochs=3),
        lora=LoraCompareConfig(steps=30, eval_interval=10),
        seed=seed,
        out_dir=out_dir,
    )

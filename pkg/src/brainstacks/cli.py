"""Command-line entry point: ``brainstacks <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, NumericError, PrerequisiteError, RoutingError, TrainingInstabilityError
from .reports import REPORT_KINDS, write_report

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("ungated", "isolated", "routed")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory (overrides the config's out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="brainstacks", description="Frozen MoE-LoRA stacks for continual learning on a tiny transformer.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train and freeze the base model")
    t = sub.add_parser("train", parents=[common], help="run the continual outer loop")
    t.add_argument("--ablate-nullspace", action="store_true", help="also train the paired run without null-space projection")
    t.add_argument("--resume", action="store_true", help="continue from the manifest's completed domains")
    sub.add_parser("compare-lora", parents=[common], help="MoE-LoRA vs parameter-matched single LoRA")
    sub.add_parser("oracle", parents=[common], help="discover and cache outcome-based routing targets")
    sub.add_parser("train-router", parents=[common], help="train the meta-router on cached targets")
    e = sub.add_parser("eval", parents=[common], help="final-state losses per gating mode")
    e.add_argument("--mode", choices=MODES, action="append", help="repeatable; all modes by default")
    g = sub.add_parser("generate", parents=[common], help="routed greedy decoding")
    g.add_argument("prompt")
    g.add_argument("--max-new", type=int, default=48)
    r = sub.add_parser("report", parents=[common], help="write CSV/JSON report tables")
    r.add_argument("kind", choices=REPORT_KINDS + ("all",))
    d = sub.add_parser("dump-data", parents=[common], help="write the generated domain splits as JSONL")
    d.add_argument("--domain", help="only this domain")
    return p


def load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid config {args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def run(args) -> int:
    from . import pipeline as P

    cfg = load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "pretrain":
        print(f"base model written to {P.pretrain(cfg, out)}")
    elif cmd == "train":
        for ns in (True, False) if args.ablate_nullspace else (True,):
            res = P.train(cfg, out, use_nullspace=ns, resume_run=args.resume)
            print(f"{'null-space' if ns else 'no null-space'} run: {len(res.manifest['domains'])} domains -> {res.run_dir}")
    elif cmd == "compare-lora":
        c = P.compare_lora(cfg, out)
        print(f"MoE ({c['moe_parameters']} params) final val {c['moe_final_val']:.4f}; single LoRA r={c['single_rank']} ({c['single_parameters']} params) {c['single_final_val']:.4f}")
    elif cmd == "oracle":
        res = P.run_oracle(cfg, out)
        print(", ".join(f"{k}: {len(v)} targets" for k, v in res.items()))
    elif cmd == "train-router":
        s = P.run_train_router(cfg, out)
        print(json.dumps(s["heldout"], indent=2, sort_keys=True))
    elif cmd == "eval":
        res = P.run_eval(cfg, out, tuple(args.mode or MODES))
        print(json.dumps(res["modes"], indent=2, sort_keys=True))
    elif cmd == "generate":
        text, weights, load = P.generate(cfg, out, args.prompt, args.max_new)
        print("weights: " + ", ".join(f"{d}={w:.3f}" for d, w in weights.items()))
        print(f"loaded: {load['loaded']}")
        print(text)
    elif cmd == "report":
        kinds = REPORT_KINDS if args.kind == "all" else (args.kind,)
        for k in kinds:
            j, c = write_report(out, k)
            print(f"{k}: {j} {c}")
    elif cmd == "dump-data":
        if args.domain is not None and args.domain not in cfg.domains:
            raise ConfigError(f"unknown domain {args.domain!r}; choose from {', '.join(cfg.domains)}")
        for p in P.dump_data(cfg, out):
            if args.domain is None or p.name.startswith(args.domain + "_"):
                print(p)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (TrainingInstabilityError, NumericError, RoutingError) as exc:
        print(f"numeric instability: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

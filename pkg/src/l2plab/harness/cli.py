"""Command line entry point: ``l2plab {train,eval,attack,transfer,sweep,presets}``."""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from ..attacks.config import CWConfig, EOTConfig, FewPixelConfig, FGSMConfig, PGDConfig, parse_eps
from ..data import DataError
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, preset_names
from . import runner


def _csv(s: str) -> List[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="l2plab", description="Learned feature-noise defenses and attacks.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file or preset")
    p.add_argument("--config", required=True, help="INI file or preset name")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    p.add_argument("--eval", action="store_true", help="evaluate the final checkpoint afterwards")

    p = sub.add_parser("eval", help="accuracy under the configured attacks, R noisy repeats")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attacks", type=_csv, default=None, help="comma list, e.g. clean,pgd,fgsm")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--config", default=None, help="override the config stored in the checkpoint")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=None, help="directory for eval.json / eval.txt")

    p = sub.add_parser("attack", help="run a single attack with explicit parameters")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attack", required=True, choices=["fgsm", "pgd", "cw", "eot-fgsm", "eot-pgd", "fewpixel"])
    p.add_argument("--eps", default="8/255")
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--cw-iters", type=int, default=1000)
    p.add_argument("--binary-steps", type=int, default=9)
    p.add_argument("--samples", type=int, default=80, help="EOT gradient samples")
    p.add_argument("--pixels", type=int, default=1, help="few-pixel budget k")
    p.add_argument("--pop", type=int, default=400)
    p.add_argument("--gens", type=int, default=75)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=None)

    p = sub.add_parser("transfer", help="craft on source checkpoints, evaluate on victims")
    p.add_argument("--source", action="append", default=[])
    p.add_argument("--victim", action="append", default=[])
    p.add_argument("--matrix", nargs="+", default=None, help="all ordered pairs of these checkpoints")
    p.add_argument("--attacks", type=_csv, default=["fgsm", "pgd"])
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep", help="accuracy as a function of eps (FGSM) or kappa (C&W)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--param", required=True, choices=["eps", "kappa"])
    p.add_argument("--values", type=_csv, default=None)
    p.add_argument("--attack", default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=None)

    sub.add_parser("presets", help="list bundled config presets")
    return ap


def _attack_from_args(a) -> object:
    eps = parse_eps(a.eps)
    pgd_cfg = PGDConfig(eps=eps, steps=a.steps, step_size=a.step_size, random_start=not a.no_random_start)
    if a.attack == "fgsm":
        return FGSMConfig(eps=eps)
    if a.attack == "pgd":
        return pgd_cfg
    if a.attack == "cw":
        return CWConfig(kappa=a.kappa, max_iters=a.cw_iters, binary_steps=a.binary_steps)
    if a.attack == "eot-fgsm":
        return EOTConfig(inner=FGSMConfig(eps=eps), samples=a.samples)
    if a.attack == "eot-pgd":
        return EOTConfig(inner=pgd_cfg, samples=a.samples)
    return FewPixelConfig(k=a.pixels, pop_size=a.pop, max_gens=a.gens)


def _maybe_config(a):
    """Explicit --config (with --set applied), or None to use the checkpoint's own config."""
    return None if a.config is None else load_config(a.config, a.set)


def main(argv: Optional[List[str]] = None) -> int:
    a = build_parser().parse_args(argv)
    try:
        if a.command == "presets":
            print("\n".join(preset_names()))
        elif a.command == "train":
            cfg = load_config(a.config, a.set)
            runner.run_train(cfg)
            if a.eval:
                rep = runner.run_eval(cfg.output_dir / "final.ckpt", cfg=cfg, out_dir=cfg.output_dir)
                print(rep.to_text(), end="")
        elif a.command == "eval":
            rep = runner.run_eval(a.ckpt, a.attacks, a.repeats, _maybe_config(a), a.out, overrides=a.set)
            print(rep.to_text(), end="")
        elif a.command == "attack":
            rep = runner.run_attack(a.ckpt, _attack_from_args(a), a.repeats, _maybe_config(a), a.out, overrides=a.set)
            print(rep.to_text(), end="")
        elif a.command == "transfer":
            if a.matrix:
                sources = victims = a.matrix
            else:
                if not a.source or not a.victim:
                    raise ConfigError("transfer needs --source and --victim, or --matrix")
                sources, victims = a.source, a.victim
            rep, table = runner.run_transfer(sources, victims, a.attacks, a.repeats, a.out)
            print(rep.to_text() + "\n" + table, end="")
        elif a.command == "sweep":
            rep = runner.run_sweep(a.ckpt, a.param, a.values, a.attack, a.repeats, _maybe_config(a), a.out, overrides=a.set)
            print(rep.to_text(), end="")
    except (ConfigError, DataError, CheckpointError, ValueError) as exc:
        print(f"l2plab {a.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

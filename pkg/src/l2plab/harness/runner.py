"""Orchestration behind the CLI subcommands."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..attacks import CWConfig, attack_label, predict, transfer_eval
from ..attacks.config import AttackConfig, parse_eps
from ..data import BatchPlan, Dataset, load_cifar, load_digits_dataset, load_mnist, subset, synthetic
from ..nn import build_model
from ..tensor import kernels
from ..trainer import train, write_epoch_csv, write_theta_csv
from . import checkpoint
from .config import ExperimentConfig, build_attack, load_config, parse_config
from .report import EvalReport, git_commit, matrix_text

Log = Optional[Callable[[str], None]]


# --------------------------------------------------------------------- data
def load_data(cfg: ExperimentConfig, splits: Sequence[str] = ("train", "test")) -> Dict[str, Dataset]:
    """Datasets named by the config, subset as configured; ``val`` is drawn from the test split."""
    d = cfg["data"]
    root = d["root"] or None
    name = d["dataset"]
    out: Dict[str, Dataset] = {}
    need_test = "test" in splits or "val" in splits
    for split in ("train", "test"):
        if split == "train" and "train" not in splits or split == "test" and not need_test:
            continue
        if name in ("cifar10", "cifar100"):
            ds = load_cifar(root, 10 if name == "cifar10" else 100, split)
        elif name == "mnist":
            ds = load_mnist(root, split)
        elif name == "digits":
            ds = load_digits_dataset(split)
        else:
            n = d["synthetic_train"] if split == "train" else d["synthetic_test"]
            ds = synthetic(n, d["synthetic_classes"], tuple(d["synthetic_shape"]), d["subset_seed"], split)
        out[split] = ds
    if "train" in out and d["train_subset"]:
        out["train"] = subset(out["train"], d["train_subset"], d["subset_seed"])
    if "test" in out:
        full_test = out["test"]
        if d["test_subset"]:
            out["test"] = subset(full_test, d["test_subset"], d["subset_seed"])
        if "val" in splits and d["val_subset"]:
            out["val"] = subset(full_test, min(d["val_subset"], len(full_test)), d["subset_seed"] + 1)
    return {k: v for k, v in out.items() if k in splits}


def data_description(cfg: ExperimentConfig, split: str = "test") -> str:
    d = cfg["data"]
    n = d["test_subset"] if split == "test" else d["train_subset"]
    size = f"stratified subset {n} (seed {d['subset_seed']})" if n else "full split"
    aug = "on" if d["flip"] or d["crop_pad"] else "off"
    return f"{d['dataset']} {split}, {size}, augmentation {aug}"


# -------------------------------------------------------------------- train
def _accuracy(model, ds: Dataset) -> float:
    state = model.noise_state()
    try:
        return float(np.mean(predict(model, ds.images) == ds.labels))
    finally:
        model.set_noise_state(state)


def run_train(cfg: ExperimentConfig, log: Log = print) -> dict:
    """Train per ``cfg``; writes checkpoints, CSV logs and ``train.json`` into the output dir."""
    data = load_data(cfg, ("train", "val") if cfg["data"]["val_subset"] else ("train",))
    tcfg = cfg.train_config()
    train_ds = data["train"]
    m = cfg["model"]
    model = build_model(cfg.model_specs(train_ds.input_shape, train_ds.class_count), train_ds.input_shape,
                        seed=m["seed"], theta0=m["theta0"], theta_min=m["theta_min"])
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    digest, text = cfg.digest(), cfg.to_ini(portable=True)
    every = cfg["experiment"]["checkpoint_every"]
    best = {"acc": -1.0, "epoch": 0, "digest": ""}
    val_acc: List[float] = []
    if log:
        log(f"train {cfg['experiment']['name']}: {len(train_ds)} images, {model.params.count('W')} W / "
            f"{model.params.count('theta')} theta params, mode {tcfg.mode}, backend {kernels.BACKEND}")

    def on_epoch(rec, mdl, opt):
        if "val" in data:
            acc = _accuracy(mdl, data["val"])
            val_acc.append(acc)
            if acc > best["acc"]:
                best.update(acc=acc, epoch=rec.epoch)
                best["digest"] = checkpoint.save(out / "best.ckpt", mdl, epoch=rec.epoch, config_digest=digest,
                                                 config_text=text, optimizer=opt)
        if every and rec.epoch % every == 0:
            checkpoint.save(out / f"epoch_{rec.epoch:04d}.ckpt", mdl, epoch=rec.epoch, config_digest=digest,
                            config_text=text, optimizer=opt)

    plan = BatchPlan(batch_size=tcfg.batch_size, seed=tcfg.seed, flip=cfg["data"]["flip"],
                     crop_pad=cfg["data"]["crop_pad"])
    result = train(model, train_ds, tcfg, on_epoch=on_epoch, log=log, plan=plan)
    final_digest = checkpoint.save(out / "final.ckpt", model, epoch=tcfg.epochs, config_digest=digest,
                                   config_text=text, optimizer=result.optimizer)
    write_epoch_csv(out / "epochs.csv", result.records)
    write_theta_csv(out / "theta.csv", result.records)
    summary = {
        "config_digest": digest,
        "seed": cfg.seed,
        "commit": git_commit(),
        "backend": kernels.BACKEND,
        "data": data_description(cfg, "train"),
        "final_checkpoint_digest": final_digest,
        "best_checkpoint_digest": best["digest"],
        "best_epoch": best["epoch"],
        "val_accuracy": val_acc,
        "mean_theta": [r.mean_theta for r in result.records],
        "isolation_checks": result.isolation_checks,
        "W_digest": model.params.digest("W"),
        "theta_digest": model.params.digest("theta"),
    }
    (out / "train.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return {"model": model, "records": result.records, "summary": summary, "output_dir": out}


# --------------------------------------------------------------------- eval
def _config_of(ckpt: checkpoint.Checkpoint, fallback: Optional[ExperimentConfig] = None,
               overrides: Sequence[str] = ()) -> ExperimentConfig:
    if fallback is not None:
        return fallback
    if not ckpt.config_text:
        raise ValueError("checkpoint carries no config; pass --config")
    return parse_config(ckpt.config_text, "checkpoint", overrides)


def _names(paths: Sequence[str]) -> Dict[str, str]:
    """Short display names: the run directory, plus the file stem when directories repeat."""
    uniq = list(dict.fromkeys(paths))
    short = {p: Path(p).parent.name or Path(p).stem for p in uniq}
    if len(set(short.values())) < len(uniq):
        short = {p: f"{Path(p).parent.name}/{Path(p).stem}".lstrip("/") for p in uniq}
    return short


def _metadata(cfg: ExperimentConfig, repeats: int, **extra) -> dict:
    md = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "commit": git_commit(),
        "data": data_description(cfg),
        "repeats": repeats,
        "single_repeat": repeats == 1,
        "backend": kernels.BACKEND,
    }
    md.update(extra)
    return md


def _label(cfg: Optional[AttackConfig]) -> str:
    return "Clean" if cfg is None else attack_label(cfg)


def evaluate(model, test: Dataset, attacks: Sequence[Optional[AttackConfig]], repeats: int, seed: int,
             report: EvalReport, batch_size: int = 128, victim=None, log: Log = None) -> EvalReport:
    victim = model if victim is None else victim
    for a in attacks:
        s = transfer_eval(model, victim, test.images, test.labels, a, repeats, seed, batch_size)
        report.add(_label(a), s, attack=None if a is None else a.kind)
        if log:
            log(f"  {_label(a)}: {100 * s['mean']:.2f}±{100 * s['std']:.2f}")
    return report


def run_eval(ckpt_path, attacks: Optional[Sequence[str]] = None, repeats: Optional[int] = None,
             cfg: Optional[ExperimentConfig] = None, out_dir=None, log: Log = print,
             overrides: Sequence[str] = ()) -> EvalReport:
    ckpt = checkpoint.load(ckpt_path)
    cfg = _config_of(ckpt, cfg, overrides)
    model = ckpt.build_model()
    test = load_data(cfg, ("test",))["test"]
    if test.input_shape != model.input_shape:
        raise ValueError(f"model expects {model.input_shape}, test data is {test.input_shape}")
    R = repeats or cfg.repeats
    report = EvalReport(f"eval {cfg['experiment']['name']} ({cfg['train']['mode']})",
                        metadata=_metadata(cfg, R, checkpoint_digest=ckpt.digest, epoch=ckpt.epoch))
    evaluate(model, test, cfg.attacks(attacks), R, cfg.seed, report, cfg["eval"]["batch_size"], log=log)
    if out_dir is not None:
        report.write(out_dir, "eval")
    return report


def run_attack(ckpt_path, attack: AttackConfig, repeats: int = 1, cfg: Optional[ExperimentConfig] = None,
               out_dir=None, log: Log = print, overrides: Sequence[str] = ()) -> EvalReport:
    ckpt = checkpoint.load(ckpt_path)
    cfg = _config_of(ckpt, cfg, overrides)
    model = ckpt.build_model()
    test = load_data(cfg, ("test",))["test"]
    report = EvalReport(f"attack {_label(attack)} on {cfg['experiment']['name']}",
                        metadata=_metadata(cfg, repeats, checkpoint_digest=ckpt.digest))
    evaluate(model, test, [attack], repeats, cfg.seed, report, cfg["eval"]["batch_size"], log=log)
    if out_dir is not None:
        report.write(out_dir, "attack")
    return report


def run_transfer(source_paths: Sequence[str], victim_paths: Sequence[str], attacks: Sequence[str] = ("fgsm", "pgd"),
                 repeats: Optional[int] = None, out_dir=None, log: Log = print) -> Tuple[EvalReport, str]:
    """One cell per (source, victim, attack); returns the report and a matrix table."""
    ck_s = {p: checkpoint.load(p) for p in source_paths}
    ck_v = {p: checkpoint.load(p) for p in victim_paths}
    cfg = _config_of(ck_s[source_paths[0]])
    test = load_data(cfg, ("test",))["test"]
    R = repeats or cfg.repeats
    acfgs = cfg.attacks(attacks)
    names = _names(list(source_paths) + list(victim_paths))
    report = EvalReport("transfer", metadata=_metadata(cfg, R, sources=[names[p] for p in source_paths],
                                                       victims=[names[p] for p in victim_paths]))
    cells = {}
    for sp in source_paths:
        src = ck_s[sp].build_model()
        for vp in victim_paths:
            vic = src if vp == sp else ck_v[vp].build_model()
            for a, aname in zip(acfgs, attacks):
                s = transfer_eval(src, vic, test.images, test.labels, a, R, cfg.seed, cfg["eval"]["batch_size"])
                cells[names[sp], names[vp], aname] = s
                report.add(f"{names[sp]} -> {names[vp]}: {_label(a)}", s, source=names[sp], victim=names[vp],
                           attack=aname)
                if log:
                    log(f"  {names[sp]} -> {names[vp]} {aname}: {100 * s['mean']:.2f}±{100 * s['std']:.2f}")
    table = matrix_text(cells, [names[p] for p in source_paths], [names[p] for p in victim_paths], attacks)
    if out_dir is not None:
        paths = report.write(out_dir, "transfer")
        paths["text"].write_text(report.to_text() + "\n" + table)
    return report, table


SWEEP_DEFAULTS = {
    "eps": ["0", "1/255", "2/255", "4/255", "8/255", "16/255"],
    "kappa": ["0", "0.1", "1", "2", "5"],
}


def sweep_attacks(param: str, values: Sequence[str], base: dict, attack: Optional[str] = None):
    """(label, AttackConfig) per value: FGSM (or ``attack``) over eps, C&W over kappa."""
    e = dict(base)
    out = []
    for v in values:
        if param == "eps":
            e["eps"] = parse_eps(v)
            a = build_attack(attack or "fgsm", e)
            out.append((f"eps={v}", a))
        elif param == "kappa":
            e["cw_kappa"] = float(v)
            a = build_attack(attack or "cw", e)
            if not isinstance(a, CWConfig):
                raise ValueError("the kappa sweep needs the cw attack")
            out.append((f"kappa={v}", a))
        else:
            raise ValueError(f"unknown sweep parameter {param!r}; expected eps or kappa")
    return out


def run_sweep(ckpt_path, param: str, values: Optional[Sequence[str]] = None, attack: Optional[str] = None,
              repeats: Optional[int] = None, cfg: Optional[ExperimentConfig] = None, out_dir=None,
              log: Log = print, overrides: Sequence[str] = ()) -> EvalReport:
    ckpt = checkpoint.load(ckpt_path)
    cfg = _config_of(ckpt, cfg, overrides)
    model = ckpt.build_model()
    test = load_data(cfg, ("test",))["test"]
    values = list(values or SWEEP_DEFAULTS[param])
    R = repeats or cfg.repeats
    report = EvalReport(f"sweep {param} on {cfg['experiment']['name']}",
                        metadata=_metadata(cfg, R, checkpoint_digest=ckpt.digest, param=param, values=values))
    for label, a in sweep_attacks(param, values, cfg["eval"], attack):
        s = transfer_eval(model, model, test.images, test.labels, a, R, cfg.seed, cfg["eval"]["batch_size"])
        report.add(label, s, attack=a.kind, attack_label=_label(a))
        if log:
            log(f"  {label}: {100 * s['mean']:.2f}±{100 * s['std']:.2f}")
    if out_dir is not None:
        report.write(out_dir, f"sweep_{param}")
    return report


def run_experiment(path_or_preset: str, overrides: Sequence[str] = (), log: Log = print) -> dict:
    """Train then evaluate the final checkpoint with the configured attacks."""
    cfg = load_config(path_or_preset, overrides)
    res = run_train(cfg, log)
    report = run_eval(cfg.output_dir / "final.ckpt", cfg=cfg, out_dir=cfg.output_dir, log=log)
    res["report"] = report
    return res

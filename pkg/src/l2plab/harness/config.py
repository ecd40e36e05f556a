"""Experiment configuration: INI files with flat per-module sections.

Every key is declared in :data:`SCHEMA`; unknown sections or keys are
rejected before any compute. ``eps`` values accept exact fractions such as
``8/255``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from ..attacks.config import (
    AttackConfig,
    CWConfig,
    EOTConfig,
    FewPixelConfig,
    FGSMConfig,
    PGDConfig,
    parse_eps,
)
from ..nn import CIFAR10_MEAN, CIFAR10_STD, LayerSpec, mini_resnet_spec, mlp_spec
from ..trainer import MODES, TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> List[int]:
    return [int(p) for p in v.replace(" ", "").split(",") if p]


def _strs(v: str) -> List[str]:
    return [p.strip() for p in v.split(",") if p.strip()]


def _opt_float(v: str) -> Optional[float]:
    return None if v.strip().lower() in ("", "none", "auto") else float(v)


# section -> key -> (parser, default as written in a file)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment"),
        "seed": (int, "0"),
        "output_dir": (str, "runs/experiment"),
        "checkpoint_every": (int, "0"),
    },
    "data": {
        "dataset": (str, "cifar10"),
        "root": (str, ""),
        "train_subset": (int, "0"),
        "test_subset": (int, "0"),
        "val_subset": (int, "500"),
        "subset_seed": (int, "0"),
        "flip": (_bool, "false"),
        "crop_pad": (int, "0"),
        "synthetic_train": (int, "2000"),
        "synthetic_test": (int, "500"),
        "synthetic_classes": (int, "10"),
        "synthetic_shape": (_ints, "3,32,32"),
    },
    "model": {
        "arch": (str, "mini-resnet"),
        "version": (str, "v1"),
        "base": (int, "16"),
        "blocks": (_ints, "1,1,1"),
        "hidden": (_ints, "64"),
        "perturb": (_bool, "true"),
        "theta0": (float, "0.01"),
        "theta_min": (float, "0.0"),
        "seed": (int, "0"),
    },
    "train": {
        "mode": (str, "l2p"),
        "epochs": (int, "40"),
        "batch_size": (int, "128"),
        "lr": (float, "0.1"),
        "milestones": (_ints, "20,32"),
        "lr_factor": (float, "0.1"),
        "momentum": (float, "0.9"),
        "nesterov": (_bool, "true"),
        "weight_decay": (float, "1e-4"),
        "gamma": (float, "1e-4"),
        "alpha": (_opt_float, "auto"),
        "beta": (_opt_float, "auto"),
        "warmup_epochs": (int, "8"),
        "alternation": (str, "batch"),
        "reg_eps": (float, "1e-12"),
        "check_isolation": (_bool, "false"),
    },
    "adversarial": {
        "enabled": (_bool, "true"),
        "eps": (parse_eps, "8/255"),
        "steps": (int, "3"),
        "step_size": (float, "0.01"),
        "random_start": (_bool, "true"),
    },
    "eval": {
        "attacks": (_strs, "clean,fgsm,pgd"),
        "repeats": (int, "5"),
        "batch_size": (int, "128"),
        "eps": (parse_eps, "8/255"),
        "pgd_steps": (int, "7"),
        "step_size": (float, "0.01"),
        "random_start": (_bool, "true"),
        "eot_samples": (int, "80"),
        "cw_kappa": (float, "0"),
        "cw_iters": (int, "1000"),
        "cw_binary_steps": (int, "9"),
        "cw_lr": (float, "5e-4"),
        "fewpixel_k": (int, "1"),
        "fewpixel_pop": (int, "400"),
        "fewpixel_gens": (int, "75"),
    },
}

ATTACK_NAMES = ("clean", "fgsm", "pgd", "cw", "eot-fgsm", "eot-pgd", "fewpixel")
DATASETS = ("cifar10", "cifar100", "mnist", "digits", "synthetic")


@dataclass(frozen=True)
class ExperimentConfig:
    values: Dict[str, Dict[str, Any]]
    raw: Dict[str, Dict[str, str]]
    source: str = "<string>"

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["experiment"]["output_dir"])

    @property
    def repeats(self) -> int:
        return self.values["eval"]["repeats"]

    # -------------------------------------------------------------- digest
    def canonical(self) -> str:
        """Resolved key=value text; the output directory is excluded."""
        body = {s: {k: v for k, v in kv.items()} for s, kv in self.raw.items()}
        body["experiment"] = {k: v for k, v in body["experiment"].items() if k != "output_dir"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_ini(self, portable: bool = False) -> str:
        """INI text of the resolved config; ``portable`` drops the output directory."""
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in self.raw[section].items()
                      if not (portable and section == "experiment" and k == "output_dir")]
            lines.append("")
        return "\n".join(lines)

    # --------------------------------------------------------- translation
    def train_config(self) -> TrainConfig:
        t, a = self.values["train"], self.values["adversarial"]
        adv = None
        if a["enabled"]:
            adv = PGDConfig(eps=a["eps"], steps=a["steps"], step_size=a["step_size"], random_start=a["random_start"])
        return TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], milestones=tuple(t["milestones"]),
            lr_factor=t["lr_factor"], momentum=t["momentum"], nesterov=t["nesterov"],
            weight_decay=t["weight_decay"], gamma=t["gamma"], alpha=t["alpha"], beta=t["beta"],
            warmup_epochs=t["warmup_epochs"], mode=t["mode"], adversarial=adv, alternation=t["alternation"],
            reg_eps=t["reg_eps"], seed=self.seed, check_isolation=t["check_isolation"],
        )

    def model_specs(self, input_shape: Sequence[int], num_classes: int) -> List[LayerSpec]:
        m = self.values["model"]
        perturb = m["perturb"] and self.values["train"]["mode"] in ("l2p", "l2p-r", "pni-style")
        if m["arch"] == "mlp":
            return mlp_spec(list(m["hidden"]) + [num_classes], perturb=perturb)
        C, H, _ = input_shape
        cifar = self.values["data"]["dataset"].startswith("cifar")
        return mini_resnet_spec(
            version=m["version"], base=m["base"], blocks=tuple(m["blocks"]), num_classes=num_classes,
            input_hw=H, in_channels=C, mean=CIFAR10_MEAN if cifar else (), std=CIFAR10_STD if cifar else (),
            perturb=perturb,
        )

    def attacks(self, names: Optional[Sequence[str]] = None) -> List[Optional[AttackConfig]]:
        """Attack configs for ``names`` (default: the eval list); ``clean`` maps to None."""
        e = self.values["eval"]
        out: List[Optional[AttackConfig]] = []
        for name in names if names is not None else e["attacks"]:
            out.append(build_attack(name, e))
        return out


def build_attack(name: str, e: Dict[str, Any]) -> Optional[AttackConfig]:
    pgd_cfg = lambda: PGDConfig(eps=e["eps"], steps=e["pgd_steps"], step_size=e["step_size"],
                                random_start=e["random_start"])
    if name == "clean":
        return None
    if name == "fgsm":
        return FGSMConfig(eps=e["eps"])
    if name == "pgd":
        return pgd_cfg()
    if name == "cw":
        return CWConfig(kappa=e["cw_kappa"], max_iters=e["cw_iters"], binary_steps=e["cw_binary_steps"], lr=e["cw_lr"])
    if name == "eot-fgsm":
        return EOTConfig(inner=FGSMConfig(eps=e["eps"]), samples=e["eot_samples"])
    if name == "eot-pgd":
        return EOTConfig(inner=pgd_cfg(), samples=e["eot_samples"])
    if name == "fewpixel":
        return FewPixelConfig(k=e["fewpixel_k"], pop_size=e["fewpixel_pop"], max_gens=e["fewpixel_gens"])
    raise ConfigError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}")


# ------------------------------------------------------------------ parsing
def preset_names() -> List[str]:
    return sorted(p.name[:-4] for p in resources.files(__package__).joinpath("presets").iterdir()
                  if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    p = resources.files(__package__).joinpath("presets", f"{name}.ini")
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return p.read_text()


def parse_config(text: str, source: str = "<string>", overrides: Sequence[str] = ()) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
    raw: Dict[str, Dict[str, str]] = {}
    values: Dict[str, Dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        raw[section], values[section] = {}, {}
        for key, (parse, default) in keys.items():
            text_value = cp.get(section, key, fallback=default).strip()
            try:
                values[section][key] = parse(text_value)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {text_value!r}: {exc}") from None
            raw[section][key] = text_value
    cfg = ExperimentConfig(values, raw, source)
    validate(cfg)
    return cfg


def load_config(path_or_preset: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read an INI file, or a bundled preset when no such file exists."""
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(), str(p), overrides)
    return parse_config(preset_text(path_or_preset), f"preset:{path_or_preset}", overrides)


def validate(cfg: ExperimentConfig) -> None:
    d, m, t, e = cfg["data"], cfg["model"], cfg["train"], cfg["eval"]
    if d["dataset"] not in DATASETS:
        raise ConfigError(f"unknown dataset {d['dataset']!r}; expected one of {DATASETS}")
    if m["arch"] not in ("mini-resnet", "mlp"):
        raise ConfigError(f"unknown arch {m['arch']!r}")
    if m["version"] not in ("v1", "v2"):
        raise ConfigError(f"unknown model version {m['version']!r}")
    if t["mode"] not in MODES:
        raise ConfigError(f"unknown mode {t['mode']!r}; expected one of {MODES}")
    if e["repeats"] < 1:
        raise ConfigError("eval repeats must be >= 1")
    if len(d["synthetic_shape"]) != 3:
        raise ConfigError("synthetic_shape must be C,H,W")
    for name in e["attacks"]:
        build_attack(name, e)
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

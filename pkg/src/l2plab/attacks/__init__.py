"""White-box (FGSM, PGD, C&W-L2, EOT) and black-box (few-pixel, transfer) attacks."""

from .config import (
    AdvExample,
    AttackConfig,
    CWConfig,
    EOTConfig,
    FewPixelConfig,
    FGSMConfig,
    PGDConfig,
    attack_from_dict,
    attack_label,
    attack_to_dict,
    distortion,
    parse_eps,
)
from .fewpixel import apply_pixels, differential_evolution, few_pixel
from .transfer import craft, reseed_pair, robust_accuracy, run_attack, summarize, transfer_eval
from .whitebox import (
    cw_l2,
    cw_margin,
    cw_objective,
    cw_success,
    eot_gradient,
    fgsm,
    input_gradient,
    pgd,
    predict,
    project_linf,
)

__all__ = [
    "AdvExample",
    "AttackConfig",
    "CWConfig",
    "EOTConfig",
    "FewPixelConfig",
    "FGSMConfig",
    "PGDConfig",
    "attack_from_dict",
    "attack_label",
    "attack_to_dict",
    "distortion",
    "parse_eps",
    "apply_pixels",
    "differential_evolution",
    "few_pixel",
    "craft",
    "reseed_pair",
    "robust_accuracy",
    "run_attack",
    "summarize",
    "transfer_eval",
    "cw_l2",
    "cw_margin",
    "cw_objective",
    "cw_success",
    "eot_gradient",
    "fgsm",
    "input_gradient",
    "pgd",
    "predict",
    "project_linf",
]

"""Shape checks for the mean-theta trajectory and the robustness ordering of runs."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np


def longest_increase(diffs: np.ndarray) -> tuple:
    """(length, start) of the longest run of strictly positive entries."""
    best, start, run, s = 0, 0, 0, 0
    for i, d in enumerate(diffs):
        if d > 0:
            if run == 0:
                s = i
            run += 1
            if run > best:
                best, start = run, s
        else:
            run = 0
    return best, start


def theta_trend(mean_theta: Sequence[float], warmup: int, min_rise: int = 10, flat_frac: float = 0.1) -> Dict:
    """Rise-then-flatten check on per-epoch mean theta (index 0 is epoch 1).

    Changes are taken from the last warmup epoch onwards, so the first
    post-warmup change is epoch ``warmup + 1`` minus epoch ``warmup`` (which
    still holds the initial value). The trajectory flattens when the final
    change is below ``flat_frac`` of the largest change; a rise that keeps
    creeping upward at that small rate still counts as flat.
    """
    m = np.asarray(mean_theta, dtype=np.float64)
    offset = max(warmup - 1, 0)
    post = m[offset:]
    diffs = np.diff(post)
    if len(diffs) == 0:
        return {"ok": False, "rise": 0, "peak_change": 0.0, "final_change": 0.0, "reason": "no noisy epochs"}
    rise, start = longest_increase(diffs)
    peak = float(np.max(np.abs(diffs)))
    final = float(abs(diffs[-1]))
    flat = peak > 0 and final < flat_frac * peak
    ok = rise >= min_rise and flat
    reason = "" if ok else (f"longest rise {rise} < {min_rise}" if rise < min_rise else
                            "no flattening after the rise")
    return {"ok": bool(ok), "rise": int(rise), "rise_start_epoch": offset + start + 2,
            "peak_change": peak, "final_change": final, "reason": reason}


def pni_below(pni_final: float, l2p_final: float, theta0: float, frac: float = 0.25) -> bool:
    """Loss-only theta ends below its start or well below the regularized run."""
    return bool(pni_final < theta0 or pni_final < frac * l2p_final)


def robustness_ordering(l2p: Dict[str, float], vanilla: Dict[str, float], none: Dict[str, float],
                        margin: float = 0.02, clean_gap: float = 0.05) -> Dict:
    """Ordering of robust (``pgd``) and ``clean`` accuracies (fractions) across three runs."""
    checks = {
        "l2p_beats_vanilla": l2p["pgd"] - vanilla["pgd"] >= margin,
        "l2p_beats_none": l2p["pgd"] > none["pgd"],
        "vanilla_beats_none": vanilla["pgd"] > none["pgd"],
        "clean_close": abs(l2p["clean"] - vanilla["clean"]) <= clean_gap,
    }
    return {"ok": all(checks.values()), **checks}

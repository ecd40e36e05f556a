"""Evaluation reports: JSON plus an aligned text table with provenance."""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence


def git_commit(cwd=None) -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short=12", "HEAD"], cwd=cwd or Path(__file__).parent,
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def pm(mean: float, std: float) -> str:
    """Percent with spread, e.g. ``51.13±0.08``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


@dataclass
class EvalReport:
    title: str
    rows: List[dict] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)
    columns: Sequence[str] = ("label", "accuracy", "repeats")

    def add(self, label: str, summary: dict, **extra) -> dict:
        row = {"label": label, **summary, **extra}
        self.rows.append(row)
        return row

    def row(self, label: str) -> dict:
        for r in self.rows:
            if r["label"] == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"title": self.title, "metadata": self.metadata, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        md = self.metadata
        lines = [self.title]
        prov = [f"{k}={md[k]}" for k in ("config_digest", "seed", "commit") if k in md]
        if prov:
            lines.append("  " + "  ".join(prov))
        if "data" in md:
            lines.append(f"  data: {md['data']}")
        header = ["attack", "accuracy (%)", "repeats"]
        body = []
        for r in self.rows:
            flag = " (R=1)" if r.get("single_repeat") else ""
            body.append([r["label"], pm(r["mean"], r["std"]) + flag, str(r["repeats"])])
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines.append(fmt.format(*header))
        lines.append(fmt.format(*("-" * w for w in widths)))
        lines += [fmt.format(*b) for b in body]
        if self.rows:
            lines.append("row: " + " | ".join(f"{r['label']} {pm(r['mean'], r['std'])}" for r in self.rows))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval") -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{stem}.json", "text": out / f"{stem}.txt"}
        paths["json"].write_text(self.to_json())
        paths["text"].write_text(self.to_text())
        return paths


def matrix_text(cells: Dict[tuple, dict], sources: Sequence[str], victims: Sequence[str],
                attacks: Sequence[str]) -> str:
    """Source rows by (victim, attack) columns of ``mean±std`` accuracy."""
    header = ["source \\ victim"] + [f"{v}:{a}" for v in victims for a in attacks]
    body = [[s] + [pm(cells[s, v, a]["mean"], cells[s, v, a]["std"]) for v in victims for a in attacks]
            for s in sources]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*header)] + [fmt.format(*b) for b in body]) + "\n"


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())

"""Evaluation report rendering: JSON summary, CSV table, and overview figures.

Figures are written with the Agg backend and fixed metadata so repeated runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_COLUMNS = ("case", "dice", "assd_mm", "precision", "recall", "ln_found")

_SAVEFIG = dict(dpi=120, metadata={"Software": None})


def summarize(per_case: dict) -> dict:
    """Mean metrics over cases; undefined values are excluded per metric.

    Lesion counts are also pooled so an overall detection fraction is
    available alongside the mean of per-case fractions.
    """
    def mean_of(key, valid=lambda r: True):
        vals = [r[key] for r in per_case.values() if valid(r) and r[key] is not None]
        vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
        return float(sum(vals) / len(vals)) if vals else None

    tp = sum(r["lesion_tp"] for r in per_case.values())
    fn = sum(r["lesion_fn"] for r in per_case.values())
    fp = sum(r["lesion_fp"] for r in per_case.values())
    return {
        "cases": len(per_case),
        "mean_dice": mean_of("dice"),
        "mean_assd_mm": mean_of("assd_mm"),
        "mean_precision": mean_of("precision", lambda r: r["precision_defined"]),
        "mean_recall": mean_of("recall", lambda r: r["recall_defined"]),
        "mean_ln_found": mean_of("ln_found", lambda r: r["ln_defined"]),
        "pooled_ln_found": tp / (tp + fn) if tp + fn else None,
        "lesion_tp": tp,
        "lesion_fp": fp,
        "lesion_fn": fn,
    }


def write_json(path, per_case: dict, summary: dict, provenance: dict | None = None):
    doc = {"summary": summary, "per_case": per_case}
    if provenance:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(path, per_case: dict):
    """Per-case table in the Dice / ASSD / Precision / Recall / LN-found layout."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for case in sorted(per_case):
            r = per_case[case]
            writer.writerow([
                case,
                _fmt(r["dice"]),
                _fmt(r["assd_mm"]),
                _fmt(r["precision"]) if r["precision_defined"] else "",
                _fmt(r["recall"]) if r["recall_defined"] else "",
                _fmt(r["ln_found"]) if r["ln_defined"] else "",
            ])


def _fmt(v):
    if v is None or (isinstance(v, float) and (math.isnan(v) or math.isinf(v))):
        return ""
    return f"{v:.6f}"


def render_figures(out_dir, per_case: dict) -> list:
    """Render metric distribution and scatter figures next to the report."""
    out_dir = Path(out_dir)
    written = []
    cases = sorted(per_case)
    if not cases:
        return written

    def collect(key, valid=lambda r: True):
        vals = []
        for c in cases:
            r = per_case[c]
            v = r[key]
            if valid(r) and v is not None and not (isinstance(v, float) and (math.isnan(v) or math.isinf(v))):
                vals.append(v)
        return vals

    groups = [
        ("Dice", collect("dice")),
        ("Precision", collect("precision", lambda r: r["precision_defined"])),
        ("Recall", collect("recall", lambda r: r["recall_defined"])),
        ("LN found", collect("ln_found", lambda r: r["ln_defined"])),
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(
        [g[1] if g[1] else [0.0] for g in groups],
        tick_labels=[g[0] for g in groups],
        showmeans=True,
    )
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("score")
    ax.set_title("Per-case overlap and detection metrics")
    fig.tight_layout()
    p = out_dir / "metrics_distribution.png"
    fig.savefig(p, **_SAVEFIG)
    plt.close(fig)
    written.append(p)

    pairs = [
        (per_case[c]["dice"], per_case[c]["assd_mm"])
        for c in cases
        if per_case[c]["assd_mm"] is not None
        and not math.isinf(per_case[c]["assd_mm"])
        and not math.isnan(per_case[c]["assd_mm"])
    ]
    fig, ax = plt.subplots(figsize=(5, 4))
    if pairs:
        ax.scatter([p[0] for p in pairs], [p[1] for p in pairs], s=18)
    ax.set_xlabel("Dice")
    ax.set_ylabel("ASSD (mm)")
    ax.set_title("Surface distance vs overlap")
    fig.tight_layout()
    p = out_dir / "assd_vs_dice.png"
    fig.savefig(p, **_SAVEFIG)
    plt.close(fig)
    written.append(p)
    return written

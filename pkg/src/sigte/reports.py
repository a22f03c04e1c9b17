"""Plain-text and JSON experiment reports.

The main table carries one row per model variant with columns for quantity
MSE and the two macro-F1 scores; the per-class files break the two
classification tasks down by class (the quantity-tag file also repeats the
quantity MSE column).
"""

from __future__ import annotations

import json
import os

from .data import INDICATIONS, QUANTITY_TAGS
from .training import ExperimentReport, VARIANT_LABELS

__all__ = [
    "format_main_table",
    "format_tag_table",
    "format_ind_table",
    "write_reports",
]


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def _label(variant: str) -> str:
    return VARIANT_LABELS.get(variant, variant)


def format_main_table(report: ExperimentReport) -> str:
    rows = []
    for name, vr in report.variants.items():
        m = vr.metrics
        rows.append(
            [_label(name), f"{m.quantity_mse:.4f}", f"{m.tag_macro_f1:.4f}",
             f"{m.ind_macro_f1:.4f}"]
        )
    return _table(["Model", "Quantity MSE", "Quantity Tag F1", "Indication F1"], rows)


def format_tag_table(report: ExperimentReport) -> str:
    headers = ["Model", *QUANTITY_TAGS, "Quantity MSE"]
    rows = []
    for name, vr in report.variants.items():
        m = vr.metrics
        rows.append(
            [_label(name), *(f"{f1:.4f}" for f1 in m.tag_per_class),
             f"{m.quantity_mse:.4f}"]
        )
    return _table(headers, rows)


def format_ind_table(report: ExperimentReport) -> str:
    headers = ["Model", *INDICATIONS]
    rows = []
    for name, vr in report.variants.items():
        rows.append([_label(name), *(f"{f1:.4f}" for f1 in vr.metrics.ind_per_class)])
    return _table(headers, rows)


def write_reports(report: ExperimentReport, out_dir: str) -> dict[str, str]:
    """Write report.json plus the three text tables; returns path -> content."""
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "report.json": json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        "report.txt": format_main_table(report),
        "quantity_tag_classes.txt": format_tag_table(report),
        "indication_classes.txt": format_ind_table(report),
    }
    out = {}
    for name, content in files.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(content)
        out[path] = content
    return out

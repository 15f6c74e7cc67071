"""Report files: full JSON, per-target CSV, and a plain-text results table.

Wall-clock timings go to ``timing.json`` beside the report so that the
JSON itself is byte-identical across reruns.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .harness import AttackReport

FORMATS = ("json", "csv", "txt")
TABLE_METRICS = ("MRR", "Hits@1")


def report_json(report: AttackReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_columns(architectures) -> list[str]:
    cols = ["seed", "s", "r", "o", "filter", "mode", "kind", "p_s", "p_r", "p_o", "side",
            "fallback_used", "failure"]
    for arch in architectures:
        for phase in ("clean", "poisoned"):
            cols += [f"{arch}_{phase}_{m}" for m in TABLE_METRICS]
    return cols


def report_csv(report: AttackReport) -> str:
    archs = report.config["architectures"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_columns(archs))
    for rec in report.records:
        pert = rec.perturbation or {}
        triple = pert.get("triple") or ["", "", ""]
        decision = rec.decision or {}
        row = [rec.seed, *rec.target, report.config["filter"], report.config["mode"], pert.get("kind", ""),
               *triple, pert.get("side") or "", decision.get("fallback_used", ""), rec.failure or ""]
        for arch in archs:
            m = rec.metrics.get(arch)
            for phase in ("clean", "poisoned"):
                row += [repr(m[phase][k]) if m else "" for k in TABLE_METRICS]
        writer.writerow(row)
    return buf.getvalue()


def render_table(reports) -> str:
    """Rows are filters (plus a clean row), columns are architecture x {MRR, H@1}."""
    if isinstance(reports, AttackReport):
        reports = [reports]
    archs = list(reports[0].config["architectures"])
    header = ["filter"] + [f"{a}:{'H@1' if m == 'Hits@1' else m}" for a in archs for m in TABLE_METRICS]
    rows = [["clean"] + [_fmt(reports[0].summary[a]["clean"][m]) for a in archs for m in TABLE_METRICS]]
    for rep in reports:
        label = f"{rep.config['filter']}-{rep.config['mode']}"
        rows.append([label] + [_fmt(rep.summary[a]["poisoned"][m]) for a in archs for m in TABLE_METRICS])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.2f}"


def emit_report(report: AttackReport, out_dir, formats=FORMATS) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    writers = {"json": ("report.json", report_json), "csv": ("targets.csv", report_csv),
               "txt": ("table.txt", render_table)}
    paths = {}
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown report format {fmt!r}")
        name, render = writers[fmt]
        path = out / name
        path.write_text(render(report), encoding="utf-8")
        paths[fmt] = path
    if "json" in formats:
        (out / "timing.json").write_text(json.dumps(report.wall_clock, indent=2, sort_keys=True) + "\n")
    return paths


def load_report(path) -> AttackReport:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    timing = path.parent / "timing.json"
    if timing.exists():
        data["wall_clock"] = json.loads(timing.read_text())
    return AttackReport.from_dict(data)

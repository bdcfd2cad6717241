"""CSV and Markdown report rendering for evaluation and ablation results.

Markdown tables mirror the comparison/ablation layouts: per-row mAP (%), mean
PerC distance and combined score, with the best (lowest) value per column
bolded.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from camopatch.evaluation import AblationCell, EvalReport, ScoreRow


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _bold_if(text: str, cond: bool) -> str:
    return f"**{text}**" if cond else text


def render_score_table_md(rows: Sequence[ScoreRow], title: str = "Comparison") -> str:
    best_map = min(r.map50 for r in rows)
    best_perc = min(r.mean_perc for r in rows)
    best_score = min(r.combined_score for r in rows)
    lines = [
        f"# {title}",
        "",
        "| Patch Type | mAP (%) | Mean PerC Distance | Combined Score |",
        "|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            "| {} | {} | {} | {} |".format(
                _bold_if(r.label, r.combined_score == best_score),
                _bold_if(_fmt(r.map50), r.map50 == best_map),
                _bold_if(_fmt(r.mean_perc), r.mean_perc == best_perc),
                _bold_if(str(r.combined_score), r.combined_score == best_score),
            )
        )
    notes = [f"- {r.label}: {r.notes}" for r in rows if r.notes]
    if notes:
        lines += ["", "Notes:"] + notes
    return "\n".join(lines) + "\n"


def write_score_table_csv(path: str | Path, rows: Sequence[ScoreRow]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["label", "map50", "mean_perc", "rank_map", "rank_perc", "combined_score", "notes"]
        )
        for r in rows:
            writer.writerow(
                [r.label, r.map50, r.mean_perc, r.rank_map, r.rank_perc, r.combined_score, r.notes]
            )


def render_eval_report_md(report: EvalReport, label: str) -> str:
    lines = [
        f"# Evaluation: {label}",
        "",
        f"- mAP-50 (%, averaged over thresholds): {report.map50_percent:.2f}",
        f"- Mean PerC distance: {report.mean_perc_distance:.2f}",
        "",
        "| Confidence threshold | AP at IoU 0.5 |",
        "|---|---|",
    ]
    for thr, ap in sorted(report.per_threshold_ap.items(), reverse=True):
        lines.append(f"| {thr} | {ap:.4f} |")
    return "\n".join(lines) + "\n"


def write_eval_report_csv(path: str | Path, report: EvalReport, label: str) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "map50_percent", "mean_perc_distance"]
                        + [f"ap@{t}" for t in sorted(report.per_threshold_ap, reverse=True)])
        writer.writerow(
            [label, report.map50_percent, report.mean_perc_distance]
            + [report.per_threshold_ap[t] for t in sorted(report.per_threshold_ap, reverse=True)]
        )


def render_ablation_md(results: Sequence[tuple[str, Sequence[AblationCell]]]) -> str:
    lines = [
        "# Ablation studies",
        "",
        "| Study | Experiment Focus | Hyperparameter | mAP (%) | Mean PerC Distance | Combined Score |",
        "|---|---|---|---|---|---|",
    ]
    for number, (name, cells) in enumerate(results, start=1):
        ok = [c for c in cells if not c.failed]
        best_map = min((c.report.map50_percent for c in ok), default=0.0)
        best_perc = min((c.report.mean_perc_distance for c in ok), default=0.0)
        best_score = min((c.row.combined_score for c in ok if c.row), default=0)
        for c in cells:
            if c.failed:
                lines.append(
                    f"| {number} | {name} | {c.label} | failed | failed | excluded ({c.error}) |"
                )
                continue
            score = c.row.combined_score if c.row else 0
            lines.append(
                "| {} | {} | {} | {} | {} | {} |".format(
                    number,
                    name,
                    _bold_if(c.label, score == best_score),
                    _bold_if(_fmt(c.report.map50_percent), c.report.map50_percent == best_map),
                    _bold_if(
                        _fmt(c.report.mean_perc_distance),
                        c.report.mean_perc_distance == best_perc,
                    ),
                    _bold_if(str(score), score == best_score),
                )
            )
    return "\n".join(lines) + "\n"


def write_ablation_csv(
    path: str | Path, results: Sequence[tuple[str, Sequence[AblationCell]]]
) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["study", "variant", "field", "value", "map50", "mean_perc", "combined_score", "failed", "error"]
        )
        for name, cells in results:
            for c in cells:
                writer.writerow(
                    [
                        name,
                        c.label,
                        c.field,
                        c.value,
                        c.report.map50_percent if c.report else "",
                        c.report.mean_perc_distance if c.report else "",
                        c.row.combined_score if c.row else "",
                        c.failed,
                        c.error,
                    ]
                )

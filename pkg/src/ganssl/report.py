"""Markdown summary of every run found under a directory.

The document is a pure function of the persisted ``record.json`` files (plus an
optional ``acceptance.json``), so regenerating it yields identical bytes.
Wall-clock columns are never included.
"""
from __future__ import annotations

import json
from pathlib import Path

from .harness import RunRecord, aggregate, find_records


def _cell(records: list[RunRecord]) -> str:
    done = [r for r in records if r.status == "completed" and r.final_test_accuracy is not None]
    aborted = len(records) - len(done)
    if not done:
        return "aborted" if aborted else ""
    agg = aggregate(done)
    text = agg.format() + (" (n=1)" if agg.count == 1 else f" (n={agg.count})")
    if aborted:
        text += f" [{aborted} aborted]"
    return text


def _table(records, row_key, col_key, col_title) -> list[str]:
    rows = sorted({row_key(r) for r in records})
    cols = sorted({col_key(r) for r in records})
    lines = ["| model | " + " | ".join(f"{col_title}={c}" for c in cols) + " |",
             "|" + "---|" * (len(cols) + 1)]
    for row in rows:
        cells = [_cell([r for r in records if row_key(r) == row and col_key(r) == c]) for c in cols]
        lines.append(f"| {row} | " + " | ".join(cells) + " |")
    return lines


def _cfg(r: RunRecord, section: str, key: str):
    return r.config[section][key]


def render_report(records: list[RunRecord], acceptance=None) -> str:
    records = sorted(records, key=lambda r: r.run_id)
    out = ["# Experiment report", ""]
    if not records:
        out += ["No run records found.", ""]
    datasets = sorted({_cfg(r, "experiment", "dataset") for r in records})
    for ds in datasets:
        group = [r for r in records if _cfg(r, "experiment", "dataset") == ds]
        model = lambda r: f"{_cfg(r, 'experiment', 'model')} ({_cfg(r, 'data', 'selection')})"  # noqa: E731
        out += [f"## {ds}", ""]
        for bs in sorted({_cfg(r, "train", "batch_size") for r in group}):
            sub = [r for r in group if _cfg(r, "train", "batch_size") == bs]
            out += [f"### Test accuracy by labeled count (batch size {bs})", ""]
            out += _table(sub, model, lambda r: _cfg(r, "data", "labeled_count"), "n") + [""]
        for n in sorted({_cfg(r, "data", "labeled_count") for r in group}):
            sub = [r for r in group if _cfg(r, "data", "labeled_count") == n]
            if len({_cfg(r, "train", "batch_size") for r in sub}) < 2:
                continue
            out += [f"### Test accuracy by batch size (n={n})", ""]
            out += _table(sub, model, lambda r: _cfg(r, "train", "batch_size"), "batch") + [""]

    if records:
        out += ["## Runs", "", "| run id | status | epochs | final test accuracy | artifacts |", "|---|---|---|---|---|"]
        for r in records:
            acc = "" if r.final_test_accuracy is None else f"{r.final_test_accuracy:.2f}%"
            links = []
            for name, path in sorted(r.artifacts.items()):
                for p in (path if isinstance(path, list) else [path]):
                    if str(p).endswith(".png") or name in ("metrics", "final_checkpoint"):
                        links.append(f"[{name}]({r.run_id}/{p})")
            out.append(f"| {r.run_id} | {r.status} | {len(r.rows)} | {acc} | {' '.join(links)} |")
        out.append("")

    if acceptance:
        out += ["## Acceptance checks", "", "| check | result | detail |", "|---|---|---|"]
        for item in acceptance:
            verdict = "PASS" if item["passed"] else "FAIL"
            detail = str(item.get("detail", "")).replace("|", "/").replace("\n", " ")
            out.append(f"| {item['name']} | {verdict} | {detail} |")
        out.append("")
    return "\n".join(out)


def report(run_dir, output=None) -> Path:
    """Write ``report.md`` for all runs under ``run_dir`` and return its path."""
    run_dir = Path(run_dir)
    records = find_records(run_dir)
    acceptance = None
    acc_path = run_dir / "acceptance.json"
    if acc_path.exists():
        acceptance = json.loads(acc_path.read_text())
    text = render_report(records, acceptance)
    path = Path(output) if output else run_dir / "report.md"
    path.write_text(text)
    return path

"""Render bucketed findings: console table, summary.tsv, and figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files, never to a display

import matplotlib.pyplot as plt

TSV_COLUMNS = (
    "bug_class",
    "operation",
    "checker",
    "status",
    "occurrence_count",
    "body_fingerprint",
    "first_seen",
)


def summarize(documents: list[dict]) -> list[dict]:
    """One row per bucket, sorted for stable output."""
    rows = []
    for doc in documents:
        rows.append({name: doc.get(name, "") for name in TSV_COLUMNS})
    rows.sort(key=lambda r: (r["bug_class"], r["operation"], str(r["status"]), r["checker"]))
    return rows


def render_table(rows: list[dict]) -> str:
    """Fixed-width class x operation x count table for the console."""
    if not rows:
        return "no findings\n"
    headers = ("bug_class", "operation", "checker", "status", "count")
    cells = [
        (
            r["bug_class"],
            r["operation"],
            r["checker"],
            str(r["status"]),
            str(r["occurrence_count"]),
        )
        for r in rows
    ]
    widths = [
        max(len(headers[i]), *(len(c[i]) for c in cells)) for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for c in cells:
        lines.append("  ".join(c[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines) + "\n"


def write_tsv(rows: list[dict], path) -> Path:
    path = Path(path)
    lines = ["\t".join(TSV_COLUMNS)]
    for r in rows:
        lines.append("\t".join(str(r[name]) for name in TSV_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _bar(ax, labels, values, title, color):
    ax.barh(range(len(labels)), values, color=color)
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_title(title)
    ax.set_xlabel("buckets" if "class" in title else "occurrences")
    if not labels:
        ax.text(0.5, 0.5, "no findings", ha="center", va="center", transform=ax.transAxes)


def render_figures(rows: list[dict], out_dir) -> list[Path]:
    """Two charts: buckets per bug class, occurrences per operation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    by_class: dict = {}
    for r in rows:
        by_class[r["bug_class"]] = by_class.get(r["bug_class"], 0) + 1
    fig, ax = plt.subplots(figsize=(7, 3.5))
    classes = sorted(by_class)
    _bar(ax, classes, [by_class[c] for c in classes], "buckets per bug class", "#c0504d")
    fig.tight_layout()
    class_path = out / "bug_classes.png"
    fig.savefig(class_path, dpi=120)
    plt.close(fig)
    written.append(class_path)

    by_operation: dict = {}
    for r in rows:
        count = int(r["occurrence_count"] or 0)
        by_operation[r["operation"]] = by_operation.get(r["operation"], 0) + count
    operations = sorted(by_operation, key=lambda o: (-by_operation[o], o))[:12]
    fig, ax = plt.subplots(figsize=(7, max(3.5, 0.45 * len(operations) + 1.5)))
    _bar(
        ax,
        operations,
        [by_operation[o] for o in operations],
        "occurrences per operation",
        "#4f81bd",
    )
    fig.tight_layout()
    operations_path = out / "operations.png"
    fig.savefig(operations_path, dpi=120)
    plt.close(fig)
    written.append(operations_path)
    return written
